//! Independent oracles and random instance builders shared by the
//! integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use taskfuse::activations::task_ids;
use taskfuse::fusion::{init_session, plan_from_matrices, FusionTree};
use taskfuse::{GroupingConfig, SimilarityMatrix, SimilarityMethod, StageId, TaskId, ValueMode};

pub fn names(t: usize) -> Vec<TaskId> {
    let n: Vec<String> = (0..t).map(|i| format!("t{i}")).collect();
    task_ids(&n)
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Symmetric matrix with unit diagonal and off-diagonals uniform in `[lo, hi)`.
pub fn random_similarity<R: Rng>(
    rng: &mut R,
    tasks: &[TaskId],
    stage: usize,
    lo: f64,
    hi: f64,
) -> SimilarityMatrix {
    let t = tasks.len();
    let mut v = Array2::eye(t);
    for i in 0..t {
        for j in (i + 1)..t {
            let x = rng.random_range(lo..hi);
            v[[i, j]] = x;
            v[[j, i]] = x;
        }
    }
    SimilarityMatrix::new(StageId(stage), SimilarityMethod::CkaUnbiased, tasks.to_vec(), v).unwrap()
}

/// Textbook index-summation form of the unbiased HSIC estimator.
pub fn hsic1_oracle(k: &Array2<f64>, l: &Array2<f64>) -> f64 {
    let n = k.nrows();
    let kt = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { k[[i, j]] });
    let lt = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { l[[i, j]] });
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            trace += kt[[i, j]] * lt[[j, i]];
        }
    }
    let sum_k: f64 = kt.iter().sum();
    let sum_l: f64 = lt.iter().sum();
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..n {
            for q in 0..n {
                cross += kt[[i, j]] * lt[[j, q]];
            }
        }
    }
    let nf = n as f64;
    (trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * cross) / (nf * (nf - 3.0))
}

/// All set partitions of `0..n`, built by inserting each element into an
/// existing block or a new one.
pub fn partitions_oracle(n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new()];
    for e in 0..n {
        let mut next = Vec::new();
        for p in &out {
            for b in 0..p.len() {
                let mut q: Vec<Vec<usize>> = p.clone();
                q[b].push(e);
                next.push(q);
            }
            let mut q = p.clone();
            q.push(vec![e]);
            next.push(q);
        }
        out = next;
    }
    out
}

/// Per-task and per-group aggregate of a partition.
pub fn score_oracle(s: &Array2<f64>, blocks: &[Vec<usize>]) -> (f64, f64) {
    let t = s.nrows();
    let mut task_total = 0.0;
    let mut group_total = 0.0;
    for b in blocks {
        let mut member_total = 0.0;
        for &i in b {
            let v = if b.len() == 1 {
                0.0
            } else {
                b.iter().filter(|&&j| j != i).map(|&j| s[[i, j]]).sum::<f64>() / (b.len() - 1) as f64
            };
            member_total += v;
        }
        task_total += member_total;
        group_total += member_total / b.len() as f64;
    }
    (task_total / t as f64, group_total / blocks.len() as f64)
}

fn sorted_key(blocks: &[Vec<usize>], names: &[TaskId]) -> Vec<Vec<String>> {
    let mut key: Vec<Vec<String>> = blocks
        .iter()
        .map(|b| {
            let mut m: Vec<String> = b.iter().map(|&i| names[i].to_string()).collect();
            m.sort();
            m
        })
        .collect();
    key.sort();
    key
}

/// Exhaustive argmax with ties (within 1e-12) going to fewer groups, then
/// the lexicographically smallest sorted key. Returned as a sorted key.
pub fn best_partition_oracle(s: &SimilarityMatrix, mode: ValueMode) -> (f64, Vec<Vec<String>>) {
    let v = s.values().to_owned();
    let mut best: Option<(f64, usize, Vec<Vec<String>>)> = None;
    for p in partitions_oracle(s.len()) {
        let (per_task, per_group) = score_oracle(&v, &p);
        let score = match mode {
            ValueMode::PerTask => per_task,
            ValueMode::PerGroup => per_group,
        };
        let key = sorted_key(&p, s.tasks());
        let better = match &best {
            None => true,
            Some((bs, bn, bk)) => {
                if (score - bs).abs() > 1e-12 {
                    score > *bs
                } else if p.len() != *bn {
                    p.len() < *bn
                } else {
                    key < *bk
                }
            }
        };
        if better {
            best = Some((score, p.len(), key));
        }
    }
    let (score, _, key) = best.unwrap();
    (score, key)
}

/// Steps a session to completion with random per-parent matrices.
pub fn random_progressive<R: Rng>(rng: &mut R, t: usize, stages: usize, cfg: GroupingConfig) -> FusionTree {
    let tasks = names(t);
    let mut session = init_session(&tasks, stages, cfg, SimilarityMethod::CkaUnbiased).unwrap();
    while !session.is_complete() {
        let stage = session.current_stage;
        let matrices: Vec<SimilarityMatrix> = session
            .parent_groups()
            .iter()
            .map(|p| random_similarity(rng, p, stage, -0.2, 1.0))
            .collect();
        session = session.step_with_matrices(&matrices).unwrap();
    }
    session.tree
}

/// Plans every stage from independent random full matrices.
pub fn random_offline<R: Rng>(rng: &mut R, t: usize, stages: usize, cfg: GroupingConfig) -> FusionTree {
    let tasks = names(t);
    let matrices: Vec<SimilarityMatrix> = (1..=stages)
        .map(|c| random_similarity(rng, &tasks, c, -0.2, 1.0))
        .collect();
    plan_from_matrices(&tasks, &matrices, &cfg).unwrap()
}

pub fn group_counts_non_decreasing(tree: &FusionTree) -> bool {
    let counts: Vec<usize> = (0..=tree.num_stages)
        .map(|c| tree.group_count(c).unwrap())
        .collect();
    counts.windows(2).all(|w| w[0] <= w[1])
}

/// Orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng>(rng: &mut R, n: usize) -> Array2<f64> {
    let a = gaussian(rng, n, n);
    let mut q = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut v = a.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k).to_owned();
            let proj = qk.dot(&v);
            v = &v - &(&qk * proj);
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(&v / norm));
    }
    q
}
