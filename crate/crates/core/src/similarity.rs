//! Representation similarity: linear Gram matrices, the unbiased HSIC
//! estimator, CKA built on it, and RDM-based RSA.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationBundle, ActivationMatrix, StageId, TaskId, MIN_SAMPLES};
use crate::error::{Error, Result};
use crate::fsutil;

/// `n x n` linear-kernel Gram matrix over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix(Array2<f64>);

impl GramMatrix {
    /// Wraps an existing square matrix, checking symmetry to 1e-10 relative.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c {
            return Err(Error::Shape(format!("gram matrix must be square, got {r}x{c}")));
        }
        let scale = values
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for i in 0..r {
            for j in (i + 1)..r {
                if (values[[i, j]] - values[[j, i]]).abs() > 1e-10 * scale {
                    return Err(Error::Data(format!("gram matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(GramMatrix(values))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

/// `K = X Xᵀ`, filled on the upper triangle and mirrored.
pub fn gram_linear(x: &ActivationMatrix) -> GramMatrix {
    gram_from_rows(x.values())
}

pub(crate) fn gram_from_rows(x: ArrayView2<'_, f64>) -> GramMatrix {
    let n = x.nrows();
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let ri = x.row(i);
        for j in i..n {
            let v = ri.dot(&x.row(j));
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    GramMatrix(k)
}

/// Unbiased HSIC estimator over the zero-diagonal Gram matrices.
pub fn hsic1(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    let n = k.n();
    if l.n() != n {
        return Err(Error::Alignment(format!(
            "gram matrices have {n} and {} samples",
            l.n()
        )));
    }
    if n < MIN_SAMPLES {
        return Err(Error::Size(format!(
            "unbiased HSIC needs at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    let (k, l) = (&k.0, &l.0);
    let nf = n as f64;

    let mut trace = 0.0;
    let mut sum_k = 0.0;
    let mut sum_l = 0.0;
    let mut row_k = vec![0.0; n];
    let mut row_l = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (k[[i, j]], l[[i, j]]);
            // tr(K̃ L̃) = Σ_ij K̃_ij L̃_ji and both are symmetric
            trace += a * l[[j, i]];
            sum_k += a;
            sum_l += b;
            row_k[i] += a;
            row_l[i] += b;
        }
    }
    // 1ᵀ K̃ L̃ 1 = (K̃ 1)ᵀ (L̃ 1) for symmetric K̃
    let cross: f64 = row_k.iter().zip(&row_l).map(|(a, b)| a * b).sum();

    let value = trace + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * cross;
    Ok(value / (nf * (nf - 3.0)))
}

/// Unbiased linear CKA between two activation matrices.
pub fn cka_unbiased(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.n() != y.n() {
        return Err(Error::Alignment(format!(
            "task {} has {} samples, task {} has {}",
            x.task(),
            x.n(),
            y.task(),
            y.n()
        )));
    }
    let k = gram_linear(x);
    let l = gram_linear(y);
    let kk = hsic1(&k, &k)?;
    if kk <= 0.0 {
        return Err(Error::Degenerate(format!(
            "task {}: self-HSIC is {kk:e} (constant or collapsed features)",
            x.task()
        )));
    }
    let ll = hsic1(&l, &l)?;
    if ll <= 0.0 {
        return Err(Error::Degenerate(format!(
            "task {}: self-HSIC is {ll:e} (constant or collapsed features)",
            y.task()
        )));
    }
    Ok(hsic1(&k, &l)? / (kk.sqrt() * ll.sqrt()))
}

/// Representation similarity analysis: Spearman correlation of the upper
/// triangles of the two `1 - Pearson` dissimilarity matrices.
pub fn rsa(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.n() != y.n() {
        return Err(Error::Alignment(format!(
            "task {} has {} samples, task {} has {}",
            x.task(),
            x.n(),
            y.task(),
            y.n()
        )));
    }
    let rx = rdm_upper(x)?;
    let ry = rdm_upper(y)?;
    spearman(&rx, &ry).ok_or_else(|| {
        Error::Degenerate(format!(
            "tasks {} and {}: a dissimilarity matrix is constant",
            x.task(),
            y.task()
        ))
    })
}

fn rdm_upper(x: &ActivationMatrix) -> Result<Vec<f64>> {
    let v = x.values();
    let n = v.nrows();
    let centered: Vec<(Vec<f64>, f64)> = (0..n)
        .map(|i| {
            let row = v.row(i);
            let mean = row.sum() / row.len() as f64;
            let c: Vec<f64> = row.iter().map(|a| a - mean).collect();
            let norm = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            (c, norm)
        })
        .collect();
    if let Some(i) = centered.iter().position(|(_, norm)| *norm == 0.0) {
        return Err(Error::Degenerate(format!(
            "task {}: row {i} has zero variance",
            x.task()
        )));
    }
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, na) = &centered[i];
            let (b, nb) = &centered[j];
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            out.push(1.0 - dot / (na * nb));
        }
    }
    Ok(out)
}

/// Ranks starting at 1, ties receiving the mean of the ranks they span.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

pub(crate) fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMethod {
    #[default]
    CkaUnbiased,
    Rsa,
}

impl SimilarityMethod {
    pub fn compute(self, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
        match self {
            SimilarityMethod::CkaUnbiased => cka_unbiased(x, y),
            SimilarityMethod::Rsa => rsa(x, y),
        }
    }
}

impl fmt::Display for SimilarityMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMethod::CkaUnbiased => "cka_unbiased",
            SimilarityMethod::Rsa => "rsa",
        })
    }
}

/// Symmetric `T x T` similarity between tasks at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SimilarityMatrixRepr", into = "SimilarityMatrixRepr")]
pub struct SimilarityMatrix {
    stage: StageId,
    method: SimilarityMethod,
    tasks: Vec<TaskId>,
    values: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct SimilarityMatrixRepr {
    stage: StageId,
    method: SimilarityMethod,
    tasks: Vec<TaskId>,
    values: Vec<Vec<f64>>,
}

impl TryFrom<SimilarityMatrixRepr> for SimilarityMatrix {
    type Error = Error;

    fn try_from(r: SimilarityMatrixRepr) -> Result<Self> {
        let t = r.tasks.len();
        if r.values.len() != t || r.values.iter().any(|row| row.len() != t) {
            return Err(Error::Shape(format!(
                "similarity values must be {t}x{t} to match the task list"
            )));
        }
        let flat: Vec<f64> = r.values.into_iter().flatten().collect();
        let values = Array2::from_shape_vec((t, t), flat).expect("checked shape");
        SimilarityMatrix::new(r.stage, r.method, r.tasks, values)
    }
}

impl From<SimilarityMatrix> for SimilarityMatrixRepr {
    fn from(m: SimilarityMatrix) -> Self {
        SimilarityMatrixRepr {
            stage: m.stage,
            method: m.method,
            tasks: m.tasks,
            values: m.values.outer_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl SimilarityMatrix {
    /// Validates shape, distinct tasks, finiteness and exact symmetry.
    pub fn new(
        stage: StageId,
        method: SimilarityMethod,
        tasks: Vec<TaskId>,
        values: Array2<f64>,
    ) -> Result<Self> {
        let t = tasks.len();
        if t == 0 {
            return Err(Error::Size("similarity matrix needs at least one task".into()));
        }
        if values.dim() != (t, t) {
            return Err(Error::Shape(format!(
                "similarity values are {:?}, expected {t}x{t}",
                values.dim()
            )));
        }
        for (i, a) in tasks.iter().enumerate() {
            if tasks[..i].contains(a) {
                return Err(Error::Identity(format!("task {a} listed twice")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("similarity values must be finite".into()));
        }
        for i in 0..t {
            for j in (i + 1)..t {
                if values[[i, j]] != values[[j, i]] {
                    return Err(Error::Data(format!(
                        "similarity matrix not symmetric at ({}, {})",
                        tasks[i], tasks[j]
                    )));
                }
            }
        }
        Ok(SimilarityMatrix {
            stage,
            method,
            tasks,
            values,
        })
    }

    pub fn stage(&self) -> StageId {
        self.stage
    }

    pub fn method(&self) -> SimilarityMethod {
        self.method
    }

    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn index_of(&self, task: &TaskId) -> Option<usize> {
        self.tasks.iter().position(|t| t == task)
    }

    pub fn get(&self, a: &TaskId, b: &TaskId) -> Option<f64> {
        Some(self.values[[self.index_of(a)?, self.index_of(b)?]])
    }

    /// The sub-matrix over `tasks`, in the order given.
    pub fn restrict(&self, tasks: &[TaskId]) -> Result<SimilarityMatrix> {
        let idx = tasks
            .iter()
            .map(|t| {
                self.index_of(t).ok_or_else(|| {
                    Error::Membership(format!("task {t} not in the stage {} matrix", self.stage))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let values = Array2::from_shape_fn((idx.len(), idx.len()), |(i, j)| self.values[[idx[i], idx[j]]]);
        SimilarityMatrix::new(self.stage, self.method, tasks.to_vec(), values)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("similarity matrix serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self
            .tasks
            .iter()
            .map(TaskId::as_str)
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in self.values.outer_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Binary 8-bit PGM heatmap, one pixel per entry.
    pub fn to_pgm(&self) -> Vec<u8> {
        let t = self.len();
        let mut out = format!("P5\n{t} {t}\n255\n").into_bytes();
        out.extend(self.values.iter().map(|&v| heat_level(v)));
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fsutil::write_json_atomic(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }

    pub fn pretty(&self) -> String {
        let width = self
            .tasks
            .iter()
            .map(|t| t.as_str().len())
            .max()
            .unwrap_or(1)
            .max(6);
        let mut out = format!("{:>width$}", "");
        for t in &self.tasks {
            out.push_str(&format!(" {:>width$}", t.as_str()));
        }
        out.push('\n');
        for (t, row) in self.tasks.iter().zip(self.values.outer_iter()) {
            out.push_str(&format!("{:>width$}", t.as_str()));
            for v in row {
                out.push_str(&format!(" {v:>width$.4}"));
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn heat_level(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Computes each unordered task pair once and mirrors it.
pub fn pairwise_similarity(bundle: &ActivationBundle, method: SimilarityMethod) -> Result<SimilarityMatrix> {
    let entries: Vec<&ActivationMatrix> = bundle.iter().collect();
    let t = entries.len();
    let pairs: Vec<(usize, usize)> = (0..t).flat_map(|i| ((i + 1)..t).map(move |j| (i, j))).collect();
    let results: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            method.compute(entries[i], entries[j]).map_err(|e| {
                e.context(format!(
                    "similarity of tasks {} and {}",
                    entries[i].task(),
                    entries[j].task()
                ))
            })
        })
        .collect();
    let mut values = Array2::<f64>::eye(t);
    for (&(i, j), r) in pairs.iter().zip(results) {
        let v = r?;
        values[[i, j]] = v;
        values[[j, i]] = v;
    }
    SimilarityMatrix::new(bundle.stage(), method, bundle.tasks(), values)
}
