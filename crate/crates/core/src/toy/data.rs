//! Synthetic multi-task data with controlled relatedness.
//!
//! Inputs are standard normal. A fixed random map produces latent factors
//! `z = tanh(W x)`, and each task reads out only its own subset of factors.
//! Tasks sharing factors are related; tasks with disjoint subsets are not.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{rng_for, Loss};
use crate::activations::TaskId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Regression {
        #[serde(default = "default_outputs")]
        outputs: usize,
    },
    Classification {
        num_classes: usize,
    },
}

fn default_outputs() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: TaskId,
    #[serde(flatten)]
    pub kind: TaskKind,
    pub factors: Vec<usize>,
    #[serde(default)]
    pub noise_std: f64,
    /// Seed of the readout weights; defaults to the task's position.
    #[serde(default)]
    pub readout_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub samples: usize,
    /// Scale of the pre-`tanh` latent projections.
    #[serde(default = "default_gain")]
    pub latent_gain: f64,
    pub tasks: Vec<SyntheticTask>,
}

fn default_gain() -> f64 {
    1.5
}

impl SyntheticTaskSpec {
    /// Regression tasks over the given factor subsets, named `t0`, `t1`, ...
    pub fn regression(input_dim: usize, latent_dim: usize, samples: usize, factors: &[&[usize]]) -> Self {
        SyntheticTaskSpec {
            input_dim,
            latent_dim,
            samples,
            latent_gain: default_gain(),
            tasks: factors
                .iter()
                .enumerate()
                .map(|(i, f)| SyntheticTask {
                    id: TaskId::new(format!("t{i}")).expect("non-empty"),
                    kind: TaskKind::Regression {
                        outputs: default_outputs(),
                    },
                    factors: f.to_vec(),
                    noise_std: 0.0,
                    readout_seed: None,
                })
                .collect(),
        }
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Spec("input_dim and latent_dim must be positive".into()));
        }
        if self.samples < crate::activations::MIN_SAMPLES {
            return Err(Error::Spec(format!(
                "samples must be at least {}",
                crate::activations::MIN_SAMPLES
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Spec("no tasks".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.id == t.id) {
                return Err(Error::Spec(format!("task {} defined twice", t.id)));
            }
            if t.factors.is_empty() {
                return Err(Error::Spec(format!("task {} has an empty factor subset", t.id)));
            }
            if let Some(f) = t.factors.iter().find(|&&f| f >= self.latent_dim) {
                return Err(Error::Spec(format!(
                    "task {} uses factor {f} but latent_dim is {}",
                    t.id, self.latent_dim
                )));
            }
            if t.noise_std.is_nan() || t.noise_std < 0.0 {
                return Err(Error::Spec(format!("task {} has negative noise", t.id)));
            }
            match t.kind {
                TaskKind::Regression { outputs: 0 } => {
                    return Err(Error::Spec(format!("task {} has zero outputs", t.id)))
                }
                TaskKind::Classification { num_classes } if num_classes < 2 => {
                    return Err(Error::Spec(format!("task {} needs at least 2 classes", t.id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Output width and loss of each task head.
    pub fn heads(&self) -> Vec<HeadSpec> {
        self.tasks
            .iter()
            .map(|t| match t.kind {
                TaskKind::Regression { outputs } => HeadSpec {
                    task: t.id.clone(),
                    outputs,
                    loss: Loss::Mse,
                },
                TaskKind::Classification { num_classes } => HeadSpec {
                    task: t.id.clone(),
                    outputs: num_classes,
                    loss: Loss::SoftmaxCrossEntropy,
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: TaskId,
    pub outputs: usize,
    pub loss: Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskTarget {
    Regression(Array2<f64>),
    Classes(Vec<usize>),
}

impl TaskTarget {
    pub fn len(&self) -> usize {
        match self {
            TaskTarget::Regression(y) => y.nrows(),
            TaskTarget::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> TaskTarget {
        match self {
            TaskTarget::Regression(y) => TaskTarget::Regression(y.select(Axis(0), rows)),
            TaskTarget::Classes(c) => TaskTarget::Classes(rows.iter().map(|&i| c[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub tasks: Vec<TaskId>,
    pub targets: Vec<TaskTarget>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), rows),
            tasks: self.tasks.clone(),
            targets: self.targets.iter().map(|t| t.select(rows)).collect(),
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }
}

/// Latent projection rows: orthonormal when `latent_dim <= input_dim`,
/// otherwise independent unit vectors.
fn latent_map<R: Rng>(rng: &mut R, latent_dim: usize, input_dim: usize) -> Array2<f64> {
    let mut w = Array2::<f64>::zeros((latent_dim, input_dim));
    for k in 0..latent_dim {
        let mut v: Array1<f64> = Array1::from_shape_simple_fn(input_dim, || rng.sample(StandardNormal));
        if latent_dim <= input_dim {
            for j in 0..k {
                let prev = w.row(j).to_owned();
                let proj = prev.dot(&v);
                v = &v - &(&prev * proj);
            }
        }
        let norm = v.dot(&v).sqrt();
        w.row_mut(k).assign(&(&v / norm));
    }
    w
}

/// Draws a dataset; identical `(spec, seed)` give bit-identical data.
pub fn gen_synthetic(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.samples;
    let mut input_rng = rng_for(seed, "inputs");
    let inputs =
        Array2::from_shape_simple_fn((n, spec.input_dim), || input_rng.sample::<f64, _>(StandardNormal));
    let w = latent_map(&mut rng_for(seed, "latent-map"), spec.latent_dim, spec.input_dim);
    let latents = (inputs.dot(&w.t()) * spec.latent_gain).mapv(f64::tanh);

    let mut targets = Vec::with_capacity(spec.tasks.len());
    for (index, task) in spec.tasks.iter().enumerate() {
        let readout_key = format!("readout/{}", task.readout_seed.unwrap_or(index as u64));
        let mut readout_rng = rng_for(seed, &readout_key);
        let mut noise_rng = rng_for(seed, &format!("noise/{}", task.id));
        let noise = Normal::new(0.0, task.noise_std).map_err(|e| Error::Spec(e.to_string()))?;
        let z = latents.select(Axis(1), &task.factors);
        let width = match task.kind {
            TaskKind::Regression { outputs } => outputs,
            TaskKind::Classification { num_classes } => num_classes,
        };
        let scale = 1.0 / (task.factors.len() as f64).sqrt();
        let readout = Array2::from_shape_simple_fn((task.factors.len(), width), || {
            readout_rng.sample::<f64, _>(StandardNormal) * scale
        });
        let mut y = z.dot(&readout);
        if task.noise_std > 0.0 {
            y.mapv_inplace(|v| v + noise_rng.sample(noise));
        }
        targets.push(match task.kind {
            TaskKind::Regression { .. } => TaskTarget::Regression(y),
            TaskKind::Classification { .. } => TaskTarget::Classes(
                y.outer_iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .fold(
                                (0, f64::NEG_INFINITY),
                                |best, (i, &v)| {
                                    if v > best.1 {
                                        (i, v)
                                    } else {
                                        best
                                    }
                                },
                            )
                            .0
                    })
                    .collect(),
            ),
        });
    }
    Ok(Dataset {
        inputs,
        tasks: spec.task_ids(),
        targets,
    })
}
