//! Mini-batch trainer with a fixed epoch budget.

use ndarray::{Array1, Array2, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::net::{BranchedNet, Gradients};
use super::rng_for;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball momentum 0.9.
    #[default]
    SgdMomentum,
    /// Adam with beta1 0.9, beta2 0.999, eps 1e-8.
    AdamLike,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.02,
            seed: 0,
            optimizer: Optimizer::SgdMomentum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Spec("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Spec(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Mean total loss of every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch_losses: Vec<f64>,
}

impl TrainRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

struct Slot {
    m: (Array2<f64>, Array1<f64>),
    v: (Array2<f64>, Array1<f64>),
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    slots: Vec<Slot>,
}

impl OptimizerState {
    fn new(net: &BranchedNet, kind: Optimizer, lr: f64) -> Self {
        let zeros = |w: &Array2<f64>, b: &Array1<f64>| (Array2::zeros(w.raw_dim()), Array1::zeros(b.len()));
        let slots = net
            .layers()
            .into_iter()
            .map(|l| Slot {
                m: zeros(&l.weight, &l.bias),
                v: zeros(&l.weight, &l.bias),
            })
            .collect();
        OptimizerState {
            kind,
            lr,
            step: 0,
            slots,
        }
    }

    fn apply(&mut self, net: &mut BranchedNet, grads: &Gradients) {
        self.step += 1;
        let lr = self.lr;
        let (c1, c2) = (1.0 - BETA1.powi(self.step), 1.0 - BETA2.powi(self.step));
        for ((layer, (gw, gb)), slot) in net
            .layers_mut()
            .into_iter()
            .zip(&grads.layers)
            .zip(&mut self.slots)
        {
            match self.kind {
                Optimizer::Sgd => {
                    layer.weight.scaled_add(-lr, gw);
                    layer.bias.scaled_add(-lr, gb);
                }
                Optimizer::SgdMomentum => {
                    Zip::from(&mut slot.m.0)
                        .and(gw)
                        .for_each(|m, &g| *m = MOMENTUM * *m + g);
                    Zip::from(&mut slot.m.1)
                        .and(gb)
                        .for_each(|m, &g| *m = MOMENTUM * *m + g);
                    layer.weight.scaled_add(-lr, &slot.m.0);
                    layer.bias.scaled_add(-lr, &slot.m.1);
                }
                Optimizer::AdamLike => {
                    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    };
                    Zip::from(&mut layer.weight)
                        .and(&mut slot.m.0)
                        .and(&mut slot.v.0)
                        .and(gw)
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                    Zip::from(&mut layer.bias)
                        .and(&mut slot.m.1)
                        .and(&mut slot.v.1)
                        .and(gb)
                        .for_each(|p, m, v, &g| update(p, m, v, g));
                }
            }
        }
    }
}

/// Trains every head on its own task with an unweighted loss sum.
/// Shuffling is seeded by `cfg.seed`, so identical inputs give identical
/// loss records.
pub fn train(net: &mut BranchedNet, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRecord> {
    cfg.validate()?;
    if data.tasks.as_slice() != net.tasks() {
        return Err(Error::Shape("dataset tasks differ from the network's".into()));
    }
    let weights = vec![1.0; net.tasks().len()];
    let mut rng = rng_for(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut state = OptimizerState::new(net, cfg.optimizer, cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = data.select(rows);
            let lg = net.loss_and_grads(&batch.inputs, &batch.targets, &weights)?;
            if !lg.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    learning_rate: cfg.learning_rate,
                });
            }
            sum += lg.total * rows.len() as f64;
            state.apply(net, &lg.grads);
        }
        epoch_losses.push(sum / data.len() as f64);
    }
    Ok(TrainRecord { epoch_losses })
}
