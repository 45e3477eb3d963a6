//! Dense branched multi-task network with exact gradients.
//!
//! Topology follows a [`FusionTree`]: a shared trunk, then at each
//! candidate stage one dense block per group, each fed by the block of the
//! parent group one stage earlier, and finally a linear head per task on
//! top of the last-stage block holding that task.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{HeadSpec, TaskTarget};
use super::{rng_for, Loss};
use crate::activations::{make_bundle, ActivationBundle, ActivationMatrix, StageId, TaskId};
use crate::error::{Error, Result};
use crate::fusion::{refine_check, FusionTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, out: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => out.mapv(|y| 1.0 - y * y),
            Activation::Identity => Array2::ones(out.raw_dim()),
        }
    }
}

/// Layer widths: hidden trunk layers, then one block width per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetWidths {
    pub trunk: Vec<usize>,
    pub stages: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..=limit)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub stage: usize,
    /// Task indices, ascending.
    pub members: Vec<usize>,
    /// Index of the feeding block one stage earlier; `None` reads the trunk.
    pub parent: Option<usize>,
    pub layer: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub task: usize,
    pub loss: Loss,
    /// Index of the last-stage block feeding the head.
    pub block: usize,
    pub layer: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchedNet {
    pub tree: FusionTree,
    pub widths: NetWidths,
    pub input_dim: usize,
    pub trunk: Vec<Dense>,
    pub stages: Vec<Vec<Block>>,
    pub heads: Vec<Head>,
}

/// Gradient of each layer, in [`BranchedNet::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

/// Intermediate outputs kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    pub trunk: Vec<Array2<f64>>,
    pub blocks: Vec<Vec<Array2<f64>>>,
    pub predictions: Vec<Array2<f64>>,
}

/// Loss summary and gradients of one evaluation.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub total: f64,
    pub per_task: Vec<f64>,
    pub grads: Gradients,
    pub input_grad: Array2<f64>,
}

fn block_key(stage: usize, members: &[usize], tasks: &[TaskId]) -> String {
    let mut names: Vec<&str> = members.iter().map(|&i| tasks[i].as_str()).collect();
    names.sort_unstable();
    format!("stage{stage}/{}", names.join("+"))
}

/// Builds the network for `tree`; each layer's initial weights come from a
/// stream keyed by its role, so a given trunk layer, group block or head
/// starts identically in every tree built from the same seed.
pub fn build_net(
    tree: &FusionTree,
    input_dim: usize,
    widths: &NetWidths,
    heads: &[HeadSpec],
    seed: u64,
) -> Result<BranchedNet> {
    if !refine_check(tree) {
        return Err(Error::Topology("fusion tree is not a refinement chain".into()));
    }
    if widths.stages.len() != tree.num_stages {
        return Err(Error::Topology(format!(
            "{} stage widths for a tree with {} stages",
            widths.stages.len(),
            tree.num_stages
        )));
    }
    if input_dim == 0 || widths.trunk.iter().chain(&widths.stages).any(|&w| w == 0) {
        return Err(Error::Topology("layer widths must be positive".into()));
    }
    if heads.len() != tree.tasks.len() || heads.iter().zip(&tree.tasks).any(|(h, t)| &h.task != t) {
        return Err(Error::Topology(
            "head specs must list the tree's tasks in order".into(),
        ));
    }

    let tasks = &tree.tasks;
    let mut trunk = Vec::with_capacity(widths.trunk.len());
    let mut fan_in = input_dim;
    for (i, &w) in widths.trunk.iter().enumerate() {
        trunk.push(Dense::glorot(
            &mut rng_for(seed, &format!("trunk/{i}")),
            fan_in,
            w,
        ));
        fan_in = w;
    }

    let index_of = |t: &TaskId| tasks.iter().position(|x| x == t).expect("partition member");
    let mut stages: Vec<Vec<Block>> = Vec::with_capacity(tree.num_stages);
    for (c, grouping) in tree.stage_groupings.iter().enumerate() {
        let stage = c + 1;
        let block_in = if c == 0 { fan_in } else { widths.stages[c - 1] };
        let mut blocks = Vec::with_capacity(grouping.groups.len());
        for g in &grouping.groups {
            let mut members: Vec<usize> = g.members.iter().map(index_of).collect();
            members.sort_unstable();
            let parent = if c == 0 {
                None
            } else {
                Some(
                    stages[c - 1]
                        .iter()
                        .position(|b: &Block| members.iter().all(|m| b.members.contains(m)))
                        .expect("refinement checked"),
                )
            };
            let mut rng = rng_for(seed, &block_key(stage, &members, tasks));
            blocks.push(Block {
                stage,
                layer: Dense::glorot(&mut rng, block_in, widths.stages[c]),
                members,
                parent,
            });
        }
        stages.push(blocks);
    }

    let last_width = widths.stages.last().copied().unwrap_or(fan_in);
    let heads = heads
        .iter()
        .enumerate()
        .map(|(task, spec)| {
            let block = stages
                .last()
                .and_then(|blocks| blocks.iter().position(|b| b.members.contains(&task)))
                .unwrap_or(0);
            let mut rng = rng_for(seed, &format!("head/{}", spec.task));
            Head {
                task,
                loss: spec.loss,
                block,
                layer: Dense::glorot(&mut rng, last_width, spec.outputs),
            }
        })
        .collect();

    Ok(BranchedNet {
        tree: tree.clone(),
        widths: widths.clone(),
        input_dim,
        trunk,
        stages,
        heads,
    })
}

impl BranchedNet {
    pub fn tasks(&self) -> &[TaskId] {
        &self.tree.tasks
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// All layers: trunk, stage blocks in order, then heads.
    pub fn layers(&self) -> Vec<&Dense> {
        self.trunk
            .iter()
            .chain(self.stages.iter().flatten().map(|b| &b.layer))
            .chain(self.heads.iter().map(|h| &h.layer))
            .collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Dense> {
        self.trunk
            .iter_mut()
            .chain(self.stages.iter_mut().flatten().map(|b| &mut b.layer))
            .chain(self.heads.iter_mut().map(|h| &mut h.layer))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// Every parameter, layer by layer, weights (row-major) before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Mutable reference to parameter `index` in [`Self::params_flat`] order.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for l in self.layers_mut() {
            let nw = l.weight.len();
            if index < nw {
                return l.weight.as_slice_mut().map(|s| &mut s[index]);
            }
            index -= nw;
            if index < l.bias.len() {
                return Some(&mut l.bias[index]);
            }
            index -= l.bias.len();
        }
        None
    }

    fn trunk_output<'a>(&self, cache: &'a ForwardCache) -> &'a Array2<f64> {
        cache.trunk.last().unwrap_or(&cache.input)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        let act = self.widths.activation;
        let mut trunk = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            let mut z = layer.forward(trunk.last().unwrap_or(x));
            act.apply(&mut z);
            trunk.push(z);
        }
        let trunk_out = trunk.last().unwrap_or(x);
        let mut blocks: Vec<Vec<Array2<f64>>> = Vec::with_capacity(self.stages.len());
        for stage_blocks in &self.stages {
            let outs = stage_blocks
                .iter()
                .map(|b| {
                    let input = match b.parent {
                        None => trunk_out,
                        Some(p) => &blocks.last().expect("previous stage")[p],
                    };
                    let mut z = b.layer.forward(input);
                    act.apply(&mut z);
                    z
                })
                .collect();
            blocks.push(outs);
        }
        let predictions = self
            .heads
            .iter()
            .map(|h| {
                let input = blocks.last().map(|s| &s[h.block]).unwrap_or(trunk_out);
                h.layer.forward(input)
            })
            .collect();
        Ok(ForwardCache {
            input: x.clone(),
            trunk,
            blocks,
            predictions,
        })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward(x)?.predictions)
    }

    /// Backpropagates per-task prediction gradients (`None` = no loss).
    pub fn backward(&self, cache: &ForwardCache, dpred: &[Option<Array2<f64>>]) -> (Gradients, Array2<f64>) {
        let act = self.widths.activation;
        let trunk_out = self.trunk_output(cache);
        let batch = cache.input.nrows();

        let mut head_grads = Vec::with_capacity(self.heads.len());
        let mut block_out_grad: Vec<Vec<Option<Array2<f64>>>> =
            self.stages.iter().map(|s| vec![None; s.len()]).collect();
        let mut trunk_out_grad: Option<Array2<f64>> = None;

        fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }

        for (h, d) in self.heads.iter().zip(dpred) {
            let input = cache.blocks.last().map(|s| &s[h.block]).unwrap_or(trunk_out);
            match d {
                Some(d) => {
                    head_grads.push((input.t().dot(d), d.sum_axis(Axis(0))));
                    let g = d.dot(&h.layer.weight.t());
                    match self.stages.len() {
                        0 => accumulate(&mut trunk_out_grad, g),
                        n => accumulate(&mut block_out_grad[n - 1][h.block], g),
                    }
                }
                None => head_grads.push((
                    Array2::zeros(h.layer.weight.raw_dim()),
                    Array1::zeros(h.layer.bias.len()),
                )),
            }
        }

        let mut stage_grads: Vec<Vec<(Array2<f64>, Array1<f64>)>> = vec![Vec::new(); self.stages.len()];
        for c in (0..self.stages.len()).rev() {
            let mut grads = Vec::with_capacity(self.stages[c].len());
            for (bi, b) in self.stages[c].iter().enumerate() {
                let Some(g_out) = block_out_grad[c][bi].take() else {
                    grads.push((
                        Array2::zeros(b.layer.weight.raw_dim()),
                        Array1::zeros(b.layer.bias.len()),
                    ));
                    continue;
                };
                let out = &cache.blocks[c][bi];
                let dz = g_out * act.derivative_from_output(out);
                let input = match b.parent {
                    None => trunk_out,
                    Some(p) => &cache.blocks[c - 1][p],
                };
                grads.push((input.t().dot(&dz), dz.sum_axis(Axis(0))));
                let g_in = dz.dot(&b.layer.weight.t());
                match b.parent {
                    None => accumulate(&mut trunk_out_grad, g_in),
                    Some(p) => accumulate(&mut block_out_grad[c - 1][p], g_in),
                }
            }
            stage_grads[c] = grads;
        }

        let mut trunk_grads = vec![None; self.trunk.len()];
        let mut g_out = trunk_out_grad.unwrap_or_else(|| Array2::zeros((batch, trunk_out.ncols())));
        for i in (0..self.trunk.len()).rev() {
            let layer = &self.trunk[i];
            let dz = &g_out * &act.derivative_from_output(&cache.trunk[i]);
            let input = if i == 0 { &cache.input } else { &cache.trunk[i - 1] };
            trunk_grads[i] = Some((input.t().dot(&dz), dz.sum_axis(Axis(0))));
            g_out = dz.dot(&layer.weight.t());
        }

        let layers = trunk_grads
            .into_iter()
            .map(|g| g.expect("every trunk layer visited"))
            .chain(stage_grads.into_iter().flatten())
            .chain(head_grads)
            .collect();
        (Gradients { layers }, g_out)
    }

    /// Weighted sum of task losses with gradients w.r.t. parameters and input.
    pub fn loss_and_grads(
        &self,
        x: &Array2<f64>,
        targets: &[TaskTarget],
        weights: &[f64],
    ) -> Result<LossGrad> {
        if targets.len() != self.heads.len() || weights.len() != self.heads.len() {
            return Err(Error::Shape(format!(
                "{} targets and {} weights for {} tasks",
                targets.len(),
                weights.len(),
                self.heads.len()
            )));
        }
        let cache = self.forward(x)?;
        let mut per_task = Vec::with_capacity(self.heads.len());
        let mut dpred = Vec::with_capacity(self.heads.len());
        let mut total = 0.0;
        for ((h, target), &w) in self.heads.iter().zip(targets).zip(weights) {
            let (loss, grad) = h.loss.evaluate(&cache.predictions[h.task], target)?;
            per_task.push(loss);
            if w != 0.0 {
                total += w * loss;
                dpred.push(Some(grad * w));
            } else {
                dpred.push(None);
            }
        }
        let (grads, input_grad) = self.backward(&cache, &dpred);
        Ok(LossGrad {
            total,
            per_task,
            grads,
            input_grad,
        })
    }

    /// Per-task losses without gradients.
    pub fn losses(&self, x: &Array2<f64>, targets: &[TaskTarget]) -> Result<Vec<f64>> {
        let preds = self.predict(x)?;
        self.heads
            .iter()
            .zip(targets)
            .map(|(h, t)| Ok(h.loss.evaluate(&preds[h.task], t)?.0))
            .collect()
    }

    /// Post-activation outputs at `stage` for every task, over all rows of
    /// `inputs`. Tasks sharing a block receive identical matrices.
    pub fn extract_activations(&self, inputs: &Array2<f64>, stage: usize) -> Result<ActivationBundle> {
        if stage > self.stages.len() {
            return Err(Error::Range(format!(
                "stage {stage} outside 0..={}",
                self.stages.len()
            )));
        }
        let cache = self.forward(inputs)?;
        let matrices = (0..self.tasks().len())
            .map(|t| {
                let values = if stage == 0 {
                    self.trunk_output(&cache).clone()
                } else {
                    let bi = self.stages[stage - 1]
                        .iter()
                        .position(|b| b.members.contains(&t))
                        .expect("every task has a block");
                    cache.blocks[stage - 1][bi].clone()
                };
                ActivationMatrix::new(self.tasks()[t].clone(), StageId(stage), values)
            })
            .collect::<Result<Vec<_>>>()?;
        make_bundle(StageId(stage), matrices)
    }
}
