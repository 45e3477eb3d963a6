//! End-to-end progressive fusion on a synthetic task set.
//!
//! Trains the fully separate network, then for each candidate stage dumps
//! activations, advances a [`PdfSession`], and rebuilds and retrains the
//! network whenever that stage fused tasks. The session and dump files use
//! the same layout as the external protocol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{gen_synthetic, Dataset, SyntheticTaskSpec};
use super::net::{build_net, BranchedNet, NetWidths};
use super::train::{train, TrainConfig};
use crate::activations::npy::write_npy_file;
use crate::activations::{
    load_activation_matrix, make_bundle, ActivationBundle, ActivationFormat, PoolMode, StageId, TaskId,
};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::fusion::{init_session, load_session, FusionTree, PdfSession, StageRecord};
use crate::grouping::GroupingConfig;
use crate::similarity::{pairwise_similarity, SimilarityMethod};

/// Largest task count run end to end.
pub const MAX_TOY_TASKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdfOptions {
    pub num_stages: usize,
    pub widths: NetWidths,
    pub grouping: GroupingConfig,
    pub method: SimilarityMethod,
    pub train: TrainConfig,
    /// Seeds data, initialization and shuffling; overrides `train.seed`.
    pub seed: u64,
    /// Samples used for activation dumps; 0 uses the whole dataset.
    pub probe_samples: usize,
    /// Save the session and reload it from JSON between stages.
    pub reload_each_stage: bool,
}

impl Default for PdfOptions {
    fn default() -> Self {
        PdfOptions {
            num_stages: 2,
            widths: NetWidths {
                trunk: vec![],
                stages: vec![12, 12],
                activation: super::net::Activation::Tanh,
            },
            grouping: GroupingConfig::default(),
            method: SimilarityMethod::CkaUnbiased,
            train: TrainConfig::default(),
            seed: 0,
            probe_samples: 0,
            reload_each_stage: false,
        }
    }
}

/// Synthetic data plus run options, as read from a toy spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRunSpec {
    pub data: SyntheticTaskSpec,
    #[serde(default)]
    pub options: PdfOptions,
}

impl ToyRunSpec {
    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }
}

/// Five regression tasks: two related pairs and one unrelated task.
pub fn paired_tasks_spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec::regression(24, 5, 512, &[&[0, 1], &[0, 1], &[2, 3], &[2, 3], &[4]])
}

/// Mean within-group similarity at the stage after a fusion, measured in
/// the network before the fusion and after retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRecord {
    pub fused_stage: usize,
    pub measured_stage: usize,
    pub group: Vec<TaskId>,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRound {
    /// Stage whose fusion triggered the round; 0 for the separate network.
    pub after_stage: usize,
    pub tree: Vec<Vec<Vec<String>>>,
    pub param_count: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfReport {
    pub seed: u64,
    pub tasks: Vec<TaskId>,
    pub final_tree: FusionTree,
    pub stages: Vec<StageRecord>,
    pub rounds: Vec<TrainingRound>,
    pub training_rounds: usize,
    pub trend: Vec<TrendRecord>,
    /// Per-task loss of the final network on the full dataset.
    pub final_losses: Vec<f64>,
}

impl PdfReport {
    /// Stage-1 similarity matrix of the separate network.
    pub fn separate_stage1(&self) -> Option<&crate::similarity::SimilarityMatrix> {
        self.stages.first().and_then(|s| s.matrices.first())
    }
}

/// A trained toy network with what is needed to regenerate its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub data: SyntheticTaskSpec,
    pub seed: u64,
    pub net: BranchedNet,
}

impl SavedModel {
    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        gen_synthetic(&self.data, self.seed)
    }
}

/// Result of a toy run: the report and the final trained network.
pub struct PdfOutcome {
    pub report: PdfReport,
    pub session: PdfSession,
    pub net: BranchedNet,
}

fn mean_within(
    net: &BranchedNet,
    probe: &Dataset,
    stage: usize,
    group: &[TaskId],
    method: SimilarityMethod,
) -> Result<f64> {
    let bundle = net.extract_activations(&probe.inputs, stage)?.subset(group)?;
    let s = pairwise_similarity(&bundle, method)?;
    let t = group.len();
    let mut sum = 0.0;
    for i in 0..t {
        for j in i + 1..t {
            sum += s.values()[[i, j]];
        }
    }
    Ok(sum / (t * (t - 1) / 2) as f64)
}

fn write_dumps(dir: &Path, session: &PdfSession, bundle: &ActivationBundle) -> Result<()> {
    for entry in &session.manifest {
        let m = bundle
            .get(&entry.task)
            .ok_or_else(|| Error::Protocol(format!("no activations for {}", entry.task)))?;
        let values = m.values();
        let data: Vec<f64> = values.iter().copied().collect();
        write_npy_file(&dir.join(entry.file_name()), &[m.n(), m.d()], &data)?;
    }
    Ok(())
}

/// Reads the dumps a session's manifest asks for, one bundle per parent.
pub fn read_dumps(dir: &Path, session: &PdfSession, pool: PoolMode) -> Result<Vec<ActivationBundle>> {
    let stage = StageId(session.current_stage);
    session
        .parent_groups()
        .iter()
        .map(|parent| {
            let matrices = parent
                .iter()
                .map(|task| {
                    let entry = crate::fusion::ManifestEntry {
                        task: task.clone(),
                        stage,
                    };
                    load_activation_matrix(
                        &dir.join(entry.file_name()),
                        ActivationFormat::Npy,
                        task.clone(),
                        stage,
                        pool,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            make_bundle(stage, matrices)
        })
        .collect()
}

fn reload(session: &PdfSession, workdir: Option<&Path>) -> Result<PdfSession> {
    match workdir {
        Some(dir) => {
            let path = dir.join("session.json");
            session.save(&path)?;
            load_session(&path)
        }
        None => {
            let text = serde_json::to_string(session).map_err(|e| Error::Parse(e.to_string()))?;
            let back: PdfSession = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            back.validate()?;
            Ok(back)
        }
    }
}

/// Runs the progressive loop. With a `workdir`, activation dumps and the
/// session are written there at every stage and the dumps are read back
/// through the external loader.
pub fn run_pdf(spec: &SyntheticTaskSpec, opts: &PdfOptions, workdir: Option<&Path>) -> Result<PdfOutcome> {
    if spec.tasks.len() > MAX_TOY_TASKS {
        return Err(Error::Spec(format!(
            "toy runs support at most {MAX_TOY_TASKS} tasks, got {}",
            spec.tasks.len()
        )));
    }
    let seed = opts.seed;
    let data = gen_synthetic(spec, seed)?;
    let probe = if opts.probe_samples == 0 {
        data.clone()
    } else {
        data.head(opts.probe_samples)
    };
    let train_cfg = TrainConfig {
        seed,
        ..opts.train.clone()
    };
    let heads = spec.heads();
    let tasks = spec.task_ids();
    if let Some(dir) = workdir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut session = init_session(&tasks, opts.num_stages, opts.grouping, opts.method)?;
    let mut net = build_net(&session.tree, spec.input_dim, &opts.widths, &heads, seed)?;
    let record =
        train(&mut net, &data, &train_cfg).map_err(|e| e.context("training the separate network"))?;
    let mut rounds = vec![TrainingRound {
        after_stage: 0,
        tree: session.tree.canonical(),
        param_count: net.param_count(),
        epoch_losses: record.epoch_losses,
    }];
    let mut trend = Vec::new();

    while !session.is_complete() {
        let c = session.current_stage;
        let all = net.extract_activations(&probe.inputs, c)?;
        let bundles = match workdir {
            Some(dir) => {
                session.save(&dir.join("session.json"))?;
                write_dumps(dir, &session, &all)?;
                read_dumps(dir, &session, PoolMode::SpatialMean)?
            }
            None => session
                .parent_groups()
                .iter()
                .map(|p| all.subset(p))
                .collect::<Result<Vec<_>>>()?,
        };
        let next = session.progressive_step(&bundles)?;
        let fused: Vec<Vec<TaskId>> = next
            .tree
            .groups_at(c)?
            .into_iter()
            .filter(|g| g.len() >= 2)
            .collect();
        if !fused.is_empty() {
            let before: Vec<f64> = if c < opts.num_stages {
                fused
                    .iter()
                    .map(|g| mean_within(&net, &probe, c + 1, g, opts.method))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            net = build_net(&next.tree, spec.input_dim, &opts.widths, &heads, seed)?;
            let record = train(&mut net, &data, &train_cfg)
                .map_err(|e| e.context(format!("retraining after stage {c}")))?;
            rounds.push(TrainingRound {
                after_stage: c,
                tree: next.tree.canonical(),
                param_count: net.param_count(),
                epoch_losses: record.epoch_losses,
            });
            for (g, before) in fused.iter().zip(before) {
                trend.push(TrendRecord {
                    fused_stage: c,
                    measured_stage: c + 1,
                    group: g.clone(),
                    before,
                    after: mean_within(&net, &probe, c + 1, g, opts.method)?,
                });
            }
        }
        session = if opts.reload_each_stage {
            reload(&next, workdir)?
        } else {
            next
        };
    }
    if let Some(dir) = workdir {
        session.save(&dir.join("session.json"))?;
    }

    let final_losses = net.losses(&data.inputs, &data.targets)?;
    let report = PdfReport {
        seed,
        tasks,
        final_tree: session.tree.clone(),
        stages: session.history.clone(),
        training_rounds: rounds.len(),
        rounds,
        trend,
        final_losses,
    };
    if let Some(dir) = workdir {
        fsutil::write_json_atomic(&dir.join("report.json"), &report)?;
        fsutil::write_json_atomic(&dir.join("final_tree.json"), &report.final_tree)?;
        let model = SavedModel {
            data: spec.clone(),
            seed,
            net: net.clone(),
        };
        fsutil::write_json_atomic(&dir.join("model.json"), &model)?;
    }
    Ok(PdfOutcome { report, session, net })
}
