//! Branching architectures as per-stage groupings, and the planners that
//! produce them.
//!
//! Stage 0 is the shared encoder and always holds one group of every task.
//! Each later stage must refine the one before it: a decoder block can only
//! split off from its parent block, never re-merge with a sibling branch.

mod session;

pub use session::{
    init_session, load_session, ManifestEntry, PdfSession, SessionStatus, StageRecord, SESSION_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::activations::{ActivationBundle, StageId, TaskId};
use crate::error::{Error, Result};
use crate::grouping::{select_grouping, Group, Grouping, GroupingConfig};
use crate::similarity::{pairwise_similarity, SimilarityMatrix, SimilarityMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Regroup at each stage from a network retrained with the earlier fusions.
    #[default]
    Progressive,
    /// Group every stage from the fully separate network's similarities.
    Offline,
}

impl std::fmt::Display for PlanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanMode::Progressive => "progressive",
            PlanMode::Offline => "offline",
        })
    }
}

/// Groupings for decoder stages `1..=num_stages`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTree {
    pub tasks: Vec<TaskId>,
    pub num_stages: usize,
    pub stage_groupings: Vec<Grouping>,
}

impl FusionTree {
    /// Every task keeps its own decoder at every stage.
    pub fn separate(tasks: &[TaskId], num_stages: usize, cfg: &GroupingConfig) -> Self {
        FusionTree {
            tasks: tasks.to_vec(),
            num_stages,
            stage_groupings: (1..=num_stages)
                .map(|c| Grouping::singletons(StageId(c), cfg, tasks))
                .collect(),
        }
    }

    /// One decoder shared by all tasks.
    pub fn shared(tasks: &[TaskId], num_stages: usize, cfg: &GroupingConfig) -> Self {
        FusionTree {
            tasks: tasks.to_vec(),
            num_stages,
            stage_groupings: (1..=num_stages)
                .map(|c| {
                    Grouping::from_groups(
                        StageId(c),
                        cfg,
                        vec![Group {
                            members: tasks.to_vec(),
                            value: 0.0,
                        }],
                    )
                })
                .collect(),
        }
    }

    /// Builds a tree from member lists per stage; group values are zero.
    pub fn from_member_lists(tasks: &[TaskId], stages: Vec<Vec<Vec<TaskId>>>, cfg: &GroupingConfig) -> Self {
        FusionTree {
            tasks: tasks.to_vec(),
            num_stages: stages.len(),
            stage_groupings: stages
                .into_iter()
                .enumerate()
                .map(|(i, groups)| {
                    Grouping::from_groups(
                        StageId(i + 1),
                        cfg,
                        groups
                            .into_iter()
                            .map(|members| Group { members, value: 0.0 })
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    /// Member lists at `stage`; stage 0 is the single encoder group.
    pub fn groups_at(&self, stage: usize) -> Result<Vec<Vec<TaskId>>> {
        if stage == 0 {
            return Ok(vec![self.tasks.clone()]);
        }
        self.stage_groupings
            .get(stage - 1)
            .map(|g| g.groups.iter().map(|g| g.members.clone()).collect())
            .ok_or_else(|| Error::Range(format!("stage {stage} outside 0..={}", self.num_stages)))
    }

    pub fn group_count(&self, stage: usize) -> Result<usize> {
        Ok(self.groups_at(stage)?.len())
    }

    /// Canonical member lists per stage, for structural comparison.
    pub fn canonical(&self) -> Vec<Vec<Vec<String>>> {
        self.stage_groupings.iter().map(Grouping::canonical).collect()
    }

    pub fn pretty(&self) -> String {
        self.stage_groupings
            .iter()
            .enumerate()
            .map(|(i, g)| format!("stage {}: {g}\n", i + 1))
            .collect()
    }
}

/// True iff every stage partitions the task set and every group at stage
/// `c` lies inside one group at stage `c - 1`.
pub fn refine_check(tree: &FusionTree) -> bool {
    if tree.stage_groupings.len() != tree.num_stages || tree.num_stages == 0 {
        return false;
    }
    let mut parents: Vec<Vec<TaskId>> = vec![tree.tasks.clone()];
    for grouping in &tree.stage_groupings {
        if !grouping.is_partition_of(&tree.tasks) || grouping.groups.iter().any(Group::is_empty) {
            return false;
        }
        for g in &grouping.groups {
            let holders = parents
                .iter()
                .filter(|p| g.members.iter().all(|m| p.contains(m)))
                .count();
            if holders != 1 {
                return false;
            }
        }
        parents = grouping.groups.iter().map(|g| g.members.clone()).collect();
    }
    true
}

/// Plans every stage from fixed per-stage matrices, refining stage by stage.
///
/// `matrices[c - 1]` must cover all tasks at stage `c`.
pub fn plan_from_matrices(
    tasks: &[TaskId],
    matrices: &[SimilarityMatrix],
    cfg: &GroupingConfig,
) -> Result<FusionTree> {
    cfg.validate()?;
    if matrices.is_empty() {
        return Err(Error::Protocol("no stage matrices given".into()));
    }
    for (i, m) in matrices.iter().enumerate() {
        if m.stage() != StageId(i + 1) {
            return Err(Error::Protocol(format!(
                "matrix {} is for stage {}, expected stage {}",
                i + 1,
                m.stage(),
                i + 1
            )));
        }
        if let Some(t) = tasks.iter().find(|t| m.index_of(t).is_none()) {
            return Err(Error::Protocol(format!(
                "stage {} matrix does not cover task {t}",
                i + 1
            )));
        }
    }

    let mut parents = vec![tasks.to_vec()];
    let mut stage_groupings = Vec::with_capacity(matrices.len());
    for (i, matrix) in matrices.iter().enumerate() {
        let stage = StageId(i + 1);
        let mut groups = Vec::new();
        for parent in &parents {
            if parent.len() == 1 {
                groups.push(Group::singleton(parent[0].clone()));
                continue;
            }
            let sub = matrix.restrict(parent)?;
            groups.extend(select_grouping(&sub, cfg)?.groups);
        }
        let grouping = Grouping::from_groups(stage, cfg, groups);
        parents = grouping.groups.iter().map(|g| g.members.clone()).collect();
        stage_groupings.push(grouping);
    }
    Ok(FusionTree {
        tasks: tasks.to_vec(),
        num_stages: matrices.len(),
        stage_groupings,
    })
}

/// Offline baseline: group all stages from the separate network's activations.
pub fn offline_plan(
    bundles: &[ActivationBundle],
    num_stages: usize,
    method: SimilarityMethod,
    cfg: &GroupingConfig,
) -> Result<FusionTree> {
    if num_stages == 0 {
        return Err(Error::Size("at least one candidate stage is required".into()));
    }
    let mut matrices = Vec::with_capacity(num_stages);
    for c in 1..=num_stages {
        let bundle = bundles
            .iter()
            .find(|b| b.stage() == StageId(c))
            .ok_or_else(|| Error::Protocol(format!("missing activation bundle for stage {c}")))?;
        matrices.push(pairwise_similarity(bundle, method)?);
    }
    let tasks = bundles
        .iter()
        .find(|b| b.stage() == StageId(1))
        .map(ActivationBundle::tasks)
        .expect("stage 1 bundle checked above");
    for b in bundles {
        if b.tasks().len() != tasks.len() || tasks.iter().any(|t| b.get(t).is_none()) {
            return Err(Error::Protocol(format!(
                "stage {} bundle does not cover the same tasks as stage 1",
                b.stage()
            )));
        }
    }
    plan_from_matrices(&tasks, &matrices, cfg)
}

/// One row of a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub mode: PlanMode,
    pub tree: FusionTree,
}

/// Thresholds `start, start + step, ...` up to `end` inclusive (with a
/// small tolerance for accumulated rounding).
pub fn threshold_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 || !start.is_finite() || !end.is_finite() || end < start {
        return Err(Error::Range(format!(
            "bad threshold grid {start}..{end} step {step}"
        )));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| {
            let v = start + i as f64 * step;
            // keep printed values tidy (0.30000000000000004 -> 0.3)
            (v * 1e9).round() / 1e9
        })
        .collect())
}

/// Plans the tree for every threshold from fixed per-stage matrices.
///
/// Progressive rows are produced by stepping a session with each parent
/// group's sub-matrix; offline rows come from [`plan_from_matrices`].
pub fn threshold_sweep(
    tasks: &[TaskId],
    matrices: &[SimilarityMatrix],
    thresholds: &[f64],
    base: &GroupingConfig,
    mode: PlanMode,
) -> Result<Vec<SweepRow>> {
    thresholds
        .iter()
        .map(|&threshold| {
            let cfg = GroupingConfig { threshold, ..*base };
            let tree = match mode {
                PlanMode::Offline => plan_from_matrices(tasks, matrices, &cfg)?,
                PlanMode::Progressive => {
                    let method = matrices.first().map(SimilarityMatrix::method).unwrap_or_default();
                    let mut s = init_session(tasks, matrices.len(), cfg, method)?;
                    while s.status == SessionStatus::AwaitingActivations {
                        let matrix = &matrices[s.current_stage - 1];
                        let subs = s
                            .parent_groups()
                            .iter()
                            .map(|p| matrix.restrict(p))
                            .collect::<Result<Vec<_>>>()?;
                        s = s.step_with_matrices(&subs)?;
                    }
                    s.tree
                }
            };
            Ok(SweepRow {
                threshold,
                mode,
                tree,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::task_ids;
    use ndarray::Array2;

    fn cfg() -> GroupingConfig {
        GroupingConfig::default()
    }

    fn tree(tasks: &[&str], stages: &[&[&[&str]]]) -> FusionTree {
        FusionTree::from_member_lists(
            &task_ids(tasks),
            stages
                .iter()
                .map(|s| s.iter().map(|g| task_ids(g)).collect())
                .collect(),
            &cfg(),
        )
    }

    fn matrix(stage: usize, names: &[&str], pairs: &[(&str, &str, f64)], fill: f64) -> SimilarityMatrix {
        let t = names.len();
        let mut v = Array2::from_elem((t, t), fill);
        for i in 0..t {
            v[[i, i]] = 1.0;
        }
        for &(a, b, x) in pairs {
            let i = names.iter().position(|n| *n == a).unwrap();
            let j = names.iter().position(|n| *n == b).unwrap();
            v[[i, j]] = x;
            v[[j, i]] = x;
        }
        SimilarityMatrix::new(StageId(stage), SimilarityMethod::CkaUnbiased, task_ids(names), v).unwrap()
    }

    const TASKS: [&str; 5] = ["S", "D", "E", "N", "A"];

    #[test]
    fn refine_check_examples() {
        let worked: &[&[&str]] = &[&["S", "E"], &["D", "N"], &["A"]];
        assert!(refine_check(&tree(&TASKS, &[worked; 5])));
        assert!(!refine_check(&tree(
            &["a", "b", "c"],
            &[&[&["a", "b"], &["c"]], &[&["a", "c"], &["b"]]]
        )));
        assert!(refine_check(&FusionTree::separate(&task_ids(&TASKS), 3, &cfg())));
        assert!(refine_check(&FusionTree::shared(&task_ids(&TASKS), 3, &cfg())));
        // missing task at a stage
        assert!(!refine_check(&tree(&["a", "b"], &[&[&["a"]]])));
    }

    #[test]
    fn offline_pattern_pairs_then_splits() {
        let mut mats = Vec::new();
        for c in 1..=5 {
            let se = if c <= 3 { 0.8 } else { 0.4 };
            let dn = if c <= 3 { 0.7 } else { 0.3 };
            mats.push(matrix(c, &TASKS, &[("S", "E", se), ("D", "N", dn)], 0.1));
        }
        let t = plan_from_matrices(&task_ids(&TASKS), &mats, &cfg()).unwrap();
        assert!(refine_check(&t));
        for c in 0..3 {
            assert_eq!(t.stage_groupings[c].to_string(), "[S,E] [D,N] [A]");
        }
        for c in 3..5 {
            assert!(t.stage_groupings[c].all_singletons());
        }
    }

    #[test]
    fn identical_matrices_give_same_grouping_everywhere() {
        let mats: Vec<_> = (1..=4)
            .map(|c| matrix(c, &TASKS, &[("S", "E", 0.86), ("D", "N", 0.76)], 0.3))
            .collect();
        let t = plan_from_matrices(&task_ids(&TASKS), &mats, &cfg()).unwrap();
        let first = t.stage_groupings[0].canonical();
        assert!(t.stage_groupings.iter().all(|g| g.canonical() == first));
    }

    #[test]
    fn missing_stage_matrix_is_protocol_error() {
        let mats = vec![matrix(2, &TASKS, &[], 0.0)];
        assert!(matches!(
            plan_from_matrices(&task_ids(&TASKS), &mats, &cfg()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn threshold_grid_steps() {
        assert_eq!(threshold_grid(0.0, 1.0, 0.5).unwrap(), vec![0.0, 0.5, 1.0]);
        let g = threshold_grid(0.0, 1.0, 0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 0.3);
        assert!(threshold_grid(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn sweep_modes_agree_on_fixed_matrices() {
        let mats: Vec<_> = (1..=3)
            .map(|c| {
                matrix(
                    c,
                    &TASKS,
                    &[
                        ("S", "E", 0.9 - 0.1 * c as f64),
                        ("D", "N", 0.75 - 0.2 * c as f64),
                    ],
                    0.05,
                )
            })
            .collect();
        let grid = threshold_grid(0.0, 1.0, 0.1).unwrap();
        let tasks = task_ids(&TASKS);
        let a = threshold_sweep(&tasks, &mats, &grid, &cfg(), PlanMode::Offline).unwrap();
        let b = threshold_sweep(&tasks, &mats, &grid, &cfg(), PlanMode::Progressive).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tree.canonical(), y.tree.canonical(), "tau={}", x.threshold);
        }
        assert!(a
            .last()
            .unwrap()
            .tree
            .stage_groupings
            .iter()
            .all(Grouping::all_singletons));
    }
}
