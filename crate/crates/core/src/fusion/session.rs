//! Resumable state of the progressive fuse-and-retrain loop.
//!
//! A session waits at each stage for activation dumps of every task whose
//! parent group still holds two or more tasks. Feeding those dumps groups
//! each parent, fixes the stage, and either asks for the next stage's dumps
//! or completes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{refine_check, FusionTree};
use crate::activations::{ActivationBundle, StageId, TaskId};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::grouping::{select_grouping, Group, Grouping, GroupingConfig};
use crate::similarity::{pairwise_similarity, SimilarityMatrix, SimilarityMethod};

pub const SESSION_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingActivations,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task: TaskId,
    pub stage: StageId,
}

impl ManifestEntry {
    /// Expected dump name, `<task>_stage<k>.npy`.
    pub fn file_name(&self) -> String {
        format!("{}_stage{}.npy", self.task, self.stage)
    }
}

/// Similarities measured and grouping chosen at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageId,
    /// One matrix per parent group that was regrouped.
    pub matrices: Vec<SimilarityMatrix>,
    pub grouping: Grouping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfSession {
    pub version: String,
    #[serde(flatten)]
    pub tree: FusionTree,
    pub current_stage: usize,
    pub status: SessionStatus,
    pub manifest: Vec<ManifestEntry>,
    pub config: GroupingConfig,
    pub method: SimilarityMethod,
    pub history: Vec<StageRecord>,
}

/// Starts with fully separate decoders, waiting for stage 1 dumps.
pub fn init_session(
    tasks: &[TaskId],
    num_stages: usize,
    config: GroupingConfig,
    method: SimilarityMethod,
) -> Result<PdfSession> {
    if tasks.len() < 2 {
        return Err(Error::Size(format!(
            "progressive fusion needs at least 2 tasks, got {}",
            tasks.len()
        )));
    }
    if num_stages == 0 {
        return Err(Error::Size("at least one candidate stage is required".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].contains(t) {
            return Err(Error::Identity(format!("task {t} listed twice")));
        }
    }
    config.validate()?;
    let tree = FusionTree::separate(tasks, num_stages, &config);
    let manifest = tasks
        .iter()
        .map(|t| ManifestEntry {
            task: t.clone(),
            stage: StageId(1),
        })
        .collect();
    Ok(PdfSession {
        version: SESSION_VERSION.to_string(),
        tree,
        current_stage: 1,
        status: SessionStatus::AwaitingActivations,
        manifest,
        config,
        method,
        history: Vec::new(),
    })
}

impl PdfSession {
    pub fn tasks(&self) -> &[TaskId] {
        &self.tree.tasks
    }

    pub fn is_complete(&self) -> bool {
        self.status == SessionStatus::Complete
    }

    /// Groups at the previous stage that still hold two or more tasks.
    pub fn parent_groups(&self) -> Vec<Vec<TaskId>> {
        if self.is_complete() {
            return Vec::new();
        }
        self.tree
            .groups_at(self.current_stage - 1)
            .expect("current stage within tree")
            .into_iter()
            .filter(|g| g.len() >= 2)
            .collect()
    }

    /// Advances one stage from activation bundles, one per multi-task parent.
    pub fn progressive_step(&self, bundles: &[ActivationBundle]) -> Result<PdfSession> {
        self.expect_awaiting()?;
        let stage = StageId(self.current_stage);
        if let Some(b) = bundles.iter().find(|b| b.stage() != stage) {
            return Err(Error::Protocol(format!(
                "bundle for stage {} given while the session waits for stage {stage}",
                b.stage()
            )));
        }
        let tasks: Vec<Vec<TaskId>> = bundles.iter().map(ActivationBundle::tasks).collect();
        self.check_cover(&tasks)?;
        let matrices = bundles
            .iter()
            .map(|b| pairwise_similarity(b, self.method))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.context(format!("stage {stage}")))?;
        self.step_with_matrices(&matrices)
    }

    /// Advances one stage from precomputed matrices, one per multi-task parent.
    pub fn step_with_matrices(&self, matrices: &[SimilarityMatrix]) -> Result<PdfSession> {
        self.expect_awaiting()?;
        let c = self.current_stage;
        let stage = StageId(c);
        if let Some(m) = matrices.iter().find(|m| m.stage() != stage) {
            return Err(Error::Protocol(format!(
                "matrix for stage {} given while the session waits for stage {stage}",
                m.stage()
            )));
        }
        let tasks: Vec<Vec<TaskId>> = matrices.iter().map(|m| m.tasks().to_vec()).collect();
        self.check_cover(&tasks)?;

        let mut groups = Vec::new();
        let mut used = Vec::new();
        for parent in self.tree.groups_at(c - 1)? {
            if parent.len() == 1 {
                groups.push(Group::singleton(parent[0].clone()));
                continue;
            }
            let matrix = matrices
                .iter()
                .find(|m| same_members(m.tasks(), &parent))
                .expect("coverage checked");
            let ordered = matrix.restrict(&parent)?;
            groups.extend(select_grouping(&ordered, &self.config)?.groups);
            used.push(ordered);
        }
        let grouping = Grouping::from_groups(stage, &self.config, groups);

        let mut next = self.clone();
        next.tree.stage_groupings[c - 1] = grouping.clone();
        next.history.push(StageRecord {
            stage,
            matrices: used,
            grouping: grouping.clone(),
        });
        if c == self.tree.num_stages || grouping.all_singletons() {
            next.status = SessionStatus::Complete;
            next.manifest.clear();
        } else {
            next.current_stage = c + 1;
            next.manifest = grouping
                .groups
                .iter()
                .filter(|g| g.len() >= 2)
                .flat_map(|g| g.members.iter().cloned())
                .map(|task| ManifestEntry {
                    task,
                    stage: StageId(c + 1),
                })
                .collect();
        }
        debug_assert!(refine_check(&next.tree));
        Ok(next)
    }

    fn expect_awaiting(&self) -> Result<()> {
        if self.status != SessionStatus::AwaitingActivations {
            return Err(Error::Protocol("session is already complete".into()));
        }
        Ok(())
    }

    /// Each input must cover exactly one multi-task parent, and every parent
    /// must be covered.
    fn check_cover(&self, inputs: &[Vec<TaskId>]) -> Result<()> {
        let parents = self.parent_groups();
        for input in inputs {
            if !parents.iter().any(|p| same_members(input, p)) {
                let names: Vec<&str> = input.iter().map(TaskId::as_str).collect();
                return Err(Error::Protocol(format!(
                    "input over tasks [{}] does not match any stage {} parent group",
                    names.join(","),
                    self.current_stage
                )));
            }
        }
        for parent in &parents {
            let hits = inputs.iter().filter(|i| same_members(i, parent)).count();
            if hits != 1 {
                let names: Vec<&str> = parent.iter().map(TaskId::as_str).collect();
                return Err(Error::Protocol(format!(
                    "parent group [{}] covered {hits} times, expected once",
                    names.join(",")
                )));
            }
        }
        Ok(())
    }

    /// Manifest as written for external trainers.
    pub fn manifest_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.manifest
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "task": e.task,
                        "stage": e.stage,
                        "file": e.file_name(),
                    })
                })
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json_atomic(path, self)
    }

    /// Checks the invariants a well-formed session file must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.version != SESSION_VERSION {
            return Err(Error::Version {
                expected: SESSION_VERSION.into(),
                found: self.version.clone(),
            });
        }
        if !refine_check(&self.tree) {
            return Err(Error::Protocol("session tree violates refinement".into()));
        }
        if self.current_stage == 0 || self.current_stage > self.tree.num_stages {
            return Err(Error::Protocol(format!(
                "current stage {} outside 1..={}",
                self.current_stage, self.tree.num_stages
            )));
        }
        let awaiting = self.status == SessionStatus::AwaitingActivations;
        if awaiting == self.manifest.is_empty() {
            return Err(Error::Protocol(
                "manifest must be non-empty exactly while awaiting activations".into(),
            ));
        }
        let completed = if awaiting {
            self.current_stage - 1
        } else {
            self.current_stage
        };
        if self.history.len() != completed {
            return Err(Error::Protocol(format!(
                "history holds {} stages, expected {completed}",
                self.history.len()
            )));
        }
        Ok(())
    }
}

fn same_members(a: &[TaskId], b: &[TaskId]) -> bool {
    a.len() == b.len() && a.iter().all(|t| b.contains(t))
}

/// Reads a session written by [`PdfSession::save`].
pub fn load_session(path: &Path) -> Result<PdfSession> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let found = raw.get("version").and_then(|v| v.as_str()).unwrap_or("");
    if found != SESSION_VERSION {
        return Err(Error::Version {
            expected: SESSION_VERSION.into(),
            found: found.into(),
        });
    }
    let session: PdfSession =
        serde_json::from_value(raw).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    session.validate()?;
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::task_ids;
    use ndarray::Array2;

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

    fn session(tasks: &[&str], stages: usize) -> PdfSession {
        init_session(
            &task_ids(tasks),
            stages,
            GroupingConfig::default(),
            SimilarityMethod::CkaUnbiased,
        )
        .unwrap()
    }

    #[test]
    fn init_manifests() {
        let s = session(&TASKS, 5);
        assert_eq!(s.manifest.len(), 5);
        assert!(s.manifest.iter().all(|e| e.stage == StageId(1)));
        assert_eq!(s.manifest[0].file_name(), "S_stage1.npy");
        assert_eq!(session(&["a", "b"], 1).manifest.len(), 2);
        assert!(matches!(
            init_session(
                &task_ids(&["a"]),
                3,
                GroupingConfig::default(),
                SimilarityMethod::CkaUnbiased
            ),
            Err(Error::Size(_))
        ));
        s.validate().unwrap();
    }

    #[test]
    fn worked_step_skips_singleton() {
        let s = session(&TASKS, 5);
        let m = matrix(1, &TASKS, &[("S", "E", 0.86), ("D", "N", 0.76)], 0.3);
        let s = s.step_with_matrices(&[m]).unwrap();
        assert_eq!(s.tree.stage_groupings[0].to_string(), "[S,E] [D,N] [A]");
        assert_eq!(s.current_stage, 2);
        let names: Vec<&str> = s.manifest.iter().map(|e| e.task.as_str()).collect();
        assert_eq!(names, vec!["S", "E", "D", "N"]);
        assert_eq!(s.parent_groups().len(), 2);
        s.validate().unwrap();
    }

    #[test]
    fn weak_pair_completes_immediately() {
        let s = session(&["a", "b"], 3);
        let s = s
            .step_with_matrices(&[matrix(1, &["a", "b"], &[("a", "b", 0.2)], 0.0)])
            .unwrap();
        assert!(s.is_complete());
        assert!(s.manifest.is_empty());
        assert_eq!(s.history.len(), 1);
        assert!(s.tree.stage_groupings.iter().all(Grouping::all_singletons));
        assert!(matches!(s.step_with_matrices(&[]), Err(Error::Protocol(_))));
        s.validate().unwrap();
    }

    #[test]
    fn completes_at_last_stage() {
        let mut s = session(&["a", "b"], 2);
        for c in 1..=2 {
            s = s
                .step_with_matrices(&[matrix(c, &["a", "b"], &[("a", "b", 0.9)], 0.0)])
                .unwrap();
        }
        assert!(s.is_complete());
        assert_eq!(s.current_stage, 2);
        assert_eq!(s.history.len(), 2);
        s.validate().unwrap();
    }

    #[test]
    fn mismatched_inputs_are_protocol_errors() {
        let s = session(&TASKS, 2);
        let partial = matrix(1, &["S", "D"], &[], 0.5);
        assert!(matches!(
            s.step_with_matrices(&[partial]),
            Err(Error::Protocol(_))
        ));
        let wrong_stage = matrix(2, &TASKS, &[], 0.5);
        assert!(matches!(
            s.step_with_matrices(&[wrong_stage]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(s.step_with_matrices(&[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("session.json");
        let s = session(&TASKS, 4)
            .step_with_matrices(&[matrix(1, &TASKS, &[("S", "E", 0.86), ("D", "N", 0.76)], 0.3)])
            .unwrap();
        s.save(&path).unwrap();
        assert_eq!(load_session(&path).unwrap(), s);

        let text = std::fs::read_to_string(&path).unwrap();
        let json: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in [
            "version",
            "tasks",
            "num_stages",
            "current_stage",
            "status",
            "manifest",
            "stage_groupings",
            "history",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["status"], "awaiting_activations");

        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_session(&path), Err(Error::Parse(_))));

        std::fs::write(&path, text.replace("\"version\": \"1\"", "\"version\": \"0\"")).unwrap();
        assert!(matches!(load_session(&path), Err(Error::Version { .. })));
    }
}
