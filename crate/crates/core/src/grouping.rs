//! Exhaustive task grouping over set partitions.
//!
//! Every partition of the task set is scored from a similarity matrix and
//! the best one is kept. A task's value is its mean similarity to the other
//! members of its group (zero when alone), a group's value is the mean of
//! its members' values, and a grouping is scored either by the mean over
//! groups or the mean over tasks. Multi-task groups scoring below the
//! threshold are dissolved into singletons afterwards.

use std::cmp::Ordering;
use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::activations::{StageId, TaskId};
use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;

/// Largest task count accepted for exhaustive enumeration (Bell(12) = 4,213,597).
pub const MAX_ENUMERATION_TASKS: usize = 12;

/// Restricted growth strings of length `n` in lexicographic order.
///
/// Each item labels element `i` with the index of its block; block indices
/// appear in order of first use, so every set partition is produced once.
#[derive(Debug, Clone)]
pub struct RestrictedGrowthStrings {
    current: Vec<usize>,
    started: bool,
    done: bool,
}

impl RestrictedGrowthStrings {
    pub fn new(n: usize) -> Self {
        RestrictedGrowthStrings {
            current: vec![0; n],
            started: false,
            done: n == 0,
        }
    }

    fn advance(&mut self) -> bool {
        let a = &mut self.current;
        let n = a.len();
        // prefix maxima: a[i] may grow up to 1 + max(a[..i])
        let mut prefix_max = vec![0usize; n];
        for i in 1..n {
            prefix_max[i] = prefix_max[i - 1].max(a[i - 1]);
        }
        for i in (1..n).rev() {
            if a[i] <= prefix_max[i] {
                a[i] += 1;
                for v in a.iter_mut().skip(i + 1) {
                    *v = 0;
                }
                return true;
            }
        }
        false
    }
}

impl Iterator for RestrictedGrowthStrings {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        if self.started && !self.advance() {
            self.done = true;
            return None;
        }
        self.started = true;
        Some(self.current.clone())
    }
}

/// Blocks of a restricted growth string, ordered by first member.
pub fn blocks_of(rgs: &[usize]) -> Vec<Vec<usize>> {
    let count = rgs.iter().max().map_or(0, |m| m + 1);
    let mut blocks = vec![Vec::new(); count];
    for (i, &label) in rgs.iter().enumerate() {
        blocks[label].push(i);
    }
    blocks
}

/// Number of set partitions of an `n`-element set.
pub fn bell_number(n: usize) -> u128 {
    // Bell triangle
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().expect("non-empty row"));
        for &v in &row {
            let prev = *next.last().expect("non-empty");
            next.push(prev + v);
        }
        row = next;
    }
    row[0]
}

fn check_enumerable(t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::Size("cannot partition an empty task set".into()));
    }
    if t > MAX_ENUMERATION_TASKS {
        return Err(Error::EnumerationCap {
            tasks: t,
            cap: MAX_ENUMERATION_TASKS,
        });
    }
    Ok(())
}

/// Every partition of `tasks`, each exactly once, in restricted growth order.
pub fn enumerate_partitions(tasks: &[TaskId]) -> Result<impl Iterator<Item = Vec<Vec<TaskId>>> + '_> {
    check_enumerable(tasks.len())?;
    Ok(RestrictedGrowthStrings::new(tasks.len()).map(move |rgs| {
        blocks_of(&rgs)
            .into_iter()
            .map(|b| b.into_iter().map(|i| tasks[i].clone()).collect())
            .collect()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// Mean of group values.
    PerGroup,
    /// Mean of task values over all tasks.
    #[default]
    PerTask,
}

impl fmt::Display for ValueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueMode::PerGroup => "per_group",
            ValueMode::PerTask => "per_task",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub threshold: f64,
    pub value_mode: ValueMode,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            threshold: 0.5,
            value_mode: ValueMode::PerTask,
        }
    }
}

impl GroupingConfig {
    pub fn new(threshold: f64, value_mode: ValueMode) -> Result<Self> {
        let cfg = GroupingConfig {
            threshold,
            value_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Range(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub members: Vec<TaskId>,
    pub value: f64,
}

impl Group {
    pub fn singleton(task: TaskId) -> Self {
        Group {
            members: vec![task],
            value: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, task: &TaskId) -> bool {
        self.members.contains(task)
    }

    fn sorted_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.members.iter().map(TaskId::as_str).collect();
        names.sort_unstable();
        names
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.members.iter().map(TaskId::as_str).collect();
        write!(f, "[{}]", names.join(","))
    }
}

/// A partition of a task set with its aggregate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub stage: StageId,
    pub mode: ValueMode,
    pub threshold: f64,
    pub groups: Vec<Group>,
    pub value_per_group: f64,
    pub value_per_task: f64,
}

impl Grouping {
    /// Builds a grouping from groups whose values are already set.
    pub fn from_groups(stage: StageId, cfg: &GroupingConfig, groups: Vec<Group>) -> Self {
        let mut g = Grouping {
            stage,
            mode: cfg.value_mode,
            threshold: cfg.threshold,
            groups,
            value_per_group: 0.0,
            value_per_task: 0.0,
        };
        let (per_group, per_task) = grouping_value(&g);
        g.value_per_group = per_group;
        g.value_per_task = per_task;
        g
    }

    /// Every task in its own group.
    pub fn singletons(stage: StageId, cfg: &GroupingConfig, tasks: &[TaskId]) -> Self {
        Grouping::from_groups(stage, cfg, tasks.iter().cloned().map(Group::singleton).collect())
    }

    /// Aggregate under the configured mode.
    pub fn value(&self) -> f64 {
        match self.mode {
            ValueMode::PerGroup => self.value_per_group,
            ValueMode::PerTask => self.value_per_task,
        }
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.groups
            .iter()
            .flat_map(|g| g.members.iter().cloned())
            .collect()
    }

    pub fn task_count(&self) -> usize {
        self.groups.iter().map(Group::len).sum()
    }

    pub fn group_of(&self, task: &TaskId) -> Option<&Group> {
        self.groups.iter().find(|g| g.contains(task))
    }

    pub fn all_singletons(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    /// True when the groups are disjoint and cover exactly `tasks`.
    pub fn is_partition_of(&self, tasks: &[TaskId]) -> bool {
        let members = self.tasks();
        members.len() == tasks.len()
            && tasks
                .iter()
                .all(|t| members.iter().filter(|m| *m == t).count() == 1)
    }

    /// Member lists with names sorted, as a set-like comparison key.
    pub fn canonical(&self) -> Vec<Vec<String>> {
        let mut key: Vec<Vec<String>> = self
            .groups
            .iter()
            .map(|g| g.sorted_names().into_iter().map(String::from).collect())
            .collect();
        key.sort();
        key
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.groups.iter().map(Group::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Mean similarity of `task` to the other members of `group`; 0 when alone.
pub fn task_value(task: &TaskId, group: &Group, s: &SimilarityMatrix) -> Result<f64> {
    if !group.contains(task) {
        return Err(Error::Membership(format!("task {task} is not in group {group}")));
    }
    let t = s
        .index_of(task)
        .ok_or_else(|| Error::Membership(format!("task {task} missing from similarity matrix")))?;
    let others = group
        .members
        .iter()
        .filter(|m| *m != task)
        .map(|m| {
            s.index_of(m)
                .ok_or_else(|| Error::Membership(format!("task {m} missing from similarity matrix")))
        })
        .collect::<Result<Vec<_>>>()?;
    if others.is_empty() {
        return Ok(0.0);
    }
    let v = s.values();
    Ok(others.iter().map(|&i| v[[t, i]]).sum::<f64>() / others.len() as f64)
}

/// Mean of the members' task values.
pub fn group_value(members: &[TaskId], s: &SimilarityMatrix) -> Result<f64> {
    let group = Group {
        members: members.to_vec(),
        value: 0.0,
    };
    let mut total = 0.0;
    for t in members {
        total += task_value(t, &group, s)?;
    }
    Ok(total / members.len() as f64)
}

/// `(per_group, per_task)` aggregates from the recorded group values.
pub fn grouping_value(grouping: &Grouping) -> (f64, f64) {
    let groups = &grouping.groups;
    if groups.is_empty() {
        return (0.0, 0.0);
    }
    let per_group = groups.iter().map(|g| g.value).sum::<f64>() / groups.len() as f64;
    let tasks: usize = groups.iter().map(Group::len).sum();
    let per_task = groups.iter().map(|g| g.len() as f64 * g.value).sum::<f64>() / tasks as f64;
    (per_group, per_task)
}

/// Dissolves every multi-task group whose value is below the threshold.
pub fn apply_threshold(grouping: &Grouping, cfg: &GroupingConfig, s: &SimilarityMatrix) -> Result<Grouping> {
    let mut groups = Vec::with_capacity(grouping.groups.len());
    for g in &grouping.groups {
        if g.len() >= 2 && g.value < cfg.threshold {
            groups.extend(g.members.iter().cloned().map(Group::singleton));
        } else {
            groups.push(Group {
                members: g.members.clone(),
                value: group_value(&g.members, s)?,
            });
        }
    }
    Ok(Grouping::from_groups(grouping.stage, cfg, groups))
}

/// Scores for one partition given by index blocks.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PartitionScore {
    pub per_group: f64,
    pub per_task: f64,
}

impl PartitionScore {
    fn get(&self, mode: ValueMode) -> f64 {
        match mode {
            ValueMode::PerGroup => self.per_group,
            ValueMode::PerTask => self.per_task,
        }
    }
}

/// Scores index blocks; task sums run in task-index order, group sums in
/// block order.
pub(crate) fn score_blocks(
    s: ArrayView2<'_, f64>,
    blocks: &[Vec<usize>],
    task_values: &mut [f64],
) -> PartitionScore {
    let mut group_total = 0.0;
    for block in blocks {
        let mut block_total = 0.0;
        for &t in block {
            let v = if block.len() == 1 {
                0.0
            } else {
                let mut acc = 0.0;
                for &i in block {
                    if i != t {
                        acc += s[[t, i]];
                    }
                }
                acc / (block.len() - 1) as f64
            };
            task_values[t] = v;
            block_total += v;
        }
        group_total += block_total / block.len() as f64;
    }
    let per_task = task_values.iter().sum::<f64>() / task_values.len() as f64;
    PartitionScore {
        per_group: group_total / blocks.len() as f64,
        per_task,
    }
}

fn lexicographic_key(blocks: &[Vec<usize>], names: &[&str]) -> Vec<Vec<String>> {
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

/// Picks the best-scoring partition before thresholding.
///
/// Ties go to fewer groups, then to the lexicographically smallest list of
/// sorted member-name lists.
pub fn best_partition(s: &SimilarityMatrix, mode: ValueMode) -> Result<Vec<Vec<usize>>> {
    let t = s.len();
    check_enumerable(t)?;
    let values = s.values();
    let names: Vec<&str> = s.tasks().iter().map(TaskId::as_str).collect();
    let mut scratch = vec![0.0; t];
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for rgs in RestrictedGrowthStrings::new(t) {
        let blocks = blocks_of(&rgs);
        let score = score_blocks(values, &blocks, &mut scratch).get(mode);
        let better = match &best {
            None => true,
            Some((best_score, best_blocks)) => match score.total_cmp(best_score) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => match blocks.len().cmp(&best_blocks.len()) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => {
                        lexicographic_key(&blocks, &names) < lexicographic_key(best_blocks, &names)
                    }
                },
            },
        };
        if better {
            best = Some((score, blocks));
        }
    }
    Ok(best.expect("at least one partition").1)
}

/// Best grouping of the matrix's tasks, then thresholded.
pub fn select_grouping(s: &SimilarityMatrix, cfg: &GroupingConfig) -> Result<Grouping> {
    cfg.validate()?;
    let unthresholded = select_unthresholded(s, cfg)?;
    apply_threshold(&unthresholded, cfg, s)
}

/// The argmax grouping without the threshold split.
pub fn select_unthresholded(s: &SimilarityMatrix, cfg: &GroupingConfig) -> Result<Grouping> {
    let blocks = best_partition(s, cfg.value_mode)?;
    let mut task_values = vec![0.0; s.len()];
    let score = score_blocks(s.values(), &blocks, &mut task_values);
    let groups = blocks
        .iter()
        .map(|b| {
            let value = b.iter().map(|&i| task_values[i]).sum::<f64>() / b.len() as f64;
            Group {
                members: b.iter().map(|&i| s.tasks()[i].clone()).collect(),
                value,
            }
        })
        .collect();
    Ok(Grouping {
        stage: s.stage(),
        mode: cfg.value_mode,
        threshold: cfg.threshold,
        groups,
        value_per_group: score.per_group,
        value_per_task: score.per_task,
    })
}
