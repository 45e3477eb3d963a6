//! Loading, validating and pooling per-task activation dumps.

pub mod npy;

use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest sample count accepted by the unbiased HSIC estimator.
pub const MIN_SAMPLES: usize = 4;

/// Short label naming a task, e.g. `"S"` or `"depth"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TaskId(String);

impl TaskId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::Identity("task id must be non-empty".into()));
        }
        Ok(TaskId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for TaskId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        TaskId::new(value)
    }
}

impl From<TaskId> for String {
    fn from(value: TaskId) -> Self {
        value.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Builds task ids from string literals; panics on empty names.
pub fn task_ids<S: AsRef<str>>(names: &[S]) -> Vec<TaskId> {
    names
        .iter()
        .map(|n| TaskId::new(n.as_ref()).expect("non-empty task name"))
        .collect()
}

/// Candidate decoder stage. Stage 0 is the shared encoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageId(pub usize);

impl StageId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Un-pooled `(N, C, H, W)` activation tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawActivationTensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl RawActivationTensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        if shape[0] == 0 {
            return Err(Error::Shape("tensor must hold at least one sample".into()));
        }
        Ok(RawActivationTensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Average each channel over all spatial positions: `N x C`.
    #[default]
    SpatialMean,
    /// Average over channels at each position, then flatten: `N x (H*W)`.
    ChannelMeanFlatten,
}

/// Reduces a 4-D tensor to one feature vector per sample.
pub fn pool_spatial(t: &RawActivationTensor, mode: PoolMode) -> Result<Array2<f64>> {
    let [n, c, h, w] = t.shape;
    let hw = h * w;
    if hw == 0 || c == 0 {
        return Err(Error::Shape(format!(
            "cannot pool tensor of shape {:?}: empty channel or spatial extent",
            t.shape
        )));
    }
    let data = &t.data;
    let out = match mode {
        PoolMode::SpatialMean => Array2::from_shape_fn((n, c), |(i, ch)| {
            let start = (i * c + ch) * hw;
            data[start..start + hw].iter().sum::<f64>() / hw as f64
        }),
        PoolMode::ChannelMeanFlatten => Array2::from_shape_fn((n, hw), |(i, p)| {
            (0..c).map(|ch| data[(i * c + ch) * hw + p]).sum::<f64>() / c as f64
        }),
    };
    Ok(out)
}

/// `N x D` activations of one task at one candidate stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    task: TaskId,
    stage: StageId,
    values: Array2<f64>,
}

impl ActivationMatrix {
    pub fn new(task: TaskId, stage: StageId, values: Array2<f64>) -> Result<Self> {
        let (n, d) = values.dim();
        if n < MIN_SAMPLES {
            return Err(Error::Size(format!(
                "task {task}: {n} samples, at least {MIN_SAMPLES} required"
            )));
        }
        if d == 0 {
            return Err(Error::Shape(format!("task {task}: zero feature columns")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "task {task}: non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(ActivationMatrix { task, stage, values })
    }

    pub fn task(&self) -> &TaskId {
        &self.task
    }

    pub fn stage(&self) -> StageId {
        self.stage
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Same activations filed under another task id.
    pub fn relabel(&self, task: TaskId) -> Self {
        ActivationMatrix {
            task,
            stage: self.stage,
            values: self.values.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationFormat {
    Npy,
    Csv,
}

impl ActivationFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("npy") => Ok(ActivationFormat::Npy),
            Some("csv") => Ok(ActivationFormat::Csv),
            _ => Err(Error::Format(format!(
                "cannot infer activation format of {} (expected .npy or .csv)",
                path.display()
            ))),
        }
    }
}

/// Reads one activation dump; 4-D NPY tensors are pooled with `pool`.
pub fn load_activation_matrix(
    path: &Path,
    format: ActivationFormat,
    task: TaskId,
    stage: StageId,
    pool: PoolMode,
) -> Result<ActivationMatrix> {
    let values = match format {
        ActivationFormat::Csv => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv_matrix(&text)
        }
        ActivationFormat::Npy => npy::read_npy_file(path).and_then(|a| npy_to_matrix(a, pool)),
    }
    .map_err(|e| e.context(format!("loading {}", path.display())))?;
    ActivationMatrix::new(task, stage, values).map_err(|e| e.context(format!("loading {}", path.display())))
}

fn npy_to_matrix(arr: npy::NpyArray, pool: PoolMode) -> Result<Array2<f64>> {
    match arr.shape.as_slice() {
        &[n, d] => Array2::from_shape_vec((n, d), arr.data)
            .map_err(|e| Error::Format(format!("npy data does not fit shape: {e}"))),
        &[n, c, h, w] => {
            check_finite(&arr.data)?;
            let tensor = RawActivationTensor::new([n, c, h, w], arr.data)?;
            pool_spatial(&tensor, pool)
        }
        other => Err(Error::Format(format!(
            "activation arrays must be rank 2 or 4, got shape {other:?}"
        ))),
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Data(format!("non-finite value at flat index {i}"))),
        None => Ok(()),
    }
}

/// Parses header-less comma separated reals, one sample per row.
pub fn parse_csv_matrix(text: &str) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut width = None;
    let mut rows = 0usize;
    let mut data = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("csv: {e}")))?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Format(format!(
                    "csv row {} has {} fields, expected {w}",
                    line + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("csv row {}: {field:?} is not a number", line + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "csv row {}: non-finite value {field:?}",
                    line + 1
                )));
            }
            data.push(v);
        }
        rows += 1;
    }
    let width = width.unwrap_or(0);
    Array2::from_shape_vec((rows, width), data).map_err(|e| Error::Format(e.to_string()))
}

/// Activations of several tasks over one shared, ordered sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    stage: StageId,
    entries: Vec<ActivationMatrix>,
}

impl ActivationBundle {
    pub fn tasks(&self) -> Vec<TaskId> {
        self.entries.iter().map(|m| m.task.clone()).collect()
    }

    pub fn stage(&self) -> StageId {
        self.stage
    }

    pub fn n(&self) -> usize {
        self.entries[0].n()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ActivationMatrix> {
        self.entries.iter()
    }

    pub fn get(&self, task: &TaskId) -> Option<&ActivationMatrix> {
        self.entries.iter().find(|m| &m.task == task)
    }

    /// Bundle restricted to `tasks`, in the order given.
    pub fn subset(&self, tasks: &[TaskId]) -> Result<ActivationBundle> {
        let picked = tasks
            .iter()
            .map(|t| {
                self.get(t).cloned().ok_or_else(|| {
                    Error::Membership(format!("task {t} not present in stage {} bundle", self.stage))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        make_bundle(self.stage, picked)
    }
}

/// Groups matrices of distinct tasks that share a sample set.
pub fn make_bundle(stage: StageId, matrices: Vec<ActivationMatrix>) -> Result<ActivationBundle> {
    if matrices.len() < 2 {
        return Err(Error::Size(format!(
            "a bundle needs at least 2 tasks, got {}",
            matrices.len()
        )));
    }
    let n = matrices[0].n();
    for (i, m) in matrices.iter().enumerate() {
        if matrices[..i].iter().any(|prev| prev.task == m.task) {
            return Err(Error::Identity(format!("task {} appears twice", m.task)));
        }
        if m.n() != n {
            return Err(Error::Alignment(format!(
                "task {} has {} samples but task {} has {n}",
                m.task,
                m.n(),
                matrices[0].task
            )));
        }
        if m.stage != stage {
            return Err(Error::Alignment(format!(
                "task {} activations are from stage {}, bundle is stage {stage}",
                m.task, m.stage
            )));
        }
    }
    Ok(ActivationBundle {
        stage,
        entries: matrices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(task: &str, stage: usize, values: Array2<f64>) -> ActivationMatrix {
        ActivationMatrix::new(TaskId::new(task).unwrap(), StageId(stage), values).unwrap()
    }

    #[test]
    fn csv_parsing() {
        let m = parse_csv_matrix("1, 2.5,-3\n4,5e-1,6\n\n").unwrap();
        assert_eq!(m, ndarray::array![[1.0, 2.5, -3.0], [4.0, 0.5, 6.0]]);
        assert!(matches!(parse_csv_matrix("1,2\n3\n"), Err(Error::Format(_))));
        assert!(matches!(parse_csv_matrix("1,x\n"), Err(Error::Format(_))));
        assert!(matches!(parse_csv_matrix("1,NaN\n"), Err(Error::Data(_))));
        assert!(matches!(parse_csv_matrix("inf,1\n"), Err(Error::Data(_))));
    }

    #[test]
    fn matrix_validation() {
        let id = || TaskId::new("S").unwrap();
        assert!(matches!(
            ActivationMatrix::new(id(), StageId(1), Array2::zeros((3, 2))),
            Err(Error::Size(_))
        ));
        assert!(matches!(
            ActivationMatrix::new(id(), StageId(1), Array2::zeros((4, 0))),
            Err(Error::Shape(_))
        ));
        let mut v = Array2::zeros((4, 2));
        v[[2, 1]] = f64::NAN;
        let err = ActivationMatrix::new(id(), StageId(1), v).unwrap_err();
        assert!(
            matches!(err, Error::Data(ref m) if m.contains("row 2, column 1")),
            "{err}"
        );
        assert!(TaskId::new(" ").is_err());
    }

    #[test]
    fn pool_examples() {
        let t = RawActivationTensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            pool_spatial(&t, PoolMode::SpatialMean).unwrap(),
            ndarray::array![[2.5]]
        );
        let t = RawActivationTensor::new([1, 2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(
            pool_spatial(&t, PoolMode::ChannelMeanFlatten).unwrap(),
            ndarray::array![[3.0, 5.0]]
        );
        assert!(RawActivationTensor::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
        let empty = RawActivationTensor::new([2, 0, 2, 2], vec![]).unwrap();
        assert!(matches!(
            pool_spatial(&empty, PoolMode::SpatialMean),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pool_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let [n, c, h, w] = [2, 3, 4, 4];
        let data: Vec<f64> = random_matrix(&mut rng, 1, n * c * h * w)
            .into_raw_vec_and_offset()
            .0;
        let t = RawActivationTensor::new([n, c, h, w], data.clone()).unwrap();
        let at = |i: usize, ch: usize, y: usize, x: usize| data[((i * c + ch) * h + y) * w + x];

        let spatial = pool_spatial(&t, PoolMode::SpatialMean).unwrap();
        let channel = pool_spatial(&t, PoolMode::ChannelMeanFlatten).unwrap();
        assert_eq!(channel.dim(), (n, h * w));
        for i in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += at(i, ch, y, x);
                    }
                }
                assert!((spatial[[i, ch]] - acc / (h * w) as f64).abs() < 1e-12);
            }
            for y in 0..h {
                for x in 0..w {
                    let acc: f64 = (0..c).map(|ch| at(i, ch, y, x)).sum();
                    assert!((channel[[i, y * w + x]] - acc / c as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let len = 3 * 2 * 3 * 3;
        let a = random_matrix(&mut rng, 1, len).into_raw_vec_and_offset().0;
        let b = random_matrix(&mut rng, 1, len).into_raw_vec_and_offset().0;
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        let pool = |d: &Vec<f64>, mode| {
            pool_spatial(&RawActivationTensor::new([3, 2, 3, 3], d.clone()).unwrap(), mode).unwrap()
        };
        for mode in [PoolMode::SpatialMean, PoolMode::ChannelMeanFlatten] {
            let expected = pool(&a, mode) * 2.0 - pool(&b, mode) * 0.5;
            let got = pool(&mix, mode);
            assert!((got - expected).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn bundle_rules() {
        let four = || Array2::from_shape_fn((4, 2), |(i, j)| (i + j) as f64);
        let b = make_bundle(StageId(1), vec![matrix("S", 1, four()), matrix("D", 1, four())]).unwrap();
        assert_eq!(b.tasks(), task_ids(&["S", "D"]));
        assert_eq!((b.n(), b.len()), (4, 2));

        let sub = b.subset(&task_ids(&["D", "S"])).unwrap();
        assert_eq!(sub.tasks(), task_ids(&["D", "S"]));
        assert!(matches!(
            b.subset(&task_ids(&["D", "E"])),
            Err(Error::Membership(_))
        ));

        assert!(matches!(
            make_bundle(StageId(1), vec![matrix("S", 1, four())]),
            Err(Error::Size(_))
        ));
        assert!(matches!(
            make_bundle(StageId(1), vec![matrix("S", 1, four()), matrix("S", 1, four())]),
            Err(Error::Identity(_))
        ));
        assert!(matches!(
            make_bundle(
                StageId(1),
                vec![matrix("S", 1, four()), matrix("D", 1, Array2::zeros((5, 2)))]
            ),
            Err(Error::Alignment(_))
        ));
        assert!(matches!(
            make_bundle(StageId(1), vec![matrix("S", 1, four()), matrix("D", 2, four())]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(
            ActivationFormat::from_path(Path::new("a/S.NPY")).unwrap(),
            ActivationFormat::Npy
        );
        assert_eq!(
            ActivationFormat::from_path(Path::new("S.csv")).unwrap(),
            ActivationFormat::Csv
        );
        assert!(matches!(
            ActivationFormat::from_path(Path::new("S.txt")),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn task_id_serde_rejects_empty() {
        assert_eq!(
            serde_json::to_string(&TaskId::new("S").unwrap()).unwrap(),
            "\"S\""
        );
        assert!(serde_json::from_str::<TaskId>("\"\"").is_err());
    }
}
