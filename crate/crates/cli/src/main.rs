//! `taskfuse` command-line front end.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taskfuse::activations::npy::read_npy_file;
use taskfuse::activations::{
    load_activation_matrix, make_bundle, ActivationFormat, PoolMode, StageId, TaskId,
};
use taskfuse::eval::{
    geometric_consistency, robustness_report, semantic_consistency, to_labels, AttackConfig,
    ConsistencyReport, EvalReport,
};
use taskfuse::fsutil;
use taskfuse::fusion::{init_session, load_session, threshold_grid, threshold_sweep, PdfSession, PlanMode};
use taskfuse::grouping::select_grouping;
use taskfuse::similarity::pairwise_similarity;
use taskfuse::toy::{read_dumps, run_pdf, SavedModel, ToyRunSpec};
use taskfuse::{Error, ErrorClass, GroupingConfig, SimilarityMatrix, SimilarityMethod, ValueMode};

#[derive(Parser, Debug)]
#[command(
    name = "taskfuse",
    version,
    about = "Similarity-guided progressive decoder fusion for multi-task networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pairwise similarity matrix of per-task activation dumps.
    Cka(CkaArgs),
    /// Best task grouping for a similarity matrix.
    Group(GroupArgs),
    /// Progressive fusion: toy runs and the external-trainer protocol.
    Pdf {
        #[command(subcommand)]
        command: PdfCommand,
    },
    /// Fusion trees over a grid of grouping thresholds.
    Sweep(SweepArgs),
    /// Consistency metrics and robustness evaluation.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MethodArg {
    Cka,
    Rsa,
}

impl From<MethodArg> for SimilarityMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cka => SimilarityMethod::CkaUnbiased,
            MethodArg::Rsa => SimilarityMethod::Rsa,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PoolArg {
    /// Mean over spatial positions, one feature per channel.
    Spatial,
    /// Mean over channels, one feature per spatial position.
    Channel,
}

impl From<PoolArg> for PoolMode {
    fn from(p: PoolArg) -> Self {
        match p {
            PoolArg::Spatial => PoolMode::SpatialMean,
            PoolArg::Channel => PoolMode::ChannelMeanFlatten,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
    Pgm,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    PerTask,
    PerGroup,
}

impl From<ModeArg> for ValueMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerTask => ValueMode::PerTask,
            ModeArg::PerGroup => ValueMode::PerGroup,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PlanArg {
    Progressive,
    Offline,
}

#[derive(Args, Debug)]
struct CkaArgs {
    /// Activation dump per task as TASK=PATH (.npy or .csv); at least two.
    #[arg(long = "inputs", value_name = "TASK=PATH", num_args = 1.., required = true)]
    inputs: Vec<String>,
    /// Candidate stage the dumps come from.
    #[arg(long, default_value_t = 1)]
    stage: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Cka)]
    method: MethodArg,
    /// Pooling for 4-D (N, C, H, W) dumps.
    #[arg(long, value_enum, default_value_t = PoolArg::Spatial)]
    pool: PoolArg,
    /// Artifact format.
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    out: OutFormat,
    /// Artifact path; defaults to similarity_stage<k>.<ext> in the working directory.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct GroupingArgs {
    /// Groups with value below this threshold are split into singletons.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Aggregation of task values into the grouping value.
    #[arg(long, value_enum, default_value_t = ModeArg::PerTask)]
    mode: ModeArg,
}

impl GroupingArgs {
    fn config(&self) -> Result<GroupingConfig, Error> {
        GroupingConfig::new(self.threshold, self.mode.into())
    }
}

#[derive(Args, Debug)]
struct GroupArgs {
    /// Similarity matrix JSON as written by `cka`.
    #[arg(long, value_name = "PATH")]
    matrix: PathBuf,
    #[command(flatten)]
    grouping: GroupingArgs,
    /// Grouping JSON output path.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PdfCommand {
    /// Start a run: a full toy run, or an external session awaiting dumps.
    Run(PdfRunArgs),
    /// Feed the dumps named in a session's manifest and advance one stage.
    Resume(PdfResumeArgs),
}

#[derive(Args, Debug)]
struct PdfRunArgs {
    /// Train and fuse the built-in toy network end to end.
    #[arg(
        long,
        conflicts_with = "external",
        required_unless_present = "external",
        requires = "spec"
    )]
    toy: bool,
    /// Create a session for an external trainer.
    #[arg(long, requires_all = ["tasks", "stages"])]
    external: bool,
    /// Toy run spec JSON: {"data": ..., "options": ...}.
    #[arg(long, value_name = "PATH")]
    spec: Option<PathBuf>,
    /// Seed for the toy run; defaults to the spec's.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated task names (external mode).
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    /// Number of candidate decoder stages (external mode).
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long, value_enum, default_value_t = MethodArg::Cka)]
    method: MethodArg,
    #[command(flatten)]
    grouping: GroupingArgs,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "pdf-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PdfResumeArgs {
    /// Session JSON to advance.
    #[arg(long, value_name = "PATH")]
    session: PathBuf,
    /// Directory holding the dumps named in the manifest.
    #[arg(long, value_name = "DIR")]
    activations: PathBuf,
    #[arg(long, value_enum, default_value_t = PoolArg::Spatial)]
    pool: PoolArg,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Directory of per-stage similarity matrix JSON files.
    #[arg(long, value_name = "DIR")]
    matrix_dir: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    start: f64,
    #[arg(long, default_value_t = 1.0)]
    end: f64,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, value_enum, default_value_t = PlanArg::Progressive)]
    mode: PlanArg,
    #[arg(long = "value-mode", value_enum, default_value_t = ModeArg::PerTask)]
    value_mode: ModeArg,
    /// Table output path (.csv, or .json for full trees).
    #[arg(long, value_name = "PATH", default_value = "sweep.csv")]
    output: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Agreement of segmentation with edges and depth with normals.
    Consistency(ConsistencyArgs),
    /// PGD and Gaussian-noise robustness of a saved toy model.
    Attack(AttackArgs),
}

#[derive(Args, Debug)]
struct ConsistencyArgs {
    /// H x W label map (.npy).
    #[arg(long, value_name = "PATH", requires = "edge")]
    seg: Option<PathBuf>,
    /// H x W edge probabilities (.npy).
    #[arg(long, value_name = "PATH", requires = "seg")]
    edge: Option<PathBuf>,
    /// H x W depth map (.npy).
    #[arg(long, value_name = "PATH", requires = "normals")]
    depth: Option<PathBuf>,
    /// H x W x 3 surface normals (.npy).
    #[arg(long, value_name = "PATH", requires = "depth")]
    normals: Option<PathBuf>,
    /// Baseline comparison as S_NET,D_NET,S_BASE,D_BASE.
    #[arg(long, value_delimiter = ',', value_name = "S,D,SB,DB")]
    rel: Option<Vec<f64>>,
    #[arg(long, value_name = "PATH", default_value = "eval-report.json")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// model.json written by `pdf run --toy`.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Comma-separated attack budgets in schedule units.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,4,8")]
    eps: Vec<f64>,
    /// Step size in schedule units.
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    /// Input units per schedule unit.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Comma-separated noise severities (1-5).
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    severities: Vec<u8>,
    /// Seed of the noise streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate on the first N samples; 0 uses all.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, value_name = "PATH", default_value = "eval-report.json")]
    output: PathBuf,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Cka(a) => cmd_cka(a),
        Command::Group(a) => cmd_group(a),
        Command::Pdf { command } => match command {
            PdfCommand::Run(a) => cmd_pdf_run(a),
            PdfCommand::Resume(a) => cmd_pdf_resume(a),
        },
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval { command } => match command {
            EvalCommand::Consistency(a) => cmd_consistency(a),
            EvalCommand::Attack(a) => cmd_attack(a),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("TASKFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("TASKFUSE_THREADS must be a non-negative integer, got {raw:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn parse_input(spec: &str) -> Result<(TaskId, PathBuf), Failure> {
    let (task, path) = spec
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("expected TASK=PATH, got {spec:?}")))?;
    let task = TaskId::new(task).map_err(|_| Failure::Usage(format!("empty task name in {spec:?}")))?;
    Ok((task, PathBuf::from(path)))
}

fn cmd_cka(a: CkaArgs) -> CmdResult {
    if a.inputs.len() < 2 {
        return Err(Failure::Usage("cka needs at least two --inputs".into()));
    }
    if a.stage == 0 {
        return Err(Failure::Usage("--stage must be at least 1".into()));
    }
    let stage = StageId(a.stage);
    let matrices = a
        .inputs
        .iter()
        .map(|s| {
            let (task, path) = parse_input(s)?;
            let format = ActivationFormat::from_path(&path)?;
            Ok(load_activation_matrix(&path, format, task, stage, a.pool.into())?)
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let bundle = make_bundle(stage, matrices)?;
    let matrix = pairwise_similarity(&bundle, a.method.into())?;
    let (ext, bytes) = match a.out {
        OutFormat::Json => ("json", matrix.to_json().into_bytes()),
        OutFormat::Csv => ("csv", matrix.to_csv().into_bytes()),
        OutFormat::Pgm => ("pgm", matrix.to_pgm()),
    };
    let path = a
        .output
        .unwrap_or_else(|| PathBuf::from(format!("similarity_stage{}.{ext}", a.stage)));
    fsutil::write_atomic(&path, &bytes)?;
    print!("{}", matrix.pretty());
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_group(a: GroupArgs) -> CmdResult {
    let cfg = a.grouping.config()?;
    let matrix = SimilarityMatrix::load_json(&a.matrix)?;
    let grouping = select_grouping(&matrix, &cfg)?;
    println!(
        "{grouping}  per_task={:.3} per_group={:.3}",
        grouping.value_per_task, grouping.value_per_group
    );
    if let Some(path) = a.output {
        fsutil::write_json_atomic(&path, &grouping)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_manifest(session: &PdfSession) {
    let files: Vec<String> = session.manifest.iter().map(|e| e.file_name()).collect();
    println!(
        "awaiting stage {} dumps: {}",
        session.current_stage,
        files.join(" ")
    );
}

fn write_session(session: &PdfSession, session_path: &Path) -> CmdResult {
    session.save(session_path)?;
    let dir = session_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let manifest = dir.join("manifest.json");
    fsutil::write_json_atomic(&manifest, &session.manifest_json())?;
    Ok(())
}

fn cmd_pdf_run(a: PdfRunArgs) -> CmdResult {
    let cfg = a.grouping.config()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    if a.toy {
        let path = a.spec.as_ref().expect("clap requires --spec with --toy");
        let mut spec = ToyRunSpec::load(path)?;
        if let Some(seed) = a.seed {
            spec.options.seed = seed;
        }
        let outcome = run_pdf(&spec.data, &spec.options, Some(&a.out))?;
        let report = &outcome.report;
        println!("seed {}", report.seed);
        print!("{}", report.final_tree.pretty());
        println!("training rounds {}", report.training_rounds);
        for t in &report.trend {
            let names: Vec<&str> = t.group.iter().map(TaskId::as_str).collect();
            println!(
                "stage {} similarity of [{}]: {:.4} -> {:.4}",
                t.measured_stage,
                names.join(","),
                t.before,
                t.after
            );
        }
        println!("wrote {}", a.out.display());
        return Ok(());
    }
    let stages = a.stages.expect("clap requires --stages with --external");
    let tasks = a
        .tasks
        .iter()
        .map(|t| TaskId::new(t.trim()).map_err(|_| Failure::Usage("empty task name in --tasks".into())))
        .collect::<Result<Vec<_>, _>>()?;
    let session = init_session(&tasks, stages, cfg, a.method.into())?;
    let path = a.out.join("session.json");
    write_session(&session, &path)?;
    print_manifest(&session);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_pdf_resume(a: PdfResumeArgs) -> CmdResult {
    let session = load_session(&a.session)?;
    if session.is_complete() {
        return Err(Error::Protocol("session is already complete".into()).into());
    }
    let missing: Vec<String> = session
        .manifest
        .iter()
        .map(|e| e.file_name())
        .filter(|f| !a.activations.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Protocol(format!("missing activation dumps: {}", missing.join(", "))).into());
    }
    let bundles = read_dumps(&a.activations, &session, a.pool.into())?;
    let next = session.progressive_step(&bundles)?;
    write_session(&next, &a.session)?;
    let record = next.history.last().expect("a stage was just recorded");
    println!("stage {}: {}", record.stage, record.grouping);
    if next.is_complete() {
        println!("complete");
        print!("{}", next.tree.pretty());
    } else {
        print_manifest(&next);
    }
    Ok(())
}

fn load_stage_matrices(dir: &Path) -> Result<Vec<SimilarityMatrix>, Error> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_stage: BTreeMap<usize, SimilarityMatrix> = BTreeMap::new();
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let m = SimilarityMatrix::load_json(&path)?;
        if by_stage.insert(m.stage().index(), m).is_some() {
            return Err(Error::Protocol(format!(
                "two matrices for one stage in {}",
                dir.display()
            )));
        }
    }
    let count = by_stage.len();
    if count == 0 {
        return Err(Error::Protocol(format!("no matrices in {}", dir.display())));
    }
    for c in 1..=count {
        if !by_stage.contains_key(&c) {
            return Err(Error::Protocol(format!(
                "missing stage {c} matrix in {}",
                dir.display()
            )));
        }
    }
    Ok(by_stage.into_values().collect())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let matrices = load_stage_matrices(&a.matrix_dir)?;
    let tasks = matrices[0].tasks().to_vec();
    let grid = threshold_grid(a.start, a.end, a.step)?;
    let base = GroupingConfig {
        value_mode: a.value_mode.into(),
        ..GroupingConfig::default()
    };
    let mode = match a.mode {
        PlanArg::Progressive => PlanMode::Progressive,
        PlanArg::Offline => PlanMode::Offline,
    };
    let rows = threshold_sweep(&tasks, &matrices, &grid, &base, mode)?;

    let mut header = vec!["threshold".to_string()];
    header.extend((1..=matrices.len()).map(|c| format!("stage{c}")));
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            std::iter::once(row.threshold.to_string())
                .chain(row.tree.stage_groupings.iter().map(|g| g.to_string()))
                .collect()
        })
        .collect();
    let mut table = String::new();
    for line in std::iter::once(&header).chain(&cells) {
        let quoted: Vec<String> = line
            .iter()
            .map(|f| {
                if f.contains(',') {
                    format!("\"{f}\"")
                } else {
                    f.clone()
                }
            })
            .collect();
        table.push_str(&quoted.join(","));
        table.push('\n');
    }
    if a.output.extension().is_some_and(|x| x == "json") {
        fsutil::write_json_atomic(&a.output, &rows)?;
    } else {
        fsutil::write_atomic(&a.output, table.as_bytes())?;
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            std::iter::once(&header)
                .chain(&cells)
                .map(|l| l[i].len())
                .max()
                .unwrap_or(0)
        })
        .collect();
    for line in std::iter::once(&header).chain(&cells) {
        let mut out = String::new();
        for (f, w) in line.iter().zip(&widths) {
            let _ = write!(out, "{f:<w$}  ");
        }
        println!("{}", out.trim_end());
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

fn read_map(path: &Path, rank: usize) -> Result<(Vec<usize>, Vec<f64>), Error> {
    let arr = read_npy_file(path)?;
    if arr.rank() != rank {
        return Err(Error::Shape(format!(
            "{} has rank {}, expected {rank}",
            path.display(),
            arr.rank()
        )));
    }
    Ok((arr.shape, arr.data))
}

fn read_2d(path: &Path) -> Result<ndarray::Array2<f64>, Error> {
    let (shape, data) = read_map(path, 2)?;
    ndarray::Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| Error::Shape(e.to_string()))
}

fn cmd_consistency(a: ConsistencyArgs) -> CmdResult {
    if a.seg.is_none() && a.depth.is_none() && a.rel.is_none() {
        return Err(Failure::Usage(
            "give --seg/--edge, --depth/--normals, or --rel".into(),
        ));
    }
    let mut consistency = ConsistencyReport {
        semantic: None,
        geometric: None,
    };
    if let (Some(seg), Some(edge)) = (&a.seg, &a.edge) {
        let labels = to_labels(&read_2d(seg)?)?;
        consistency.semantic = Some(semantic_consistency(&labels, &read_2d(edge)?)?);
    }
    if let (Some(depth), Some(normals)) = (&a.depth, &a.normals) {
        let d = read_2d(depth)?;
        let (shape, data) = read_map(normals, 3)?;
        let n = ndarray::Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        consistency.geometric = Some(geometric_consistency(&d, &n)?);
    }
    let rel_improvement = match a.rel.as_deref() {
        Some(&[s, d, sb, db]) => Some(taskfuse::eval::rel_improvement(s, d, sb, db)?),
        Some(other) => {
            return Err(Failure::Usage(format!(
                "--rel takes 4 values, got {}",
                other.len()
            )));
        }
        None => None,
    };
    let report = EvalReport {
        consistency: (consistency.semantic.is_some() || consistency.geometric.is_some())
            .then_some(consistency),
        rel_improvement,
        ..EvalReport::default()
    };
    fsutil::write_json_atomic(&a.output, &report)?;
    if let Some(s) = consistency.semantic {
        println!("semantic {s:.6}");
    }
    if let Some(g) = consistency.geometric {
        println!("geometric {g:.6}");
    }
    if let Some(r) = rel_improvement {
        println!("rel_improvement {r:.3}");
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

fn cmd_attack(a: AttackArgs) -> CmdResult {
    if a.eps.is_empty() {
        return Err(Failure::Usage("--eps needs at least one value".into()));
    }
    let model = SavedModel::load(&a.model)?;
    let mut data = model.dataset()?;
    if a.samples > 0 {
        data = data.head(a.samples);
    }
    let base = AttackConfig {
        epsilon: a.eps[0],
        step_size: a.step,
        scale: a.scale,
    };
    let report = robustness_report(&model.net, &data, &a.eps, &base, &a.severities, a.seed)?;
    let mut json = serde_json::to_value(&report).map_err(|e| Error::Parse(e.to_string()))?;
    json["seed"] = serde_json::json!(a.seed);
    fsutil::write_json_atomic(&a.output, &json)?;
    println!("noise seed {}", a.seed);
    if let Some(clean) = &report.clean {
        println!("clean mean loss {:.6}", clean["mean_loss"]);
    }
    if let Some(pgd) = &report.pgd {
        for (eps, v) in &pgd.per_eps {
            println!("pgd eps {eps}: {v:.6}");
        }
        if let (Some(lo), Some(hi)) = (pgd.low, pgd.high) {
            println!("pgd low {lo:.6} high {hi:.6}");
        }
    }
    println!("wrote {}", a.output.display());
    Ok(())
}
