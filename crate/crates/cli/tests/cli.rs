use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use taskfuse::activations::npy::write_npy_file;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_taskfuse"));
    c.env("TASKFUSE_THREADS", "2");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn matrix_json(tasks: &[&str], values: &[Vec<f64>], stage: usize) -> String {
    serde_json::json!({
        "stage": stage,
        "method": "cka_unbiased",
        "tasks": tasks,
        "values": values,
    })
    .to_string()
}

fn worked_values(pairs: &[(usize, usize, f64)], fill: f64, t: usize) -> Vec<Vec<f64>> {
    let mut v = vec![vec![fill; t]; t];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(a, b, s) in pairs {
        v[a][b] = s;
        v[b][a] = s;
    }
    v
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn dump(path: &Path, rows: usize, cols: usize, seed: f64) {
    let data: Vec<f64> = (0..rows * cols)
        .map(|i| ((i as f64 + 1.0) * seed).sin() + 0.1 * (i % cols) as f64)
        .collect();
    write_npy_file(path, &[rows, cols], &data).unwrap();
}

#[test]
fn help_exits_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["--help"],
        vec!["cka", "--help"],
        vec!["group", "--help"],
        vec!["pdf", "--help"],
        vec!["pdf", "run", "--help"],
        vec!["pdf", "resume", "--help"],
        vec!["sweep", "--help"],
        vec!["eval", "--help"],
        vec!["eval", "consistency", "--help"],
        vec!["eval", "attack", "--help"],
    ] {
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(stdout(&o).contains("Usage"), "{args:?}");
    }
    let o = run(dir.path(), &["cka"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cka_identical_dumps() {
    let dir = tempfile::tempdir().unwrap();
    dump(&dir.path().join("a.npy"), 20, 5, 0.7);
    std::fs::copy(dir.path().join("a.npy"), dir.path().join("b.npy")).unwrap();
    let o = run(
        dir.path(),
        &["cka", "--inputs", "a=a.npy", "b=b.npy", "--output", "m.json"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    for row in v["values"].as_array().unwrap() {
        for x in row.as_array().unwrap() {
            assert!((x.as_f64().unwrap() - 1.0).abs() < 1e-12);
        }
    }
    assert!(stdout(&o).contains("1.0000"));

    for (fmt, name) in [("csv", "m.csv"), ("pgm", "m.pgm")] {
        let o = run(
            dir.path(),
            &[
                "cka", "--inputs", "a=a.npy", "b=b.npy", "--out", fmt, "--output", name,
            ],
        );
        assert_eq!(o.status.code(), Some(0));
        assert!(dir.path().join(name).exists());
    }
}

#[test]
fn cka_mismatched_samples_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    dump(&dir.path().join("a.npy"), 20, 5, 0.7);
    dump(&dir.path().join("b.npy"), 21, 5, 0.3);
    let o = run(dir.path(), &["cka", "--inputs", "a=a.npy", "b=b.npy"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alignment"), "{}", stderr(&o));
    let o = run(dir.path(), &["cka", "--inputs", "a=a.npy"]);
    assert_eq!(o.status.code(), Some(1));
}

fn assert_all_singletons(line: &str) {
    let groups = line.split("  ").next().unwrap();
    let mut names: Vec<&str> = groups.split(' ').collect();
    names.sort_unstable();
    assert_eq!(names, ["[A]", "[D]", "[E]", "[N]", "[S]"], "{line}");
}

#[test]
fn group_worked_matrix_and_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = ["S", "D", "E", "N", "A"];
    write(
        &dir.path().join("worked.json"),
        &matrix_json(&tasks, &worked_values(&[(0, 2, 0.86), (1, 3, 0.76)], 0.3, 5), 1),
    );
    let o = run(
        dir.path(),
        &["group", "--matrix", "worked.json", "--output", "g.json"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(
        stdout(&o).contains("[S,E] [D,N] [A]  per_task=0.648"),
        "{}",
        stdout(&o)
    );
    assert!(stdout(&o).contains("per_group=0.540"));
    assert!(dir.path().join("g.json").exists());

    let o = run(
        dir.path(),
        &["group", "--matrix", "worked.json", "--threshold", "1.0"],
    );
    assert_all_singletons(&stdout(&o));

    write(
        &dir.path().join("zero.json"),
        &matrix_json(&tasks, &worked_values(&[], 0.0, 5), 1),
    );
    let o = run(dir.path(), &["group", "--matrix", "zero.json"]);
    assert_all_singletons(&stdout(&o));
    assert!(stdout(&o).contains("per_task=0.000"));

    let names: Vec<String> = (0..13).map(|i| format!("t{i}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write(
        &dir.path().join("big.json"),
        &matrix_json(&refs, &worked_values(&[], 0.2, 13), 1),
    );
    let o = run(dir.path(), &["group", "--matrix", "big.json"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let o = run(dir.path(), &["group", "--matrix", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cka_output_feeds_group() {
    let dir = tempfile::tempdir().unwrap();
    for (name, seed) in [("a", 0.3), ("b", 0.31), ("c", 1.7)] {
        dump(&dir.path().join(format!("{name}.npy")), 30, 4, seed);
    }
    let o = run(dir.path(), &["cka", "--inputs", "a=a.npy", "b=b.npy", "c=c.npy"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(dir.path(), &["group", "--matrix", "similarity_stage1.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn external_session_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "pdf",
            "run",
            "--external",
            "--tasks",
            "S,D,E,N,A",
            "--stages",
            "5",
            "--out",
            "sess",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sess/manifest.json")).unwrap())
            .unwrap();
    let files: Vec<&str> = manifest
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["file"].as_str().unwrap())
        .collect();
    assert_eq!(
        files,
        [
            "S_stage1.npy",
            "D_stage1.npy",
            "E_stage1.npy",
            "N_stage1.npy",
            "A_stage1.npy"
        ]
    );

    let acts = dir.path().join("acts");
    std::fs::create_dir(&acts).unwrap();
    // S/E and D/N share representations; A is unrelated.
    let base = |seed: f64| -> Vec<f64> { (0..40 * 6).map(|i| ((i as f64 + 1.0) * seed).sin()).collect() };
    let (se, dn, a) = (base(0.37), base(1.13), base(2.71));
    for (task, data) in [("S", &se), ("E", &se), ("D", &dn), ("N", &dn)] {
        write_npy_file(&acts.join(format!("{task}_stage1.npy")), &[40, 6], data).unwrap();
    }
    let session_path = dir.path().join("sess/session.json");
    let before = std::fs::read(&session_path).unwrap();
    let o = run(
        dir.path(),
        &[
            "pdf",
            "resume",
            "--session",
            "sess/session.json",
            "--activations",
            "acts",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("A_stage1.npy"), "{}", stderr(&o));
    assert_eq!(std::fs::read(&session_path).unwrap(), before);

    write_npy_file(&acts.join("A_stage1.npy"), &[40, 6], &a).unwrap();
    let o = run(
        dir.path(),
        &[
            "pdf",
            "resume",
            "--session",
            "sess/session.json",
            "--activations",
            "acts",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("stage 1: [S,E] [D,N] [A]"), "{}", stdout(&o));
    assert!(stdout(&o).contains("S_stage2.npy"));
    let session: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&session_path).unwrap()).unwrap();
    assert_eq!(session["current_stage"], 2);
}

fn toy_spec(dir: &Path) -> PathBuf {
    write(
        &dir.join("toy.json"),
        r#"{
            "data": {"input_dim": 24, "latent_dim": 5, "samples": 192,
                "tasks": [
                    {"id": "t0", "kind": "regression", "factors": [0, 1]},
                    {"id": "t1", "kind": "regression", "factors": [0, 1]},
                    {"id": "t2", "kind": "regression", "factors": [2, 3]},
                    {"id": "t3", "kind": "regression", "factors": [2, 3]},
                    {"id": "t4", "kind": "regression", "factors": [4]}
                ]},
            "options": {"num_stages": 2, "train": {"epochs": 60}}
        }"#,
    )
}

#[test]
fn toy_run_then_cka_and_attack() {
    let dir = tempfile::tempdir().unwrap();
    toy_spec(dir.path());
    let o = run(
        dir.path(),
        &[
            "pdf", "run", "--toy", "--spec", "toy.json", "--seed", "1", "--out", "run",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed 1"));
    for f in ["final_tree.json", "report.json", "model.json", "session.json"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }

    let inputs: Vec<String> = (0..5).map(|t| format!("t{t}=run/t{t}_stage1.npy")).collect();
    let mut args = vec!["cka", "--inputs"];
    args.extend(inputs.iter().map(String::as_str));
    args.extend(["--output", "sep.json"]);
    let o = run(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sep.json")).unwrap()).unwrap();
    let m: Vec<Vec<f64>> = serde_json::from_value(v["values"].clone()).unwrap();
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, m[j][i]);
        }
    }

    let o = run(
        dir.path(),
        &[
            "eval",
            "attack",
            "--model",
            "run/model.json",
            "--eps",
            "0.25,0.5,1,4,8",
            "--scale",
            "0.05",
            "--samples",
            "64",
            "--output",
            "att.json",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("att.json")).unwrap()).unwrap();
    assert!(r["pgd"]["low"].is_f64() && r["pgd"]["high"].is_f64(), "{r}");
    assert!(r["noise"]["per_severity"]["5"].is_f64());
    assert_eq!(r["seed"], 0);
}

#[test]
fn consistency_command() {
    let dir = tempfile::tempdir().unwrap();
    let seg: Vec<f64> = (0..64)
        .map(|i| ((i / 8) / 4 + 2 * ((i % 8) / 5)) as f64)
        .collect();
    write_npy_file(&dir.path().join("seg.npy"), &[8, 8], &seg).unwrap();
    let labels = taskfuse::eval::to_labels(&ndarray::Array2::from_shape_vec((8, 8), seg).unwrap()).unwrap();
    let edges = taskfuse::eval::seg_to_edges(&labels).mapv(f64::from);
    write_npy_file(&dir.path().join("edge.npy"), &[8, 8], edges.as_slice().unwrap()).unwrap();
    let depth = ndarray::Array2::from_shape_fn((8, 8), |(i, j)| (i as f64 * 0.3).sin() + j as f64 * 0.2);
    write_npy_file(&dir.path().join("depth.npy"), &[8, 8], depth.as_slice().unwrap()).unwrap();
    let normals = taskfuse::eval::depth_to_normals(&depth);
    write_npy_file(
        &dir.path().join("normals.npy"),
        &[8, 8, 3],
        normals.as_slice().unwrap(),
    )
    .unwrap();

    let o = run(
        dir.path(),
        &[
            "eval",
            "consistency",
            "--seg",
            "seg.npy",
            "--edge",
            "edge.npy",
            "--depth",
            "depth.npy",
            "--normals",
            "normals.npy",
            "--rel",
            "72.72,5.33,72.11,5.36",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval-report.json")).unwrap()).unwrap();
    assert_eq!(r["consistency"]["semantic"], 1.0);
    assert!((r["consistency"]["geometric"].as_f64().unwrap() - 1.0).abs() < 1e-10);
    assert!((r["rel_improvement"].as_f64().unwrap() - 0.703).abs() < 1e-3);

    let o = run(
        dir.path(),
        &[
            "eval",
            "consistency",
            "--depth",
            "depth.npy",
            "--normals",
            "nope.npy",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_grid_and_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mats = dir.path().join("mats");
    std::fs::create_dir(&mats).unwrap();
    let tasks = ["S", "D", "E", "N", "A"];
    write(
        &mats.join("s1.json"),
        &matrix_json(&tasks, &worked_values(&[(0, 2, 0.86), (1, 3, 0.76)], 0.3, 5), 1),
    );
    write(
        &mats.join("s2.json"),
        &matrix_json(&tasks, &worked_values(&[(0, 2, 0.81), (1, 3, 0.45)], 0.2, 5), 2),
    );
    let o = run(
        dir.path(),
        &[
            "sweep",
            "--matrix-dir",
            "mats",
            "--step",
            "0.5",
            "--output",
            "t.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert_eq!(lines[0], "threshold,stage1,stage2");
    assert!(lines[1].starts_with("0,\"[S,E] [D,N] [A]\""), "{text}");
    assert!(lines[3].starts_with("1,[S] "), "{text}");
    assert_eq!(lines[3].matches('[').count(), 10, "{text}");

    let o = run(
        dir.path(),
        &[
            "sweep",
            "--matrix-dir",
            "mats",
            "--mode",
            "offline",
            "--output",
            "t.json",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    std::fs::remove_file(mats.join("s1.json")).unwrap();
    let o = run(dir.path(), &["sweep", "--matrix-dir", "mats"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage 1"), "{}", stderr(&o));
}
