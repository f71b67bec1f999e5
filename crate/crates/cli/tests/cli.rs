use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tanseg::series::{load_dataset, write_binary_series};

const TINY: &[&str] = &[
    "--synth.n_instances",
    "20",
    "--synth.length",
    "120",
    "--synth.min_segment_len",
    "10",
    "--synth.max_segment_len",
    "20",
    "--synth.max_segments",
    "2",
    "--synth.min_gap",
    "10",
    "--synth.edge_margin",
    "10",
    "--model.d_hidden",
    "4",
    "--model.n_layers",
    "2",
    "--train.seq_len",
    "4",
    "--train.max_epochs",
    "2",
];

fn tanseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tanseg")).args(args).output().unwrap()
}

fn tanseg_tiny(args: &[&str]) -> Output {
    let all: Vec<&str> = args[..1].iter().chain(TINY).chain(&args[1..]).copied().collect();
    tanseg(&all)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Generated, trained and segmented tiny run in a temp dir.
struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(tanseg_tiny(&["gen", "--out", &s(&root.join("data"))]));
        Self { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> String {
        s(&self.root.join(rel))
    }

    fn train(&self, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--data", &self.root.join("data").to_string_lossy()]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        args.extend(["--model".to_string(), self.p("m/model.json")]);
        args.extend(extra.iter().map(|a| a.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        tanseg_tiny(&refs)
    }
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_writes_three_splits_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(tanseg_tiny(&["gen", "--out", &s(&a), "--seed", "4"]));
    ok(tanseg_tiny(&["gen", "--out", &s(&b), "--seed", "4"]));
    for split in ["train", "valid", "test"] {
        assert!(a.join(split).join("manifest.json").is_file());
        assert!(a.join(split).join("labels.csv").is_file());
    }
    let strip = |t: Vec<(PathBuf, Vec<u8>)>| t.into_iter().filter(|(p, _)| p != Path::new("config.json")).collect::<Vec<_>>();
    assert_eq!(strip(tree(&a)), strip(tree(&b)));
    let sizes: Vec<usize> = ["train", "valid", "test"]
        .iter()
        .map(|sp| load_dataset(&a.join(sp)).unwrap().len())
        .collect();
    assert_eq!(sizes, [10, 4, 6]);
}

#[test]
fn gen_ratio_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(tanseg_tiny(&["gen", "--out", &s(&out), "--synth.n_instances", "100", "--split.ratio", "8,1,1"]));
    let sizes: Vec<usize> = ["train", "valid", "test"]
        .iter()
        .map(|sp| load_dataset(&out.join(sp)).unwrap().len())
        .collect();
    assert_eq!(sizes, [80, 10, 10]);
}

#[test]
fn config_errors_exit_1_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    for bad in [
        vec!["gen", "--out", &s(&out), "--train.tau", "1.5"],
        vec!["gen", "--out", &s(&out), "--synth.bogus", "1"],
        vec!["gen", "--out", &s(&out), "--train.seq_len", "x"],
        vec!["gen", "--out", &s(&out), "--no-such-flag"],
        vec!["gen"],
    ] {
        let o = tanseg(&bad);
        assert_eq!(o.status.code(), Some(1), "{bad:?}: {}", stderr(&o));
        assert!(!out.exists());
    }
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 5, "train.seq_len": 6}"#).unwrap();
    let o = ok(tanseg(&["config", "--config", &s(&cfg), "--train.seq_len", "7"]));
    let flat: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(flat["seed"], 5);
    assert_eq!(flat["train.seq_len"], 7);
    assert_eq!(flat["train.tau"], 0.5);
}

#[test]
fn train_writes_checkpoint_and_sidecars() {
    let run = Run::new();
    ok(run.train(&[]));
    for f in ["model.json", "model.log.csv", "model.threshold.json", "model.state.json"] {
        assert!(run.root.join("m").join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(run.root.join("m/model.log.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(log.as_bytes());
    let best: Vec<f64> = rows.records().map(|r| r.unwrap()[9].parse().unwrap()).collect();
    assert_eq!(best.len(), 2);
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn resume_continues_to_the_same_result() {
    let run = Run::new();
    ok(run.train(&[]));
    ok(run.train(&["--resume", "--train.max_epochs", "4"]));
    let resumed = fs::read(run.root.join("m/model.json")).unwrap();
    let log = fs::read_to_string(run.root.join("m/model.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let straight = Run::new();
    ok(straight.train(&["--train.max_epochs", "4"]));
    assert_eq!(fs::read(straight.root.join("m/model.json")).unwrap(), resumed);
}

#[test]
fn resume_without_state_is_a_data_error() {
    let run = Run::new();
    let o = run.train(&["--resume"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.state.json"));
}

#[test]
fn missing_labels_file_names_the_file() {
    let run = Run::new();
    fs::remove_file(run.root.join("data/train/labels.csv")).unwrap();
    let o = run.train(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("labels.csv"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_3() {
    let run = Run::new();
    let o = run.train(&["--train.learning_rate", "1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("numerical"));
}

#[test]
fn segment_and_eval_round_trip() {
    let run = Run::new();
    ok(run.train(&[]));
    ok(tanseg(&["segment", "--model", &run.p("m/model.json"), "--data", &run.p("data/test"), "--out", &run.p("pred"), "--dump-dtw"]));
    let test = load_dataset(&run.root.join("data/test")).unwrap();
    let segs = fs::read_to_string(run.root.join("pred/segments.csv")).unwrap();
    for item in test.iter() {
        let id = item.instance.id();
        assert!(segs.lines().any(|l| l.starts_with(&format!("{id},1,"))), "{id}");
        assert!(run.root.join("pred/points").join(format!("{id}.pred.csv")).is_file());
    }
    let instances = fs::read_to_string(run.root.join("pred/instances.csv")).unwrap();
    assert_eq!(instances.lines().count(), test.len() + 1);
    for line in instances.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let dumped = run.root.join("pred/dtw").join(format!("{}.R.csv", f[0])).is_file();
        assert_eq!(dumped, f[2] == "1");
    }

    let o = ok(tanseg(&["eval", "--pred", &run.p("pred"), "--data", &run.p("data/test")]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("point F1"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.root.join("pred/report.json")).unwrap()).unwrap();
    let n_points = test.len() * 120;
    assert_eq!(report["n_points"], n_points);
    let c = &report["point"];
    let total = ["tp", "fp", "fn", "tn"].iter().map(|k| c[k].as_u64().unwrap()).sum::<u64>();
    assert_eq!(total as usize, n_points);
}

#[test]
fn segment_rejects_dimension_mismatch() {
    let run = Run::new();
    ok(run.train(&[]));
    let other = run.root.join("other");
    ok(tanseg_tiny(&["gen", "--out", &s(&other), "--synth.d_vars", "2"]));
    let o = tanseg(&["segment", "--model", &run.p("m/model.json"), "--data", &s(&other.join("test")), "--out", &run.p("pred")]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("expected 3") && err.contains("found 2"), "{err}");
}

#[test]
fn segment_empty_split_writes_headers() {
    let run = Run::new();
    ok(run.train(&[]));
    let empty = run.root.join("empty");
    fs::create_dir_all(&empty).unwrap();
    fs::write(empty.join("labels.csv"), "id,label\n").unwrap();
    ok(tanseg(&["segment", "--model", &run.p("m/model.json"), "--data", &s(&empty), "--out", &run.p("pe")]));
    assert_eq!(fs::read_to_string(run.root.join("pe/segments.csv")).unwrap(), "id,start,end,label,global_score\n");
    assert_eq!(
        fs::read_to_string(run.root.join("pe/instances.csv")).unwrap(),
        "id,global_score,predicted_label,pseudo_label\n"
    );
}

/// Writes a prediction directory for `data` from per-instance point vectors.
fn fake_predictions(pred: &Path, data: &Path, make: impl Fn(&[bool]) -> Vec<bool>) {
    let ds = load_dataset(data).unwrap();
    fs::create_dir_all(pred.join("points")).unwrap();
    let mut inst = String::from("id,global_score,predicted_label,pseudo_label\n");
    for item in ds.iter() {
        let points = make(item.point_labels.as_ref().unwrap());
        let any = points.iter().any(|&p| p);
        inst.push_str(&format!("{},{},{},\n", item.instance.id(), if any { 0.9 } else { 0.1 }, u8::from(any)));
        write_binary_series(&pred.join("points").join(format!("{}.pred.csv", item.instance.id())), &points).unwrap();
    }
    fs::write(pred.join("instances.csv"), inst).unwrap();
}

fn report(pred: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(pred.join("report.json")).unwrap()).unwrap()
}

#[test]
fn eval_perfect_and_all_normal_predictions() {
    let run = Run::new();
    let data = run.root.join("data/test");
    let perfect = run.root.join("perfect");
    fake_predictions(&perfect, &data, |t| t.to_vec());
    ok(tanseg(&["eval", "--pred", &s(&perfect), "--data", &s(&data)]));
    let r = report(&perfect);
    assert_eq!((r["point"]["f1"].as_f64(), r["point"]["iou"].as_f64()), (Some(1.0), Some(1.0)));
    assert_eq!(r["instance"]["f1"].as_f64(), Some(1.0));
    assert_eq!(r["instance_auroc"].as_f64(), Some(1.0));

    let normal = run.root.join("normal");
    fake_predictions(&normal, &data, |t| vec![false; t.len()]);
    ok(tanseg(&["eval", "--pred", &s(&normal), "--data", &s(&data)]));
    assert_eq!(report(&normal)["point"]["f1"].as_f64(), Some(0.0));
}

#[test]
fn eval_matches_hand_computed_ten_point_case() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(data.join("instances")).unwrap();
    fs::create_dir_all(data.join("point_labels")).unwrap();
    let rows: String = (0..10).map(|t| format!("{t},{}\n", t as f64 * 0.1)).collect();
    fs::write(data.join("instances/a.csv"), format!("t,f0\n{rows}")).unwrap();
    fs::write(data.join("labels.csv"), "id,label\na,1\n").unwrap();
    let truth = [0, 0, 1, 1, 1, 1, 0, 0, 0, 0].map(|b| b == 1);
    let pred = [0, 0, 0, 1, 1, 1, 1, 1, 0, 0].map(|b| b == 1);
    write_binary_series(&data.join("point_labels/a.csv"), &truth).unwrap();
    let out = dir.path().join("pred");
    fs::create_dir_all(out.join("points")).unwrap();
    write_binary_series(&out.join("points/a.pred.csv"), &pred).unwrap();
    fs::write(out.join("instances.csv"), "id,global_score,predicted_label,pseudo_label\na,0.8,1,01\n").unwrap();

    ok(tanseg(&["eval", "--pred", &s(&out), "--data", &s(&data)]));
    let r = report(&out);
    let p = &r["point"];
    // tp 3 (t=3..5), fp 2 (t=6,7), fn 1 (t=2), tn 4
    assert_eq!([&p["tp"], &p["fp"], &p["fn"], &p["tn"]].map(|v| v.as_u64().unwrap()), [3, 2, 1, 4]);
    assert_eq!(p["precision"].as_f64(), Some(0.6));
    assert_eq!(p["recall"].as_f64(), Some(0.75));
    assert_eq!(p["f1"].as_f64(), Some(2.0 * 0.6 * 0.75 / (0.6 + 0.75)));
    assert_eq!(p["iou"].as_f64(), Some(0.5));
    assert!(r["instance_auroc"].is_null());
}

#[test]
fn eval_without_ground_truth_exits_2() {
    let run = Run::new();
    let data = run.root.join("data/test");
    let pred = run.root.join("pred");
    fake_predictions(&pred, &data, |t| t.to_vec());
    fs::remove_dir_all(data.join("point_labels")).unwrap();
    let o = tanseg(&["eval", "--pred", &s(&pred), "--data", &s(&data)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ground truth"), "{}", stderr(&o));
}

#[test]
fn grid_reports_every_cell() {
    let run = Run::new();
    let out = run.root.join("grid.csv");
    ok(tanseg_tiny(&[
        "grid",
        "--data",
        &run.p("data"),
        "--out",
        &s(&out),
        "--grid.seq_len",
        "2,4",
        "--grid.tau",
        "0.5",
        "--grid.beta",
        "0.1,1",
        "--train.max_epochs",
        "1",
    ]));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "seq_len,tau,beta,valid_f1,valid_loss,best_epoch");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("4,0.5,1.0,"));
}
