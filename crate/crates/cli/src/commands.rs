//! One function per subcommand. Each validates the whole configuration and
//! its required paths before touching the filesystem.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tanseg::dtw::{build_cost_matrix, sdtw_backward, sdtw_forward};
use tanseg::eval::{auroc, best_threshold_metrics, point_metrics, MetricReport};
use tanseg::inference::{
    segment_dataset, write_instances_csv, write_point_predictions, write_segments_csv, SegmentOutcome, SegmentParams,
};
use tanseg::model::ScorerModel;
use tanseg::series::{
    generate_synthetic, load_dataset, read_binary_series, save_dataset, stratified_split, Dataset, Normalization,
};
use tanseg::training::{EpochReport, TrainState, Trainer};

use crate::config::RunConfig;
use crate::CliError;

pub const SEGMENTS_CSV: &str = "segments.csv";
pub const INSTANCES_CSV: &str = "instances.csv";
pub const POINTS_DIR: &str = "points";
pub const DTW_DIR: &str = "dtw";
pub const REPORT_JSON: &str = "report.json";

fn required<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    slot.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag} (or io.{flag} in the config)")))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSummary {
    /// (instances, anomalous) per split, in train/valid/test order.
    pub counts: [(usize, usize); 3],
}

/// Generates a synthetic set, splits it, fits normalization on train and
/// writes `train/`, `valid/`, `test/` plus the effective `config.json`.
pub fn gen(cfg: &RunConfig) -> anyhow::Result<GenSummary> {
    cfg.validate()?;
    let out = required(&cfg.io.out, "out")?;
    let full = generate_synthetic(&cfg.synth, cfg.seed)?;
    let mut splits = stratified_split(&full, cfg.split.ratio, cfg.seed)?;
    let stats = if splits[0].is_empty() {
        None
    } else {
        Some(Normalization::fit(&splits[0])?)
    };
    create_dir(out)?;
    let mut counts = [(0, 0); 3];
    for (i, ds) in splits.iter_mut().enumerate() {
        ds.set_normalization(stats.clone());
        save_dataset(ds, &out.join(ds.split().as_str()))?;
        counts[i] = (ds.len(), ds.iter().filter(|it| it.label).count());
    }
    fs::write(out.join("config.json"), cfg.to_flat_json())
        .with_context(|| format!("cannot write {}", out.join("config.json").display()))?;
    for (ds, (n, a)) in splits.iter().zip(counts) {
        println!("{:<6} {n:>5} instances {a:>4} anomalous", ds.split().as_str());
    }
    Ok(GenSummary { counts })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Everything `segment` needs besides the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSidecar {
    pub tau_star: f64,
    pub validation_f1: f64,
    pub single_class: bool,
    pub best_epoch: usize,
    pub seq_len: usize,
    pub tau: f64,
    pub gamma: f64,
    /// Statistics the training inputs were normalized with.
    pub normalization: Option<Normalization>,
}

pub fn sidecar_path(model: &Path, suffix: &str) -> PathBuf {
    model.with_extension(suffix)
}

pub fn log_path(model: &Path) -> PathBuf {
    sidecar_path(model, "log.csv")
}

pub fn threshold_path(model: &Path) -> PathBuf {
    sidecar_path(model, "threshold.json")
}

pub fn state_path(model: &Path) -> PathBuf {
    sidecar_path(model, "state.json")
}

/// Normalization from the train manifest, or fitted on train when absent.
fn normalized_splits(data: &Path) -> anyhow::Result<(Dataset, Dataset, Option<Normalization>)> {
    let train = load_dataset(&data.join("train"))?;
    let valid = load_dataset(&data.join("valid"))?;
    let stats = match train.normalization() {
        Some(s) => Some(s.clone()),
        None if !train.is_empty() => Some(Normalization::fit(&train)?),
        None => None,
    };
    Ok(match &stats {
        Some(s) => (train.normalized(s)?, valid.normalized(s)?, stats),
        None => (train, valid, None),
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub sidecar: ThresholdSidecar,
    pub epochs: usize,
}

/// Trains on `<data>/train` with threshold selection on `<data>/valid`.
/// The state sidecar is rewritten after every epoch so a run can resume.
pub fn train(cfg: &RunConfig, resume: bool) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let data = required(&cfg.io.data, "data")?;
    let model_path = required(&cfg.io.model, "model")?;
    let (train_set, valid_set, stats) = normalized_splits(data)?;
    let train_cfg = cfg.train_config();

    let mut trainer = if resume {
        let state: TrainState = read_json(&state_path(model_path))
            .with_context(|| format!("cannot resume from {}", state_path(model_path).display()))?;
        Trainer::from_state(state, Some(train_cfg.max_epochs))?
    } else {
        let d_in = train_set.d_vars().ok_or(tanseg::Error::EmptySplit("train"))?;
        let model = ScorerModel::new(cfg.model.architecture(d_in), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        Trainer::new(model, train_cfg)?
    };
    trainer.check_inputs(&train_set, &valid_set)?;

    if let Some(parent) = model_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    while !trainer.is_finished() {
        trainer.epoch(&train_set, &valid_set)?;
        write_json(&state_path(model_path), trainer.state())?;
        write_log(&log_path(model_path), &trainer.state().history)?;
    }
    write_log(&log_path(model_path), &trainer.state().history)?;

    let outcome = trainer.outcome()?;
    let used = &trainer.state().config;
    let sidecar = ThresholdSidecar {
        tau_star: outcome.threshold.tau_star,
        validation_f1: outcome.threshold.validation_f1,
        single_class: outcome.threshold.single_class,
        best_epoch: outcome.best_epoch,
        seq_len: used.seq_len,
        tau: used.tau,
        gamma: used.gamma,
        normalization: stats,
    };
    outcome.model.save(model_path)?;
    write_json(&threshold_path(model_path), &sidecar)?;
    println!(
        "trained {} epochs; best epoch {} valid F1 {:.4} tau* {:.6}",
        trainer.state().epochs_completed,
        sidecar.best_epoch,
        sidecar.validation_f1,
        sidecar.tau_star
    );
    Ok(TrainSummary {
        epochs: trainer.state().epochs_completed,
        sidecar,
    })
}

/// Per-epoch CSV. `best_epoch` and `best_valid_f1` track the snapshot kept
/// so far; `best_valid_f1` never decreases.
fn write_log(path: &Path, history: &[EpochReport]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record([
        "epoch",
        "loss_c",
        "loss_a",
        "loss",
        "valid_loss",
        "valid_f1",
        "tau_star",
        "empty_positive_labels",
        "best_epoch",
        "best_valid_f1",
    ])?;
    let mut best: Option<&EpochReport> = None;
    for e in history {
        let improved = best.is_none_or(|b| e.valid_f1 > b.valid_f1 || (e.valid_f1 == b.valid_f1 && e.valid_loss < b.valid_loss));
        if improved {
            best = Some(e);
        }
        let b = best.expect("set above");
        w.write_record([
            e.epoch.to_string(),
            e.train.classification.to_string(),
            e.train.alignment.to_string(),
            e.train.total.to_string(),
            e.valid_loss.to_string(),
            e.valid_f1.to_string(),
            e.tau_star.to_string(),
            e.empty_positive_labels.to_string(),
            b.epoch.to_string(),
            b.valid_f1.to_string(),
        ])?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSummary {
    pub instances: usize,
    pub predicted_anomalous: usize,
    pub failed: usize,
}

/// Segments every instance under `<data>` and writes `segments.csv`,
/// `instances.csv` and `points/<id>.pred.csv` into `<pred>`.
pub fn segment(cfg: &RunConfig, dump_dtw: bool) -> anyhow::Result<SegmentSummary> {
    cfg.validate()?;
    let model_path = required(&cfg.io.model, "model")?;
    let data = required(&cfg.io.data, "data")?;
    let out = required(&cfg.io.pred, "out")?;

    let model = ScorerModel::load(model_path)?;
    let sidecar: ThresholdSidecar = read_json(&threshold_path(model_path))?;
    let raw = load_dataset(data)?;
    let d_in = model.architecture().d_in;
    if let Some(found) = raw.d_vars().filter(|&d| d != d_in) {
        return Err(tanseg::Error::DimensionMismatch {
            context: "checkpoint input width vs data variables",
            expected: d_in,
            found,
        }
        .into());
    }
    let dataset = match &sidecar.normalization {
        Some(s) => raw.normalized(s)?,
        None => raw.normalized_by_manifest()?,
    };
    let params = SegmentParams {
        seq_len: sidecar.seq_len,
        tau: sidecar.tau,
        tau_star: sidecar.tau_star,
    };

    let mut ok: Vec<(String, SegmentOutcome)> = Vec::new();
    let mut first_err = None;
    let mut failed = 0;
    for (id, res) in segment_dataset(&model, &dataset, &params) {
        match res {
            Ok(o) => ok.push((id, o)),
            Err(e) => {
                eprintln!("instance {id}: {e}");
                failed += 1;
                first_err.get_or_insert(anyhow::Error::from(e).context(format!("segmenting instance {id}")));
            }
        }
    }

    create_dir(&out.join(POINTS_DIR))?;
    write_segments_csv(&out.join(SEGMENTS_CSV), &ok)?;
    write_instances_csv(&out.join(INSTANCES_CSV), &ok)?;
    write_point_predictions(&out.join(POINTS_DIR), &ok)?;
    if dump_dtw {
        let dir = out.join(DTW_DIR);
        create_dir(&dir)?;
        for (id, o) in &ok {
            let Some(bits) = &o.pseudo_label else { continue };
            let item = dataset.iter().find(|it| it.instance.id() == id).expect("segmented ids come from the dataset");
            let pass = model.forward(&item.instance)?;
            let costs = build_cost_matrix(bits, &pass.scores.local)?;
            let (_, mut ws) = sdtw_forward(&costs, sidecar.gamma)?;
            sdtw_backward(&costs, &mut ws)?;
            ws.dump(&dir, id)?;
        }
    }

    let summary = SegmentSummary {
        instances: ok.len() + failed,
        predicted_anomalous: ok.iter().filter(|(_, o)| o.predicted_label).count(),
        failed,
    };
    println!(
        "segmented {} instances, {} predicted anomalous, {} failed",
        summary.instances, summary.predicted_anomalous, summary.failed
    );
    match first_err {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_instances: usize,
    pub n_points: usize,
    /// Pooled over every point of every instance.
    pub point: MetricReport,
    /// Predicted instance labels against the weak labels.
    pub instance: MetricReport,
    /// `None` when the ground truth has a single class.
    pub instance_auroc: Option<f64>,
    /// Best F1 over all thresholds on the global scores.
    pub instance_best: MetricReport,
    pub instance_best_threshold: f64,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<22} {:>10}", "metric", "value")?;
        let rows = [
            ("point precision", self.point.precision),
            ("point recall", self.point.recall),
            ("point F1", self.point.f1),
            ("point IoU", self.point.iou),
            ("instance precision", self.instance.precision),
            ("instance recall", self.instance.recall),
            ("instance F1", self.instance.f1),
            ("instance F1 (best)", self.instance_best.f1),
        ];
        for (name, v) in rows {
            writeln!(f, "{name:<22} {v:>10.4}")?;
        }
        match self.instance_auroc {
            Some(a) => writeln!(f, "{:<22} {a:>10.4}", "instance AUROC"),
            None => writeln!(f, "{:<22} {:>10}", "instance AUROC", "n/a"),
        }
    }
}

struct InstanceRow {
    global_score: f64,
    predicted: bool,
}

fn read_instances(path: &Path) -> anyhow::Result<std::collections::HashMap<String, InstanceRow>> {
    let data_err = |row: usize, m: String| CliError::Data(format!("{} (row {row}): {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = std::collections::HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| data_err(row, e.to_string()))?;
        let (Some(id), Some(score), Some(pred)) = (rec.get(0), rec.get(1), rec.get(2)) else {
            return Err(data_err(row, "expected id,global_score,predicted_label,...".into()).into());
        };
        let global_score = score.parse().map_err(|_| data_err(row, format!("bad score {score:?}")))?;
        let predicted = match pred {
            "0" => false,
            "1" => true,
            other => return Err(data_err(row, format!("non-binary label {other:?}")).into()),
        };
        out.insert(id.to_string(), InstanceRow { global_score, predicted });
    }
    Ok(out)
}

/// Compares `<pred>` against the point labels under `<data>`. The report is
/// printed and written to `report` (default `<pred>/report.json`).
pub fn eval(cfg: &RunConfig, report: Option<PathBuf>) -> anyhow::Result<EvalReport> {
    cfg.validate()?;
    let pred = required(&cfg.io.pred, "pred")?;
    let data = required(&cfg.io.data, "data")?;
    let dataset = load_dataset(data)?;
    let rows = read_instances(&pred.join(INSTANCES_CSV))?;

    let (mut p_pred, mut p_true) = (Vec::new(), Vec::new());
    let (mut scores, mut i_pred, mut i_true) = (Vec::new(), Vec::new(), Vec::new());
    for item in dataset.iter() {
        let id = item.instance.id();
        let truth = item.point_labels.as_ref().ok_or_else(|| {
            CliError::Data(format!(
                "no point-level ground truth for instance {id} (expected {})",
                data.join("point_labels").join(format!("{id}.csv")).display()
            ))
        })?;
        let row = rows.get(id).ok_or_else(|| {
            CliError::Data(format!("instance {id} missing from {}", pred.join(INSTANCES_CSV).display()))
        })?;
        let points = read_binary_series(&pred.join(POINTS_DIR).join(format!("{id}.pred.csv")))?;
        if points.len() != truth.len() {
            return Err(CliError::Data(format!(
                "instance {id}: {} predicted points vs {} labelled points",
                points.len(),
                truth.len()
            ))
            .into());
        }
        p_pred.extend(points);
        p_true.extend(truth);
        scores.push(row.global_score);
        i_pred.push(row.predicted);
        i_true.push(item.label);
    }

    let (instance_best, instance_best_threshold) = best_threshold_metrics(&scores, &i_true)?;
    let result = EvalReport {
        n_instances: dataset.len(),
        n_points: p_true.len(),
        point: point_metrics(&p_pred, &p_true)?,
        instance: point_metrics(&i_pred, &i_true)?,
        instance_auroc: auroc(&scores, &i_true).ok(),
        instance_best,
        instance_best_threshold,
    };
    let path = report.unwrap_or_else(|| pred.join(REPORT_JSON));
    write_json(&path, &result)?;
    print!("{result}");
    Ok(result)
}

// ---------------------------------------------------------------------------
// grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub seq_len: usize,
    pub tau: f64,
    pub beta: f64,
    pub valid_f1: f64,
    pub valid_loss: f64,
    pub best_epoch: usize,
}

/// Trains one model per grid cell from the same initialization and reports
/// the best validation F1 of each.
pub fn grid(cfg: &RunConfig) -> anyhow::Result<Vec<GridCell>> {
    cfg.validate()?;
    let data = required(&cfg.io.data, "data")?;
    let (train_set, valid_set, _) = normalized_splits(data)?;
    let d_in = train_set.d_vars().ok_or(tanseg::Error::EmptySplit("train"))?;
    let init = ScorerModel::new(cfg.model.architecture(d_in), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;

    println!("{:>4} {:>6} {:>6} {:>9} {:>10} {:>6}", "L", "tau", "beta", "valid_F1", "valid_loss", "epoch");
    let mut cells = Vec::new();
    for train_cfg in cfg.grid_cells() {
        let mut trainer = Trainer::new(init.clone(), train_cfg.clone())?;
        let outcome = trainer
            .run(&train_set, &valid_set)
            .with_context(|| format!("grid cell L={} tau={} beta={}", train_cfg.seq_len, train_cfg.tau, train_cfg.beta))?;
        let best = trainer.state().best.as_ref().expect("a finished run has a best epoch");
        let cell = GridCell {
            seq_len: train_cfg.seq_len,
            tau: train_cfg.tau,
            beta: train_cfg.beta,
            valid_f1: outcome.threshold.validation_f1,
            valid_loss: best.valid_loss,
            best_epoch: outcome.best_epoch,
        };
        println!(
            "{:>4} {:>6} {:>6} {:>9.4} {:>10.4} {:>6}",
            cell.seq_len, cell.tau, cell.beta, cell.valid_f1, cell.valid_loss, cell.best_epoch
        );
        cells.push(cell);
    }
    if let Some(path) = &cfg.io.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
        for c in &cells {
            w.serialize(c)?;
        }
        w.flush()?;
    }
    Ok(cells)
}
