//! Loss assembly, gradients through the scorer and soft-DTW, Adam updates and
//! the epoch loop with validation-driven model selection.
//!
//! Per instance, the loss is
//!
//! ```text
//! L = BCE(s_*, y) + max(0, sdtw(z+, X)/T - sdtw(z-, X)/T + β)
//! ```
//!
//! where `z+ = y·φ_L(m)` and `z- = (1-y)·φ_L(m)` are re-derived from the
//! current model at every step. Minibatch gradients are the mean over the
//! batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtw::{build_cost_matrix, cost_grad_to_scores, sdtw_backward, sdtw_forward};
use crate::error::{Error, Result};
use crate::eval::{candidate_thresholds, instance_metrics};
use crate::model::{Gradients, ScorerModel};
use crate::pseudolabel::{masked_labels, normalize_activation, phi, SequentialLabel};
use crate::series::{Dataset, TemporalInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Pseudo-label length L.
    pub seq_len: usize,
    /// Pseudo-labelling threshold on the normalized activation map.
    pub tau: f64,
    /// Margin of the alignment hinge.
    pub beta: f64,
    /// Soft-DTW smoothing.
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 8,
            tau: 0.5,
            beta: 0.5,
            gamma: 0.1,
            learning_rate: 2e-3,
            batch_size: 8,
            max_epochs: 50,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 {
            return fail("train: seq_len must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail(format!("train: tau {} not in (0,1)", self.tau));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("train: beta {} must be >= 0", self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("train: gamma {} must be > 0", self.gamma));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("train: learning_rate {} invalid", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("train: batch_size and max_epochs must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub classification: f64,
    pub alignment: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(classification: f64, alignment: f64) -> Self {
        Self {
            classification,
            alignment,
            total: classification + alignment,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.classification.is_finite() && self.alignment.is_finite() && self.total.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedThreshold {
    pub tau_star: f64,
    pub validation_f1: f64,
    /// Validation labels were single-class; the threshold predicts all-normal.
    pub single_class: bool,
}

/// Binary cross-entropy of the global score against the instance label.
pub fn classification_loss(s_global: f64, y: bool) -> f64 {
    if y {
        -s_global.ln()
    } else {
        -(1.0 - s_global).ln()
    }
}

fn classification_grad(s_global: f64, y: bool) -> f64 {
    if y {
        -1.0 / s_global
    } else {
        1.0 / (1.0 - s_global)
    }
}

/// `max(0, pos - neg + beta)` on length-normalized alignment costs.
pub fn margin_hinge(pos_per_point: f64, neg_per_point: f64, beta: f64) -> f64 {
    (pos_per_point - neg_per_point + beta).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLoss {
    pub value: f64,
    /// Gradient of `value` with respect to each local score.
    pub grad_local: Vec<f64>,
    pub active: bool,
}

/// Margin alignment loss between the positive and negative pseudo-labels.
/// When both labels are all-zero the two alignment costs coincide and the
/// term is reported as zero.
pub fn alignment_loss(
    local_scores: &[f64],
    pos: &SequentialLabel,
    neg: &SequentialLabel,
    beta: f64,
    gamma: f64,
) -> Result<AlignmentLoss> {
    let t_len = local_scores.len();
    let inactive = || AlignmentLoss {
        value: 0.0,
        grad_local: vec![0.0; t_len],
        active: false,
    };
    if pos.len() > t_len || neg.len() > t_len {
        return Err(Error::Infeasible {
            labels: pos.len().max(neg.len()),
            length: t_len,
        });
    }
    if pos.is_all_zero() && neg.is_all_zero() && pos.len() == neg.len() {
        return Ok(inactive());
    }
    let pos_costs = build_cost_matrix(pos, local_scores)?;
    let neg_costs = build_cost_matrix(neg, local_scores)?;
    let (pos_value, mut pos_ws) = sdtw_forward(&pos_costs, gamma)?;
    let (neg_value, mut neg_ws) = sdtw_forward(&neg_costs, gamma)?;
    let n = t_len as f64;
    let value = margin_hinge(pos_value / n, neg_value / n, beta);
    if value <= 0.0 {
        return Ok(inactive());
    }
    let pos_grad = cost_grad_to_scores(pos, local_scores, &sdtw_backward(&pos_costs, &mut pos_ws)?);
    let neg_grad = cost_grad_to_scores(neg, local_scores, &sdtw_backward(&neg_costs, &mut neg_ws)?);
    let grad_local = pos_grad.iter().zip(&neg_grad).map(|(p, q)| (p - q) / n).collect();
    Ok(AlignmentLoss {
        value,
        grad_local,
        active: true,
    })
}

/// Which loss branches contribute to the returned gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    None,
    Full,
    ClassificationOnly,
    AlignmentOnly,
}

#[derive(Debug, Clone)]
pub struct InstanceOutcome {
    pub report: LossReport,
    pub gradients: Option<Gradients>,
    pub pseudo_label: SequentialLabel,
    pub global_score: f64,
}

/// Loss (and optionally gradients) for one weakly labeled instance.
pub fn instance_objective(
    model: &ScorerModel,
    instance: &TemporalInstance,
    y: bool,
    config: &TrainConfig,
    mode: GradMode,
) -> Result<InstanceOutcome> {
    let pass = model.forward(instance)?;
    let raw = model.activation_raw(&pass.tape)?;
    let bits = phi(&normalize_activation(&raw), config.seq_len, config.tau)?;
    let (pos, neg) = masked_labels(&bits, y);

    let s_global = pass.scores.global;
    let l_c = classification_loss(s_global, y);
    let align = alignment_loss(&pass.scores.local, &pos, &neg, config.beta, config.gamma)?;
    let report = LossReport::new(l_c, align.value);

    let gradients = match mode {
        GradMode::None => None,
        _ => {
            let use_c = matches!(mode, GradMode::Full | GradMode::ClassificationOnly);
            let use_a = matches!(mode, GradMode::Full | GradMode::AlignmentOnly);
            let g_global = if use_c { classification_grad(s_global, y) } else { 0.0 };
            let g_local = if use_a {
                align.grad_local
            } else {
                vec![0.0; instance.length()]
            };
            Some(model.backward(&pass.tape, &g_local, g_global)?)
        }
    };
    Ok(InstanceOutcome {
        report,
        gradients,
        pseudo_label: bits,
        global_score: s_global,
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &ScorerModel, learning_rate: f64) -> Self {
        let shapes: Vec<Vec<f64>> = model.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.clone(),
            v: shapes,
        }
    }

    pub fn update(&mut self, model: &mut ScorerModel, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in model
            .parameters_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Picks the instance-level threshold on global scores that maximizes F1,
/// breaking ties toward the smallest threshold. Single-class labels yield
/// the all-normal threshold with `single_class` set.
pub fn select_threshold(global_scores: &[f64], labels: &[bool]) -> Result<SelectedThreshold> {
    if global_scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "threshold selection",
            expected: labels.len(),
            found: global_scores.len(),
        });
    }
    let candidates = candidate_thresholds(global_scores);
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        log::warn!("validation labels are single-class; using the all-normal threshold");
        let tau_star = *candidates.last().expect("nonempty");
        return Ok(SelectedThreshold {
            tau_star,
            validation_f1: instance_metrics(global_scores, labels, tau_star)?.f1,
            single_class: true,
        });
    }
    let mut best = SelectedThreshold {
        tau_star: candidates[0],
        validation_f1: f64::NEG_INFINITY,
        single_class: false,
    };
    for &thr in &candidates {
        let f1 = instance_metrics(global_scores, labels, thr)?.f1;
        if f1 > best.validation_f1 {
            best.tau_star = thr;
            best.validation_f1 = f1;
        }
    }
    Ok(best)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train: LossReport,
    pub valid_loss: f64,
    pub valid_f1: f64,
    pub tau_star: f64,
    /// Positive training instances whose pseudo-label came out all-zero.
    pub empty_positive_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub model: ScorerModel,
    pub threshold: SelectedThreshold,
    pub valid_loss: f64,
}

/// Everything needed to continue an interrupted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ScorerModel,
    pub optimizer: Adam,
    pub epochs_completed: usize,
    pub since_improvement: usize,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: ScorerModel,
    pub threshold: SelectedThreshold,
    pub best_epoch: usize,
    pub history: Vec<EpochReport>,
}

pub struct Trainer {
    state: TrainState,
}

impl Trainer {
    pub fn new(model: ScorerModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&model, config.learning_rate);
        Ok(Self {
            state: TrainState {
                config,
                model,
                optimizer,
                epochs_completed: 0,
                since_improvement: 0,
                best: None,
                history: Vec::new(),
            },
        })
    }

    /// Resumes from a saved state; `max_epochs` may be raised to extend the run.
    pub fn from_state(mut state: TrainState, max_epochs: Option<usize>) -> Result<Self> {
        if let Some(n) = max_epochs {
            state.config.max_epochs = n;
        }
        state.config.validate()?;
        Ok(Self { state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// True once `max_epochs` is reached or patience ran out.
    pub fn is_finished(&self) -> bool {
        let s = &self.state;
        s.epochs_completed >= s.config.max_epochs || (s.best.is_some() && s.since_improvement >= s.config.patience)
    }

    /// Runs epochs until `max_epochs` or early stopping.
    pub fn run(&mut self, train_set: &Dataset, valid_set: &Dataset) -> Result<TrainOutcome> {
        self.check_inputs(train_set, valid_set)?;
        while !self.is_finished() {
            self.epoch(train_set, valid_set)?;
        }
        self.outcome()
    }

    pub fn outcome(&self) -> Result<TrainOutcome> {
        let best = self
            .state
            .best
            .as_ref()
            .ok_or_else(|| Error::Invalid("no completed epoch".into()))?;
        Ok(TrainOutcome {
            model: best.model.clone(),
            threshold: best.threshold,
            best_epoch: best.epoch,
            history: self.state.history.clone(),
        })
    }

    /// Rejects empty splits, dimension mismatches and series shorter than `L`.
    pub fn check_inputs(&self, train_set: &Dataset, valid_set: &Dataset) -> Result<()> {
        if train_set.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        if valid_set.is_empty() {
            return Err(Error::EmptySplit("valid"));
        }
        let d_in = self.state.model.architecture().d_in;
        for ds in [train_set, valid_set] {
            for item in ds.iter() {
                let inst = &item.instance;
                if inst.d_vars() != d_in {
                    return Err(Error::DimensionMismatch {
                        context: "instance variables vs model input",
                        expected: d_in,
                        found: inst.d_vars(),
                    });
                }
                if inst.length() < self.state.config.seq_len {
                    return Err(Error::Infeasible {
                        labels: self.state.config.seq_len,
                        length: inst.length(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Trains one epoch, then validates and updates the best snapshot.
    pub fn epoch(&mut self, train_set: &Dataset, valid_set: &Dataset) -> Result<EpochReport> {
        let epoch = self.state.epochs_completed + 1;
        let config = self.state.config.clone();
        let items = train_set.items();

        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut sum = LossReport::default();
        let mut empty_positive = 0;
        for batch in order.chunks(config.batch_size) {
            let model = &self.state.model;
            let outcomes: Vec<Result<InstanceOutcome>> = batch
                .par_iter()
                .map(|&i| instance_objective(model, &items[i].instance, items[i].label, &config, GradMode::Full))
                .collect();
            let mut grads = Gradients::zeros_like(model);
            for (&i, outcome) in batch.iter().zip(outcomes) {
                let outcome = outcome?;
                let r = outcome.report;
                let g = outcome.gradients.as_ref().expect("full mode returns gradients");
                if !r.is_finite() || !g.is_finite() {
                    return Err(Error::Numerical(format!(
                        "epoch {epoch}, instance {}: loss_c={} loss_a={} total={} global_score={} \
                         pseudo_label={} max|grad|={}",
                        items[i].instance.id(),
                        r.classification,
                        r.alignment,
                        r.total,
                        outcome.global_score,
                        outcome.pseudo_label,
                        g.max_abs()
                    )));
                }
                if items[i].label && outcome.pseudo_label.is_all_zero() {
                    empty_positive += 1;
                }
                sum.classification += r.classification;
                sum.alignment += r.alignment;
                grads.add_assign(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            self.state.optimizer.update(&mut self.state.model, &grads);
        }
        let n = items.len() as f64;
        let train_loss = LossReport::new(sum.classification / n, sum.alignment / n);

        let (threshold, valid_loss) = validate(&self.state.model, valid_set, &config)?;
        let report = EpochReport {
            epoch,
            train: train_loss,
            valid_loss,
            valid_f1: threshold.validation_f1,
            tau_star: threshold.tau_star,
            empty_positive_labels: empty_positive,
        };
        if empty_positive > 0 {
            log::debug!("epoch {epoch}: {empty_positive} positive instances had an all-zero pseudo-label");
        }
        log::info!(
            "epoch {epoch}: loss_c={:.4} loss_a={:.4} loss={:.4} valid_f1={:.4} tau*={:.4}",
            train_loss.classification,
            train_loss.alignment,
            train_loss.total,
            threshold.validation_f1,
            threshold.tau_star
        );

        let improved = match &self.state.best {
            None => true,
            Some(b) => {
                threshold.validation_f1 > b.threshold.validation_f1
                    || (threshold.validation_f1 == b.threshold.validation_f1 && valid_loss < b.valid_loss)
            }
        };
        if improved {
            self.state.best = Some(BestSnapshot {
                epoch,
                model: self.state.model.clone(),
                threshold,
                valid_loss,
            });
            self.state.since_improvement = 0;
        } else {
            self.state.since_improvement += 1;
        }
        self.state.epochs_completed = epoch;
        self.state.history.push(report.clone());
        Ok(report)
    }
}

/// Threshold selection on validation global scores, plus the mean validation loss.
pub fn validate(model: &ScorerModel, valid_set: &Dataset, config: &TrainConfig) -> Result<(SelectedThreshold, f64)> {
    let outcomes: Vec<InstanceOutcome> = valid_set
        .items()
        .par_iter()
        .map(|it| instance_objective(model, &it.instance, it.label, config, GradMode::None))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = outcomes.iter().map(|o| o.global_score).collect();
    let loss = outcomes.iter().map(|o| o.report.total).sum::<f64>() / outcomes.len().max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("validation loss is {loss}")));
    }
    Ok((select_threshold(&scores, &valid_set.labels())?, loss))
}

/// Trains `model` and returns the best-validation parameters.
pub fn train(model: ScorerModel, train_set: &Dataset, valid_set: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(model, config.clone())?.run(train_set, valid_set)
}
