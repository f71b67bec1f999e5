//! Dilated causal CNN scorer.
//!
//! Layer `i` (0-based) is a causal 1-D convolution with filter size `k` and
//! dilation `k^i`, left zero-padded so the output keeps length `T`. ReLU sits
//! between layers; the last layer is linear and its columns are the feature
//! vectors `h_t`. Scores are `s_t = sigmoid(w·h_t)` and
//! `s_* = sigmoid(w·pool(h))`.
//!
//! The backward pass is hand-written for this fixed architecture and replays
//! a [`Tape`] recorded by [`ScorerModel::forward`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TemporalInstance;

pub const DEFAULT_CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Avg,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" => Ok(Pooling::Avg),
            other => Err(Error::Config(format!("unknown pooling mode {other:?} (max|avg)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input variables D.
    pub d_in: usize,
    /// Hidden and output channels d.
    pub d_hidden: usize,
    pub filter_size: usize,
    pub n_layers: usize,
    pub pooling: Pooling,
    pub clamp_eps: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_in: 1,
            d_hidden: 32,
            filter_size: 2,
            n_layers: 4,
            pooling: Pooling::Max,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }
}

impl Architecture {
    pub fn receptive_field(&self) -> usize {
        self.filter_size.pow(self.n_layers as u32)
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.filter_size.pow(layer as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.filter_size == 0 || self.n_layers == 0 {
            return Err(Error::Config(
                "model: d_in, d_hidden, filter_size and n_layers must be positive".into(),
            ));
        }
        if self.filter_size.checked_pow(self.n_layers as u32).is_none() {
            return Err(Error::Config("model: receptive field overflows".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!("model: clamp_eps {} not in (0, 0.5)", self.clamp_eps)));
        }
        Ok(())
    }
}

/// Weights are laid out `[out][in][tap]`; tap `j` reads `x[t - (k-1-j)·dilation]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn weight(&self, o: usize, c: usize, j: usize) -> f64 {
        self.weights[(o * self.in_channels + c) * self.kernel + j]
    }

    fn offset(&self, j: usize) -> usize {
        (self.kernel - 1 - j) * self.dilation
    }

    /// `input` is in_channels×T, `out` is out_channels×T (channel-major).
    fn forward(&self, input: &[f64], t_len: usize, out: &mut [f64]) {
        for o in 0..self.out_channels {
            let y = &mut out[o * t_len..(o + 1) * t_len];
            y.fill(self.bias[o]);
            for c in 0..self.in_channels {
                let x = &input[c * t_len..(c + 1) * t_len];
                for j in 0..self.kernel {
                    let off = self.offset(j);
                    if off >= t_len {
                        continue;
                    }
                    let w = self.weight(o, c, j);
                    for (yv, xv) in y[off..].iter_mut().zip(&x[..t_len - off]) {
                        *yv += w * xv;
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and, when requested, the
    /// gradient with respect to the input.
    fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        t_len: usize,
        grad: &mut LayerGradient,
        mut grad_in: Option<&mut [f64]>,
    ) {
        for o in 0..self.out_channels {
            let g = &grad_out[o * t_len..(o + 1) * t_len];
            grad.bias[o] += g.iter().sum::<f64>();
            for c in 0..self.in_channels {
                let x = &input[c * t_len..(c + 1) * t_len];
                for j in 0..self.kernel {
                    let off = self.offset(j);
                    if off >= t_len {
                        continue;
                    }
                    let idx = (o * self.in_channels + c) * self.kernel + j;
                    grad.weights[idx] += g[off..].iter().zip(&x[..t_len - off]).map(|(a, b)| a * b).sum::<f64>();
                    if let Some(gi) = grad_in.as_deref_mut() {
                        let w = self.weights[idx];
                        let gi = &mut gi[c * t_len..(c + 1) * t_len];
                        for (dst, src) in gi[..t_len - off].iter_mut().zip(&g[off..]) {
                            *dst += w * src;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Checkpoint", try_from = "Checkpoint")]
pub struct ScorerModel {
    arch: Architecture,
    layers: Vec<ConvLayer>,
    anomaly_weight: Vec<f64>,
}

/// Per-point feature vectors `h_t` (d×T, channel-major) and the pooled `h_*`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub d: usize,
    pub length: usize,
    pub vectors: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl FeatureSequence {
    pub fn get(&self, channel: usize, t: usize) -> f64 {
        self.vectors[channel * self.length + t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSequence {
    pub local: Vec<f64>,
    pub global: f64,
}

/// Intermediates retained by a forward pass for [`ScorerModel::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    arch: Architecture,
    length: usize,
    /// `inputs[i]` is the input of layer `i`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations per layer; the last one is the feature matrix.
    pre: Vec<Vec<f64>>,
    raw_local: Vec<f64>,
    raw_global: f64,
    pooled: Vec<f64>,
    argmax: Vec<usize>,
}

impl Tape {
    pub fn length(&self) -> usize {
        self.length
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: FeatureSequence,
    pub scores: ScoreSequence,
    pub tape: Tape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients with the same shape as the model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub anomaly_weight: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &ScorerModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            anomaly_weight: vec![0.0; model.anomaly_weight.len()],
        }
    }

    /// Flat views in the same order as [`ScorerModel::parameters`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out.push(&self.anomaly_weight);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.anomaly_weight);
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).fold(0.0, |m, x| m.max(x.abs()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid clamped to `[eps, 1 - eps]`, plus its derivative (zero where clamped).
fn clamped_sigmoid(x: f64, eps: f64) -> (f64, f64) {
    let s = sigmoid(x);
    if s < eps {
        (eps, 0.0)
    } else if s > 1.0 - eps {
        (1.0 - eps, 0.0)
    } else {
        (s, s * (1.0 - s))
    }
}

impl ScorerModel {
    /// Fan-in uniform initialization: layer parameters ~ U(±sqrt(1/(in·k))),
    /// anomaly weight ~ U(±sqrt(1/d)).
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layers = (0..arch.n_layers)
            .map(|i| {
                let in_channels = if i == 0 { arch.d_in } else { arch.d_hidden };
                let a = (1.0 / (in_channels * arch.filter_size) as f64).sqrt();
                ConvLayer {
                    in_channels,
                    out_channels: arch.d_hidden,
                    kernel: arch.filter_size,
                    dilation: arch.dilation(i),
                    weights: (0..arch.d_hidden * in_channels * arch.filter_size)
                        .map(|_| rng.random_range(-a..a))
                        .collect(),
                    bias: (0..arch.d_hidden).map(|_| rng.random_range(-a..a)).collect(),
                }
            })
            .collect();
        let a = (1.0 / arch.d_hidden as f64).sqrt();
        let anomaly_weight = (0..arch.d_hidden).map(|_| rng.random_range(-a..a)).collect();
        Ok(Self {
            arch,
            layers,
            anomaly_weight,
        })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(arch: Architecture, layers: Vec<ConvLayer>, anomaly_weight: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if layers.len() != arch.n_layers {
            return Err(Error::DimensionMismatch {
                context: "layer count",
                expected: arch.n_layers,
                found: layers.len(),
            });
        }
        for (i, l) in layers.iter().enumerate() {
            let in_channels = if i == 0 { arch.d_in } else { arch.d_hidden };
            let checks = [
                ("layer in_channels", in_channels, l.in_channels),
                ("layer out_channels", arch.d_hidden, l.out_channels),
                ("layer kernel", arch.filter_size, l.kernel),
                ("layer dilation", arch.dilation(i), l.dilation),
                ("layer weights", in_channels * arch.d_hidden * arch.filter_size, l.weights.len()),
                ("layer bias", arch.d_hidden, l.bias.len()),
            ];
            for (context, expected, found) in checks {
                if expected != found {
                    return Err(Error::DimensionMismatch {
                        context,
                        expected,
                        found,
                    });
                }
            }
        }
        if anomaly_weight.len() != arch.d_hidden {
            return Err(Error::DimensionMismatch {
                context: "anomaly weight",
                expected: arch.d_hidden,
                found: anomaly_weight.len(),
            });
        }
        let model = Self {
            arch,
            layers,
            anomaly_weight,
        };
        if !model.parameters().iter().all(|p| p.iter().all(|x| x.is_finite())) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn anomaly_weight(&self) -> &[f64] {
        &self.anomaly_weight
    }

    pub fn receptive_field(&self) -> usize {
        self.arch.receptive_field()
    }

    /// Flat parameter views: each layer's weights then bias, then `w`.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out.push(&self.anomaly_weight);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.anomaly_weight);
        out
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn forward(&self, instance: &TemporalInstance) -> Result<ForwardPass> {
        if instance.d_vars() != self.arch.d_in {
            return Err(Error::DimensionMismatch {
                context: "model input variables",
                expected: self.arch.d_in,
                found: instance.d_vars(),
            });
        }
        let t_len = instance.length();
        let d = self.arch.d_hidden;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut current = instance.values().to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; d * t_len];
            layer.forward(&current, t_len, &mut out);
            let next = if i + 1 < n {
                out.iter().map(|&v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre.push(out);
        }
        let h = pre.last().expect("at least one layer");

        let mut raw_local = vec![0.0; t_len];
        for (c, &w) in self.anomaly_weight.iter().enumerate() {
            for (r, &x) in raw_local.iter_mut().zip(&h[c * t_len..(c + 1) * t_len]) {
                *r += w * x;
            }
        }

        let mut pooled = vec![0.0; d];
        let mut argmax = Vec::new();
        match self.arch.pooling {
            Pooling::Max => {
                argmax = vec![0; d];
                for c in 0..d {
                    let row = &h[c * t_len..(c + 1) * t_len];
                    // strict comparison keeps the earliest maximum
                    let (best_t, best) = row
                        .iter()
                        .enumerate()
                        .fold((0, row[0]), |(bt, bv), (t, &v)| if v > bv { (t, v) } else { (bt, bv) });
                    pooled[c] = best;
                    argmax[c] = best_t;
                }
            }
            Pooling::Avg => {
                for c in 0..d {
                    pooled[c] = h[c * t_len..(c + 1) * t_len].iter().sum::<f64>() / t_len as f64;
                }
            }
        }
        let raw_global: f64 = self.anomaly_weight.iter().zip(&pooled).map(|(w, x)| w * x).sum();

        let eps = self.arch.clamp_eps;
        let local = raw_local.iter().map(|&r| clamped_sigmoid(r, eps).0).collect();
        let global = clamped_sigmoid(raw_global, eps).0;
        if !raw_global.is_finite() || raw_local.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numerical(format!("non-finite activation on {}", instance.id())));
        }

        let features = FeatureSequence {
            d,
            length: t_len,
            vectors: h.clone(),
            pooled: pooled.clone(),
        };
        Ok(ForwardPass {
            features,
            scores: ScoreSequence { local, global },
            tape: Tape {
                arch: self.arch.clone(),
                length: t_len,
                inputs,
                pre,
                raw_local,
                raw_global,
                pooled,
                argmax,
            },
        })
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.arch != self.arch {
            return Err(Error::Invalid("tape was recorded with a different architecture".into()));
        }
        Ok(())
    }

    /// The un-normalized activation map `(w·h_1, …, w·h_T)`.
    pub fn activation_raw(&self, tape: &Tape) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        Ok(tape.raw_local.clone())
    }

    /// Backpropagates upstream gradients on the local scores `s_t` and the
    /// global score `s_*` to every parameter.
    pub fn backward(&self, tape: &Tape, grad_local: &[f64], grad_global: f64) -> Result<Gradients> {
        self.check_tape(tape)?;
        let t_len = tape.length;
        if grad_local.len() != t_len {
            return Err(Error::DimensionMismatch {
                context: "local score gradient",
                expected: t_len,
                found: grad_local.len(),
            });
        }
        let d = self.arch.d_hidden;
        let eps = self.arch.clamp_eps;
        let h = tape.pre.last().expect("at least one layer");
        let mut grads = Gradients::zeros_like(self);

        // through the sigmoids
        let g_raw: Vec<f64> = tape
            .raw_local
            .iter()
            .zip(grad_local)
            .map(|(&r, &g)| g * clamped_sigmoid(r, eps).1)
            .collect();
        let g_raw_global = grad_global * clamped_sigmoid(tape.raw_global, eps).1;

        // through the linear head and the pooling
        let mut g_h = vec![0.0; d * t_len];
        for c in 0..d {
            let row = &h[c * t_len..(c + 1) * t_len];
            grads.anomaly_weight[c] =
                row.iter().zip(&g_raw).map(|(a, b)| a * b).sum::<f64>() + g_raw_global * tape.pooled[c];
            let w = self.anomaly_weight[c];
            let g_row = &mut g_h[c * t_len..(c + 1) * t_len];
            for (dst, &g) in g_row.iter_mut().zip(&g_raw) {
                *dst = w * g;
            }
            let g_pool = w * g_raw_global;
            match self.arch.pooling {
                Pooling::Max => g_row[tape.argmax[c]] += g_pool,
                Pooling::Avg => {
                    let share = g_pool / t_len as f64;
                    g_row.iter_mut().for_each(|x| *x += share);
                }
            }
        }

        // through the conv stack
        let mut g_out = g_h;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i == 0 {
                layer.backward(&tape.inputs[0], &g_out, t_len, &mut grads.layers[0], None);
                break;
            }
            let mut g_in = vec![0.0; layer.in_channels * t_len];
            layer.backward(&tape.inputs[i], &g_out, t_len, &mut grads.layers[i], Some(&mut g_in));
            // ReLU between layer i-1 and layer i
            for (g, &p) in g_in.iter_mut().zip(&tape.pre[i - 1]) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
            g_out = g_in;
        }
        Ok(grads)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::data(path, None, e.to_string()))
    }
}

/// On-disk checkpoint: architecture header plus nested parameter arrays.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    architecture: Architecture,
    layers: Vec<CheckpointLayer>,
    anomaly_weight: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLayer {
    dilation: usize,
    /// `[out][in][tap]`
    weights: Vec<Vec<Vec<f64>>>,
    bias: Vec<f64>,
}

impl From<ScorerModel> for Checkpoint {
    fn from(m: ScorerModel) -> Self {
        let layers = m
            .layers
            .iter()
            .map(|l| CheckpointLayer {
                dilation: l.dilation,
                weights: l
                    .weights
                    .chunks(l.in_channels * l.kernel)
                    .map(|per_out| per_out.chunks(l.kernel).map(<[f64]>::to_vec).collect())
                    .collect(),
                bias: l.bias.clone(),
            })
            .collect();
        Self {
            architecture: m.arch,
            layers,
            anomaly_weight: m.anomaly_weight,
        }
    }
}

impl TryFrom<Checkpoint> for ScorerModel {
    type Error = Error;

    fn try_from(doc: Checkpoint) -> Result<Self> {
        let arch = doc.architecture;
        let layers = doc
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let in_channels = if i == 0 { arch.d_in } else { arch.d_hidden };
                let bad_shape = l.weights.iter().any(|o| {
                    o.len() != in_channels || o.iter().any(|taps| taps.len() != arch.filter_size)
                });
                if bad_shape {
                    return Err(Error::Invalid(format!("checkpoint: layer {i} weight shape")));
                }
                Ok(ConvLayer {
                    in_channels,
                    out_channels: l.weights.len(),
                    kernel: arch.filter_size,
                    dilation: l.dilation,
                    weights: l.weights.into_iter().flatten().flatten().collect(),
                    bias: l.bias,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ScorerModel::from_parts(arch, layers, doc.anomaly_weight)
    }
}
