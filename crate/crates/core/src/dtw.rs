//! Constrained (soft-)DTW between a sequential label of length `L` and a
//! series of length `T`.
//!
//! Paths run from `(1,1)` to `(L,T)` using only → (stay on the label) and
//! ↘ (advance to the next label) moves, so every time point is assigned to
//! exactly one label and every label covers at least one point. The forward
//! recursion is
//!
//! ```text
//! R[l][t] = cost[l][t] + softmin_γ(R[l-1][t-1], R[l][t-1])
//! ```
//!
//! and the soft alignment `E = ∂R[L][T]/∂cost` satisfies the mirrored
//! backward recursion over `E[l][t+1]` and `E[l+1][t+1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pseudolabel::SequentialLabel;

/// Stand-in for +∞ on unreachable cells.
pub const SENTINEL: f64 = 1e30;

/// Floor applied to scores before taking logs.
pub const CLAMP_EPS: f64 = crate::model::DEFAULT_CLAMP_EPS;

fn is_sentinel(v: f64) -> bool {
    v >= SENTINEL * 0.5
}

/// Dense row-major `rows × cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                context: "matrix row",
                expected: cols,
                found: bad.len(),
            });
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// 0-based access.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::series::csv_writer(path)?;
        for r in 0..self.rows {
            crate::series::write_record(&mut w, path, self.row(r).iter().map(|v| v.to_string()))?;
        }
        crate::series::flush(w, path)
    }
}

/// `L × T` alignment costs; entry `(l, t)` is the penalty for giving point
/// `t` the label `z_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    /// Requires `1 ≤ L ≤ T` and finite, nonnegative entries.
    pub fn new(costs: Matrix) -> Result<Self> {
        if costs.rows == 0 || costs.cols == 0 {
            return Err(Error::Invalid("empty cost matrix".into()));
        }
        if costs.rows > costs.cols {
            return Err(Error::Infeasible {
                labels: costs.rows,
                length: costs.cols,
            });
        }
        if costs.data.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Invalid("cost entries must be finite and nonnegative".into()));
        }
        Ok(Self(costs))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn labels(&self) -> usize {
        self.0.rows
    }

    pub fn length(&self) -> usize {
        self.0.cols
    }

    pub fn get(&self, l: usize, t: usize) -> f64 {
        self.0.get(l, t)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Segment boundaries `0 = t_0 < t_1 < … < t_L = T`; label `l` (1-based)
/// covers the 1-based points `t_{l-1}+1 ..= t_l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    boundaries: Vec<usize>,
}

impl AlignmentPath {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        let ok = boundaries.len() >= 2 && boundaries[0] == 0 && boundaries.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Invalid(format!("invalid path boundaries {boundaries:?}")));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn labels(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn length(&self) -> usize {
        *self.boundaries.last().expect("nonempty")
    }

    /// 0-based half-open range of points aligned to 0-based label `l`.
    pub fn span(&self, l: usize) -> std::ops::Range<usize> {
        self.boundaries[l]..self.boundaries[l + 1]
    }

    /// 0-based label index for each point.
    pub fn label_of_points(&self) -> Vec<usize> {
        (0..self.labels())
            .flat_map(|l| std::iter::repeat_n(l, self.span(l).len()))
            .collect()
    }

    /// Path cost summed in time order.
    pub fn cost(&self, costs: &CostMatrix) -> f64 {
        self.label_of_points()
            .into_iter()
            .enumerate()
            .fold(0.0, |acc, (t, l)| acc + costs.get(l, t))
    }

    /// Binary `L × T` alignment matrix.
    pub fn indicator(&self) -> Matrix {
        let mut m = Matrix::zeros(self.labels(), self.length());
        for (t, l) in self.label_of_points().into_iter().enumerate() {
            m.set(l, t, 1.0);
        }
        m
    }
}

/// Forward values and soft alignment on the padded `(L+2) × (T+2)` grid.
/// Row/column 0 is the start border; interior cells are `1..=L`, `1..=T`.
#[derive(Debug, Clone)]
pub struct DtwWorkspace {
    pub r: Matrix,
    pub e: Matrix,
    pub gamma: f64,
}

impl DtwWorkspace {
    pub fn value(&self) -> f64 {
        self.r.get(self.r.rows - 2, self.r.cols - 2)
    }

    pub fn dump(&self, dir: &Path, stem: &str) -> Result<()> {
        self.r.write_csv(&dir.join(format!("{stem}.R.csv")))?;
        self.e.write_csv(&dir.join(format!("{stem}.E.csv")))
    }
}

/// Cost of labelling a point with score `s` as `z`: the negative log-posterior
/// `-(z·log s + (1-z)·log(1-s))`, with `s` clamped away from 0 and 1.
pub fn label_cost(z: bool, s: f64) -> f64 {
    let s = s.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    if z {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

pub fn build_cost_matrix(label: &SequentialLabel, scores: &[f64]) -> Result<CostMatrix> {
    let (l_len, t_len) = (label.len(), scores.len());
    if l_len == 0 {
        return Err(Error::Invalid("empty sequential label".into()));
    }
    if l_len > t_len {
        return Err(Error::Infeasible {
            labels: l_len,
            length: t_len,
        });
    }
    let mut m = Matrix::zeros(l_len, t_len);
    for (l, &z) in label.bits().iter().enumerate() {
        for (t, &s) in scores.iter().enumerate() {
            m.set(l, t, label_cost(z, s));
        }
    }
    CostMatrix::new(m)
}

/// `∂cost(z, s)/∂s = (s - z) / (s (1 - s))` on the clamped score.
pub fn label_cost_grad(z: bool, s: f64) -> f64 {
    let s = s.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    (s - f64::from(u8::from(z))) / (s * (1.0 - s))
}

/// Chains `∂value/∂cost` (an `L × T` matrix) down to the local scores.
pub fn cost_grad_to_scores(label: &SequentialLabel, scores: &[f64], grad: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    for (l, &z) in label.bits().iter().enumerate() {
        for (t, (&s, o)) in scores.iter().zip(out.iter_mut()).enumerate() {
            let g = grad.get(l, t);
            if g != 0.0 {
                *o += g * label_cost_grad(z, s);
            }
        }
    }
    out
}

/// `min_γ`: the hard minimum for `γ = 0`, otherwise `-γ log Σ exp(-a_i/γ)`
/// evaluated with the minimum factored out. Sentinel operands are skipped;
/// if every operand is a sentinel the result is [`SENTINEL`].
pub fn soft_min(values: &[f64], gamma: f64) -> f64 {
    let min = values
        .iter()
        .copied()
        .filter(|v| !is_sentinel(*v))
        .fold(f64::INFINITY, f64::min);
    if min == f64::INFINITY {
        return SENTINEL;
    }
    if gamma == 0.0 {
        return min;
    }
    let sum: f64 = values
        .iter()
        .filter(|v| !is_sentinel(**v))
        .map(|v| (-(v - min) / gamma).exp())
        .sum();
    min - gamma * sum.ln()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("gamma {gamma} must be finite and nonnegative")))
    }
}

/// Soft-DTW value `R[L][T]` and the filled forward table. `γ = 0` gives the
/// exact minimum path cost. Runs in `O(LT)`.
pub fn sdtw_forward(costs: &CostMatrix, gamma: f64) -> Result<(f64, DtwWorkspace)> {
    check_gamma(gamma)?;
    let (l_len, t_len) = (costs.labels(), costs.length());
    let mut r = Matrix::filled(l_len + 2, t_len + 2, SENTINEL);
    r.set(0, 0, 0.0);
    for l in 1..=l_len {
        // cells with l > t are unreachable from (1,1)
        for t in l..=t_len {
            let diag = r.get(l - 1, t - 1);
            let stay = r.get(l, t - 1);
            let prev = soft_min(&[diag, stay], gamma);
            if !is_sentinel(prev) {
                r.set(l, t, costs.get(l - 1, t - 1) + prev);
            }
        }
    }
    let value = r.get(l_len, t_len);
    let workspace = DtwWorkspace {
        r,
        e: Matrix::zeros(l_len + 2, t_len + 2),
        gamma,
    };
    Ok((value, workspace))
}

/// Gradient of the soft-DTW value with respect to every cost entry (the
/// interior of `E`). Fills `workspace.e`. Requires `γ > 0`; for `γ = 0` use
/// the indicator of [`decode_path`].
pub fn sdtw_backward(costs: &CostMatrix, workspace: &mut DtwWorkspace) -> Result<Matrix> {
    let gamma = workspace.gamma;
    if gamma <= 0.0 {
        return Err(Error::Invalid(
            "soft alignment needs gamma > 0; use the decoded path indicator".into(),
        ));
    }
    let (l_len, t_len) = (costs.labels(), costs.length());
    if workspace.r.rows != l_len + 2 || workspace.r.cols != t_len + 2 {
        return Err(Error::Invalid("workspace does not match the cost matrix".into()));
    }
    let r = &workspace.r;
    let e = &mut workspace.e;
    e.data.fill(0.0);
    e.set(l_len, t_len, 1.0);
    for l in (1..=l_len).rev() {
        for t in (1..t_len).rev() {
            let here = r.get(l, t);
            if is_sentinel(here) {
                continue;
            }
            let mut acc = 0.0;
            let e_stay = e.get(l, t + 1);
            if e_stay > 0.0 {
                let a = ((r.get(l, t + 1) - here - costs.get(l - 1, t)) / gamma).exp();
                acc += a * e_stay;
            }
            if l < l_len {
                let e_diag = e.get(l + 1, t + 1);
                if e_diag > 0.0 {
                    let b = ((r.get(l + 1, t + 1) - here - costs.get(l, t)) / gamma).exp();
                    acc += b * e_diag;
                }
            }
            e.set(l, t, acc);
        }
    }
    let mut grad = Matrix::zeros(l_len, t_len);
    for l in 0..l_len {
        for t in 0..t_len {
            grad.set(l, t, e.get(l + 1, t + 1));
        }
    }
    Ok(grad)
}

/// Minimum-cost alignment. On ties the path advances to the next label as
/// early as possible; the returned path's cost (summed in time order) equals
/// `sdtw_forward(costs, 0)` exactly.
pub fn decode_path(costs: &CostMatrix) -> Result<AlignmentPath> {
    let (_, ws) = sdtw_forward(costs, 0.0)?;
    let r = &ws.r;
    let (l_len, t_len) = (costs.labels(), costs.length());
    let mut boundaries = vec![0; l_len + 1];
    boundaries[l_len] = t_len;
    let mut l = l_len;
    // walk back from (L,T); staying on the current label for as long as it
    // is optimal pushes every transition as early as possible
    for t in (2..=t_len).rev() {
        let stay = r.get(l, t - 1);
        let diag = r.get(l - 1, t - 1);
        if is_sentinel(stay) || (!is_sentinel(diag) && diag < stay) {
            boundaries[l - 1] = t - 1;
            l -= 1;
        }
    }
    debug_assert_eq!(l, 1);
    AlignmentPath::new(boundaries)
}
