//! Sequential pseudo-labels from the anomaly activation map.

use crate::error::{Error, Result};

/// Activation map min-max normalized to `[0, 1]` along time.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap(Vec<f64>);

impl ActivationMap {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Binary label sequence of length `L` giving the order of normal (0) and
/// anomalous (1) events.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SequentialLabel(Vec<bool>);

impl SequentialLabel {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.ones() == 0
    }

    /// Elementwise AND with a scalar mask.
    pub fn masked(&self, keep: bool) -> Self {
        Self(self.0.iter().map(|&b| b && keep).collect())
    }
}

impl std::fmt::Display for SequentialLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// `m_t = (raw_t - min) / (max - min)`. A constant input maps to all zeros.
pub fn normalize_activation(raw: &[f64]) -> ActivationMap {
    let (min, max) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    if range.is_nan() || range <= 0.0 {
        return ActivationMap(vec![0.0; raw.len()]);
    }
    ActivationMap(raw.iter().map(|&v| (v - min) / range).collect())
}

/// Half-open interval of 0-based points covered by pseudo-label `l` when `T`
/// points are cut into pieces of `⌈T/L⌉`. The last pieces may be short or,
/// when `L` does not divide evenly, empty.
pub fn interval(t_len: usize, l_len: usize, l: usize) -> std::ops::Range<usize> {
    let width = t_len.div_ceil(l_len);
    let start = (l * width).min(t_len);
    let end = ((l + 1) * width).min(t_len);
    start..end
}

/// `φ_L`: bit `l` is set iff the largest activation in interval `l` is at
/// least `tau`. Empty intervals give 0.
pub fn phi(map: &ActivationMap, l_len: usize, tau: f64) -> Result<SequentialLabel> {
    let t_len = map.len();
    if l_len == 0 {
        return Err(Error::Invalid("pseudo-label length must be positive".into()));
    }
    if l_len > t_len {
        return Err(Error::Infeasible {
            labels: l_len,
            length: t_len,
        });
    }
    let bits = (0..l_len)
        .map(|l| {
            map.0[interval(t_len, l_len, l)]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
                >= tau
        })
        .collect();
    Ok(SequentialLabel(bits))
}

/// `(y·bits, (1-y)·bits)`.
pub fn masked_labels(bits: &SequentialLabel, y: bool) -> (SequentialLabel, SequentialLabel) {
    (bits.masked(y), bits.masked(!y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lbl(bits: &[u8]) -> SequentialLabel {
        SequentialLabel::new(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_activation(&[2.0, 4.0, 6.0]).values(), &[0.0, 0.5, 1.0]);
        assert_eq!(normalize_activation(&[5.0, 5.0, 5.0]).values(), &[0.0, 0.0, 0.0]);
        assert_eq!(normalize_activation(&[-1.0, 1.0]).values(), &[0.0, 1.0]);
    }

    #[test]
    fn phi_examples() {
        let m = ActivationMap(vec![0.0, 0.2, 0.9, 1.0, 0.1, 0.0]);
        assert_eq!(phi(&m, 3, 0.5).unwrap(), lbl(&[0, 1, 0]));
        assert_eq!(phi(&m, 3, 0.05).unwrap(), lbl(&[1, 1, 1]));
        assert!(matches!(phi(&m, 7, 0.5), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn interval_arithmetic() {
        let lens: Vec<usize> = (0..3).map(|l| interval(5, 3, l).len()).collect();
        assert_eq!(lens, vec![2, 2, 1]);
        // ⌈9/6⌉ = 2 leaves the sixth interval empty
        assert_eq!(interval(9, 6, 5), 9..9);
        let m = ActivationMap(vec![1.0; 9]);
        assert_eq!(phi(&m, 6, 0.5).unwrap(), lbl(&[1, 1, 1, 1, 1, 0]));
    }

    #[test]
    fn masking_identities() {
        let bits = lbl(&[0, 1, 0]);
        assert_eq!(masked_labels(&bits, true), (lbl(&[0, 1, 0]), lbl(&[0, 0, 0])));
        assert_eq!(masked_labels(&bits, false), (lbl(&[0, 0, 0]), lbl(&[0, 1, 0])));
        let zero = lbl(&[0, 0, 0]);
        for y in [false, true] {
            assert_eq!(masked_labels(&zero, y), (zero.clone(), zero.clone()));
        }
    }

    proptest! {
        #[test]
        fn phi_is_binary_of_length_l(raw in prop::collection::vec(-5.0f64..5.0, 1..60), l in 1usize..20, tau in 0.01f64..0.99) {
            prop_assume!(l <= raw.len());
            let z = phi(&normalize_activation(&raw), l, tau).unwrap();
            prop_assert_eq!(z.len(), l);
        }

        #[test]
        fn raising_tau_never_sets_bits(raw in prop::collection::vec(-5.0f64..5.0, 1..60), l in 1usize..20, a in 0.01f64..0.99, b in 0.01f64..0.99) {
            prop_assume!(l <= raw.len());
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m = normalize_activation(&raw);
            let z_lo = phi(&m, l, lo).unwrap();
            let z_hi = phi(&m, l, hi).unwrap();
            prop_assert!(z_hi.bits().iter().zip(z_lo.bits()).all(|(&h, &l)| !h || l));
        }

        #[test]
        fn at_most_one_mask_is_nonzero(bits in prop::collection::vec(any::<bool>(), 1..20), y in any::<bool>()) {
            let (pos, neg) = masked_labels(&SequentialLabel::new(bits), y);
            prop_assert!(pos.is_all_zero() || neg.is_all_zero());
        }

        #[test]
        fn normalized_phi_ignores_positive_affine_maps(
            raw in prop::collection::vec(-5.0f64..5.0, 1..60),
            scale in prop::sample::select(vec![0.5f64, 1.0, 2.0, 4.0, 8.0]),
            shift in prop::sample::select(vec![-4.0f64, -1.0, 0.0, 2.0, 16.0]),
            l in 1usize..20,
        ) {
            prop_assume!(l <= raw.len());
            // exact dyadic values keep the affine map free of rounding
            let raw: Vec<f64> = raw.iter().map(|v| (v * 64.0).round() / 64.0).collect();
            let moved: Vec<f64> = raw.iter().map(|v| v * scale + shift).collect();
            for tau in [0.1, 0.3, 0.5, 0.7] {
                prop_assert_eq!(
                    phi(&normalize_activation(&raw), l, tau).unwrap(),
                    phi(&normalize_activation(&moved), l, tau).unwrap()
                );
            }
        }
    }
}
