//! Learnable sampling: a k×k window reduced to four convex combinations,
//! arranged as a 2×2 quad of LUT coordinates.
//!
//! Logits are stored in `(row, col, channel)` order, channel innermost.
//! Normalization is a softmax over the k×k positions of each channel, so
//! every output is bounded by the window's min and max. Channel `c` lands
//! on quad cell `(c / 2, c % 2)`.

use crate::error::{invalid_config, invalid_input, Error, Result};

/// Number of sampled outputs (the 2×2 quad).
pub const QUAD: usize = 4;

/// Tolerance on channel sums accepted as "normalized".
pub const NORMALIZED_TOLERANCE: f64 = 1e-4;

/// 2×2 grid of LUT coordinates, row-major.
pub type SampledQuad = [f64; QUAD];

/// Raw (pre-softmax) sampling logits of one branch input.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerWeights {
    k: usize,
    logits: Vec<f32>,
}

pub(crate) fn check_sample_size(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(invalid_config(format!("sample size must be odd and >= 1, got {k}")));
    }
    Ok(())
}

impl SamplerWeights {
    pub fn new(k: usize, logits: Vec<f32>) -> Result<Self> {
        check_sample_size(k)?;
        if logits.len() != k * k * QUAD {
            return Err(invalid_input(format!(
                "expected {} logits for k={k}, got {}",
                k * k * QUAD,
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(invalid_input(format!("non-finite logit {bad}")));
        }
        Ok(Self { k, logits })
    }

    /// All-zero logits: uniform sampling.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(k, vec![0.0; k * k * QUAD])
    }

    /// Logits that normalize to exact one-hot channels. `positions[c]` is
    /// the `(row, col)` picked by channel `c`.
    pub fn one_hot(k: usize, positions: [(usize, usize); QUAD]) -> Result<Self> {
        check_sample_size(k)?;
        // exp(-1000) underflows to exactly zero.
        let mut logits = vec![-1000.0f32; k * k * QUAD];
        for (c, &(r, col)) in positions.iter().enumerate() {
            if r >= k || col >= k {
                return Err(invalid_input(format!("position ({r}, {col}) outside {k}x{k}")));
            }
            logits[(r * k + col) * QUAD + c] = 0.0;
        }
        Ok(Self { k, logits })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn normalize(&self) -> NormalizedSampler {
        let logits: Vec<f64> = self.logits.iter().map(|&v| v as f64).collect();
        NormalizedSampler {
            k: self.k,
            weights: softmax_positions(&logits, self.k),
        }
    }
}

/// Softmax over the k×k positions for each of the four channels.
pub fn softmax_positions(logits: &[f64], k: usize) -> Vec<f64> {
    let n = k * k;
    let mut out = vec![0.0; n * QUAD];
    for c in 0..QUAD {
        let max = (0..n).map(|p| logits[p * QUAD + c]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in 0..n {
            let e = (logits[p * QUAD + c] - max).exp();
            out[p * QUAD + c] = e;
            sum += e;
        }
        for p in 0..n {
            out[p * QUAD + c] /= sum;
        }
    }
    out
}

/// Convex sampling weights, `(row, col, channel)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSampler {
    k: usize,
    weights: Vec<f64>,
}

impl NormalizedSampler {
    /// Accepts externally supplied weights after checking they are convex.
    pub fn from_weights(k: usize, weights: Vec<f64>) -> Result<Self> {
        check_sample_size(k)?;
        if weights.len() != k * k * QUAD {
            return Err(invalid_input(format!(
                "expected {} weights for k={k}, got {}",
                k * k * QUAD,
                weights.len()
            )));
        }
        for c in 0..QUAD {
            let mut sum = 0.0;
            for p in 0..k * k {
                let w = weights[p * QUAD + c];
                if !(w >= 0.0) {
                    return Err(Error::ContractViolation(format!(
                        "sampling weight {w} at position {p}, channel {c} is negative"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > NORMALIZED_TOLERANCE {
                return Err(Error::ContractViolation(format!(
                    "sampling weights of channel {c} sum to {sum}"
                )));
            }
        }
        Ok(Self { k, weights })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.weights[(row * self.k + col) * QUAD + channel]
    }

    /// Weighted reduction of a row-major k×k patch into a quad. Outputs are
    /// kept inside `[min(patch), max(patch)]`.
    #[inline]
    pub fn sample(&self, patch: &[f64]) -> SampledQuad {
        debug_assert_eq!(patch.len(), self.k * self.k);
        let mut q = [0.0; QUAD];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (p, &x) in patch.iter().enumerate() {
            let w = &self.weights[p * QUAD..p * QUAD + QUAD];
            q[0] += x * w[0];
            q[1] += x * w[1];
            q[2] += x * w[2];
            q[3] += x * w[3];
            lo = lo.min(x);
            hi = hi.max(x);
        }
        // Rounding in the sum can step an ulp outside the window's range.
        q.map(|v| v.clamp(lo, hi))
    }

    /// Checked variant of [`sample`](Self::sample).
    pub fn try_sample(&self, patch: &[f64]) -> Result<SampledQuad> {
        if patch.len() != self.k * self.k {
            return Err(invalid_input(format!(
                "patch has {} values, expected {}",
                patch.len(),
                self.k * self.k
            )));
        }
        if let Some(bad) = patch.iter().find(|v| !(0.0..=255.0).contains(*v)) {
            return Err(invalid_input(format!("patch value {bad} outside [0, 255]")));
        }
        Ok(self.sample(patch))
    }
}

/// Receptive-field side length once the rotation ensemble is applied.
pub fn effective_receptive_field(k: usize) -> Result<usize> {
    check_sample_size(k)?;
    Ok(2 * k - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits() {
        let n = SamplerWeights::uniform(3).unwrap().normalize();
        assert!(n.weights().iter().all(|&w| (w - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn saturated_logit() {
        let mut logits = vec![0.0f32; 9 * 4];
        logits[4 * 4 + 2] = 40.0;
        let n = SamplerWeights::new(3, logits).unwrap().normalize();
        assert!((n.weight(1, 1, 2) - 1.0).abs() < 1e-15);
        for p in 0..9 {
            if p != 4 {
                assert!(n.weight(p / 3, p % 3, 2) < 1e-15);
            }
        }
    }

    #[test]
    fn two_element_softmax() {
        // Two live positions in channel 0, the rest masked off.
        let e = [0.0f64, 2f64.ln()].map(f64::exp);
        let s: f64 = e.iter().sum();
        let mut logits = vec![-1000.0; 9 * 4];
        logits[0] = 0.0;
        logits[4] = 2f64.ln();
        let w = softmax_positions(&logits, 3);
        assert!((w[0] - e[0] / s).abs() < 1e-15 && (w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[4] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_patch_is_fixed_point() {
        let logits = (0..25 * 4).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let n = SamplerWeights::new(5, logits).unwrap().normalize();
        let q = n.sample(&[77.0; 25]);
        for v in q {
            assert!((v - 77.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_reproduces_fixed_corner_pattern() {
        let n = SamplerWeights::one_hot(3, [(0, 0), (0, 1), (1, 0), (1, 1)])
            .unwrap()
            .normalize();
        let patch: Vec<f64> = (0..9).map(|v| (v * 10) as f64).collect();
        assert_eq!(n.sample(&patch), [0.0, 10.0, 30.0, 40.0]);
    }

    #[test]
    fn uniform_mean_of_ramp() {
        let n = SamplerWeights::uniform(3).unwrap().normalize();
        let patch: Vec<f64> = (0..9).map(|v| v as f64).collect();
        for v in n.sample(&patch) {
            assert!((v - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_sampling_is_identity() {
        let n = SamplerWeights::new(1, vec![0.3, -2.0, 5.0, 0.0]).unwrap().normalize();
        assert_eq!(n.sample(&[123.0]), [123.0; 4]);
    }

    #[test]
    fn receptive_field_sizes() {
        assert_eq!(effective_receptive_field(3).unwrap(), 5);
        assert_eq!(effective_receptive_field(5).unwrap(), 9);
        assert_eq!(effective_receptive_field(1).unwrap(), 1);
        assert!(matches!(effective_receptive_field(4), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(SamplerWeights::new(2, vec![0.0; 16]).is_err());
        assert!(SamplerWeights::new(1, vec![0.0, f32::NAN, 0.0, 0.0]).is_err());
        let mut w = vec![1.0 / 9.0; 36];
        w[0] += 0.01;
        assert!(matches!(
            NormalizedSampler::from_weights(3, w),
            Err(Error::ContractViolation(_))
        ));
        assert!(NormalizedSampler::from_weights(1, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn every_position_is_live() {
        let logits = (0..9 * 4).map(|i| ((i * 7919) % 13) as f32 * 0.2 - 1.0).collect();
        let n = SamplerWeights::new(3, logits).unwrap().normalize();
        let base: Vec<f64> = (0..9).map(|v| 100.0 + v as f64).collect();
        let q0 = n.sample(&base);
        for p in 0..9 {
            let mut patch = base.clone();
            patch[p] += 16.0;
            let q = n.sample(&patch);
            assert!(q.iter().zip(&q0).any(|(a, b)| a != b), "position {p} is dead");
        }
    }

    proptest! {
        #[test]
        fn softmax_is_convex(logits in proptest::collection::vec(-30.0f64..30.0, 25 * 4)) {
            let w = softmax_positions(&logits, 5);
            for c in 0..QUAD {
                let s: f64 = (0..25).map(|p| w[p * QUAD + c]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-10.0f64..10.0, 9 * 4),
            shift in -50.0f64..50.0,
        ) {
            let a = softmax_positions(&logits, 3);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let b = softmax_positions(&shifted, 3);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn sample_stays_in_patch_range(
            logits in proptest::collection::vec(-8.0f32..8.0, 9 * 4),
            patch in proptest::collection::vec(0.0f64..=255.0, 9),
        ) {
            let n = SamplerWeights::new(3, logits).unwrap().normalize();
            let (lo, hi) = patch.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            for v in n.try_sample(&patch).unwrap() {
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }
}
