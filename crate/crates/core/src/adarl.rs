//! Bounded residual fusion between the current and previous feature quads.

use crate::autosample::{SampledQuad, QUAD};
use crate::error::{invalid_input, Error, Result};

/// Per-cell blend weights of the 2×2 quad, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualWeights([f32; QUAD]);

impl ResidualWeights {
    /// Strict constructor: every weight must already lie in `[0, 1]`.
    pub fn new(w: [f32; QUAD]) -> Result<Self> {
        if let Some(bad) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ContractViolation(format!("residual weight {bad} outside [0, 1]")));
        }
        Ok(Self(w))
    }

    pub fn splat(w: f32) -> Result<Self> {
        Self::new([w; QUAD])
    }

    pub fn values(&self) -> [f32; QUAD] {
        self.0
    }
}

/// Projects raw weights onto `[0, 1]`.
pub fn clamp_weights(raw: [f64; QUAD]) -> Result<ResidualWeights> {
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(invalid_input(format!("non-finite residual weight {bad}")));
    }
    Ok(ResidualWeights(raw.map(|v| v.clamp(0.0, 1.0) as f32)))
}

/// `(1 - w) * current + w * previous`, per cell.
#[inline]
pub fn blend(current: f64, previous: f64, w: f64) -> f64 {
    let (lo, hi) = if current <= previous {
        (current, previous)
    } else {
        (previous, current)
    };
    ((1.0 - w) * current + w * previous).clamp(lo, hi)
}

/// Convex combination of two quads; each output cell stays between its two
/// sources.
#[inline]
pub fn combine(current: &SampledQuad, previous: &SampledQuad, w: &ResidualWeights) -> SampledQuad {
    std::array::from_fn(|i| blend(current[i], previous[i], w.0[i] as f64))
}

/// [`combine`] for weights that have not been validated.
pub fn try_combine(
    current: &SampledQuad,
    previous: &SampledQuad,
    w: [f64; QUAD],
) -> Result<SampledQuad> {
    if let Some(bad) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::ContractViolation(format!("residual weight {bad} outside [0, 1]")));
    }
    Ok(std::array::from_fn(|i| blend(current[i], previous[i], w[i])))
}
