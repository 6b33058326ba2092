//! Gaussian gradient obfuscation and the closed-form (ε, δ) bound.
//!
//! Noise is added independently to every coordinate. Samples come from
//! `rand_distr::Normal`, which uses the ziggurat method over the caller's
//! seeded ChaCha stream.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fl::ParamVector;
use crate::rng::SimRng;

/// Noise scale, failure probability and gradient sensitivity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacyParams {
    pub sigma: f64,
    pub delta: f64,
    pub sensitivity: f64,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.sensitivity >= 0.0 && self.sensitivity.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sensitivity must be >= 0, got {}",
                self.sensitivity
            )));
        }
        Ok(())
    }
}

/// Returns `g + N(0, sigma²)` drawn per coordinate.
pub fn obfuscate(g: &ParamVector, sigma: f64, rng: &mut SimRng) -> Result<ParamVector> {
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma {sigma}")));
    }
    let normal =
        Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("sigma {sigma}: {e}")))?;
    Ok(g.as_slice().iter().map(|v| v + normal.sample(rng)).collect::<Vec<_>>().into())
}

/// Largest pairwise L2 distance between the vectors.
pub fn sensitivity(updates: &[ParamVector]) -> Result<f64> {
    if updates.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let dim = updates[0].dim();
    let mut max = 0.0f64;
    for (i, a) in updates.iter().enumerate() {
        updates[0].check_dim(a.dim())?;
        for b in &updates[i + 1..] {
            if b.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: b.dim() });
            }
            max = max.max(a.distance(b)?);
        }
    }
    Ok(max)
}

/// `ε = (Δ/σ)·√(2 ln(1.25/δ))`.
pub fn epsilon_bound(params: &PrivacyParams) -> Result<f64> {
    params.validate()?;
    Ok(params.sensitivity / params.sigma * (2.0 * (1.25 / params.delta).ln()).sqrt())
}
