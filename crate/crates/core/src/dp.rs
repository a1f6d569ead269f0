//! Norm clipping, the Gaussian mechanism, and noise calibration.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::norm;

/// `min{B / ‖g‖, 1}`, with the zero vector left untouched.
pub fn clip_factor(g_norm: f64, bound: f64) -> f64 {
    if g_norm > bound {
        bound / g_norm
    } else {
        1.0
    }
}

/// The factor [`clip`] applies to `g`. Equals `min{B / ‖g‖, 1}` up to the
/// last bit, nudged down when rounding would leave the clipped norm above
/// `B`, so that clipping is exactly idempotent.
pub fn clip_scale(g: &[f64], bound: f64) -> f64 {
    let n = norm(g);
    let mut f = clip_factor(n, bound);
    if f == 1.0 {
        return f;
    }
    while f > 0.0 && scaled_norm(g, f) > bound {
        f *= 1.0 - f64::EPSILON;
    }
    f
}

fn scaled_norm(g: &[f64], f: f64) -> f64 {
    g.iter().map(|v| (v * f) * (v * f)).sum::<f64>().sqrt()
}

/// `Clip_B(g) = min{B / ‖g‖, 1} · g`.
pub fn clip(g: &[f64], bound: f64) -> Vec<f64> {
    let f = clip_scale(g, bound);
    if f == 1.0 {
        return g.to_vec();
    }
    g.iter().map(|v| v * f).collect()
}

/// Draws `p` i.i.d. standard normals from a ChaCha20 stream keyed by `seed`.
pub fn standard_normals(p: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..p).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `g + Y`, `Y ~ N(0, (σ·C)² I)`, deterministic in `seed`.
pub fn gaussian_mechanism(g: &[f64], sensitivity: f64, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sensitivity >= 0.0 && sigma >= 0.0) || !sensitivity.is_finite() || !sigma.is_finite() {
        return Err(Error::domain(format!(
            "sensitivity {sensitivity} and sigma {sigma} must be finite and nonnegative"
        )));
    }
    let std = sigma * sensitivity;
    if std == 0.0 {
        return Ok(g.to_vec());
    }
    Ok(g.iter()
        .zip(standard_normals(g.len(), seed))
        .map(|(v, z)| v + std * z)
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// `σ = √(2 ln(1.25/δ)) / ε`
    #[default]
    Standard,
    /// `σ = √(ln(1.25/δ)) / ε`
    RootLog,
}

impl std::str::FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "root_log" => Ok(Self::RootLog),
            other => Err(Error::config(format!("unknown calibration mode `{other}`"))),
        }
    }
}

impl CalibrationMode {
    fn log_term(self, delta: f64) -> f64 {
        let l = (1.25 / delta).ln();
        match self {
            Self::Standard => 2.0 * l,
            Self::RootLog => l,
        }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Noise multiplier for a per-step `(ε, δ)` guarantee.
pub fn calibrate_sigma(epsilon: f64, delta: f64, mode: CalibrationMode) -> Result<f64> {
    check_delta(delta)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::domain(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(mode.log_term(delta).sqrt() / epsilon)
}

/// Inverse of [`calibrate_sigma`]; `σ = 0` yields `ε = ∞`.
pub fn epsilon_for_sigma(sigma: f64, delta: f64, mode: CalibrationMode) -> Result<f64> {
    check_delta(delta)?;
    if !(sigma >= 0.0) {
        return Err(Error::domain(format!("sigma must be nonnegative, got {sigma}")));
    }
    Ok(mode.log_term(delta).sqrt() / sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    /// `None` when the noise multiplier is zero (no privacy).
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub sigma: f64,
    pub calibration: CalibrationMode,
}

impl PrivacyParams {
    pub fn calibrated(epsilon: f64, delta: f64, calibration: CalibrationMode) -> Result<Self> {
        Ok(Self {
            epsilon: Some(epsilon),
            delta,
            sigma: calibrate_sigma(epsilon, delta, calibration)?,
            calibration,
        })
    }

    /// Fixes the noise multiplier directly; `ε` follows from it.
    pub fn from_sigma(sigma: f64, delta: f64, calibration: CalibrationMode) -> Result<Self> {
        let eps = epsilon_for_sigma(sigma, delta, calibration)?;
        Ok(Self {
            epsilon: eps.is_finite().then_some(eps),
            delta,
            sigma,
            calibration,
        })
    }

    pub fn none() -> Self {
        Self {
            epsilon: None,
            delta: 1e-5,
            sigma: 0.0,
            calibration: CalibrationMode::Standard,
        }
    }
}
