//! Variance-preserving cosine schedule with input scaling.
//!
//! `gamma(t) = cos(t pi / 2)^2`, `alpha = sqrt(gamma)`, `sigma = sqrt(1 - gamma)`.
//! Input scaling by `b` multiplies the signal-to-noise ratio `alpha / sigma`
//! by `b`, which gives `gamma_b = b^2 gamma / ((b^2 - 1) gamma + 1)`.

use core::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest training time; keeps the signal-to-noise ratio finite.
pub const MIN_TRAIN_T: f64 = 1e-5;

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(alloc::format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_scale(b: f64) -> Result<()> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("input scale {b} outside (0, 1]")));
    }
    Ok(())
}

/// `(cos(t pi/2), sin(t pi/2))` with exact endpoints.
fn cos_sin(t: f64) -> (f64, f64) {
    if t >= 1.0 {
        (0.0, 1.0)
    } else if t <= 0.0 {
        (1.0, 0.0)
    } else {
        (libm::cos(t * FRAC_PI_2), libm::sin(t * FRAC_PI_2))
    }
}

pub fn gamma_cosine(t: f64) -> Result<f64> {
    check_t(t)?;
    let (c, _) = cos_sin(t);
    Ok(c * c)
}

pub fn gamma_scaled(t: f64, b: f64) -> Result<f64> {
    check_scale(b)?;
    let g = gamma_cosine(t)?;
    if g == 0.0 || g == 1.0 {
        return Ok(g);
    }
    Ok(b * b * g / ((b * b - 1.0) * g + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    /// Input scale `b` in `(0, 1]`; `1` is the plain cosine schedule.
    pub input_scale: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { input_scale: 0.1 }
    }
}

impl NoiseSchedule {
    pub fn cosine() -> Self {
        Self { input_scale: 1.0 }
    }

    pub fn scaled(b: f64) -> Result<Self> {
        check_scale(b)?;
        Ok(Self { input_scale: b })
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.input_scale)
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        gamma_scaled(t, self.input_scale)
    }

    /// `(alpha(t), sigma(t))`, evaluated from `cos` and `sin` directly so
    /// both stay accurate near the endpoints.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        check_t(t)?;
        let b = self.input_scale;
        let (c, s) = cos_sin(t);
        let norm = libm::sqrt(b * b * c * c + s * s);
        Ok((b * c / norm, s / norm))
    }

    /// `alpha / sigma`; infinite at `t = 0`.
    pub fn snr(&self, t: f64) -> Result<f64> {
        let (alpha, sigma) = self.coefficients(t)?;
        Ok(if sigma == 0.0 { f64::INFINITY } else { alpha / sigma })
    }

    /// `ln(gamma_b / (1 - gamma_b))`, the log of the squared SNR.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        let (c, s) = cos_sin(t);
        Ok(2.0 * (libm::log(self.input_scale) + libm::log(c) - libm::log(s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    SigmoidBias,
    Constant,
    SnrEps,
}

/// Time-dependent weight of the x-space squared error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeighting {
    pub kind: WeightingKind,
    #[serde(default = "default_bias")]
    pub bias: f64,
}

fn default_bias() -> f64 {
    -4.0
}

impl Default for LossWeighting {
    fn default() -> Self {
        Self { kind: WeightingKind::SigmoidBias, bias: default_bias() }
    }
}

impl LossWeighting {
    pub fn constant() -> Self {
        Self { kind: WeightingKind::Constant, bias: default_bias() }
    }

    pub fn snr_eps() -> Self {
        Self { kind: WeightingKind::SnrEps, bias: default_bias() }
    }

    pub fn weight(&self, t: f64, sched: &NoiseSchedule) -> Result<f64> {
        Ok(match self.kind {
            WeightingKind::Constant => {
                check_t(t)?;
                1.0
            }
            WeightingKind::SigmoidBias => {
                let lambda = sched.log_snr(t)?;
                1.0 / (1.0 + libm::exp(lambda - self.bias))
            }
            WeightingKind::SnrEps => libm::exp(sched.log_snr(t)?),
        })
    }
}
