//! Adaptive asymmetric label sharpening (AALS).
//!
//! A pseudo ground-truth map produced by a low-sensitivity teacher tends to
//! under-activate true lesion sites. The sharpening operator amplifies
//! activations in logit space around a center `t`:
//!
//! ```text
//! S(p) = expit(a * logit(p) + (1 - a) * logit(t))
//! ```
//!
//! i.e. the logit-distance from `t` is scaled by the strength `a`. Values
//! above the center move toward 1, values below move toward 0. Because the
//! operator is asymmetric (`t < 0.5` in practice), a fixed `a > 1` would keep
//! inflating the activated area once the map is already confident, so the
//! strength adapts to the map's peak probability:
//!
//! ```text
//! a = a0 - (a0 - 1) * y_max
//! ```
//!
//! which degenerates to the identity (`a = 1`) when the peak reaches 1.
//! Finally the elementwise guard `max(S(p), p)` ensures sharpening never
//! suppresses an existing activation.

use serde::{Deserialize, Serialize};

use crate::error::SharpenError;
use crate::grid::{Grid, ProbabilityMap};

/// Center and maximum strength of the sharpening operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpeningConfig {
    /// Fixed point of the sharpening function, in (0, 1).
    pub center_t: f64,
    /// Largest allowed strength, reached when the map's peak probability is 0.
    pub max_strength_a0: f64,
    /// Probabilities are clamped to `[eps, 1 - eps]` before the logit.
    pub clamp_epsilon: f64,
}

impl Default for SharpeningConfig {
    fn default() -> Self {
        Self {
            center_t: 0.4,
            max_strength_a0: 4.0,
            clamp_epsilon: 1e-6,
        }
    }
}

impl SharpeningConfig {
    pub fn new(center_t: f64, max_strength_a0: f64) -> Result<Self, SharpenError> {
        let config = Self {
            center_t,
            max_strength_a0,
            clamp_epsilon: 1e-6,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), SharpenError> {
        if !(self.center_t > 0.0 && self.center_t < 1.0) {
            return Err(SharpenError::InvalidConfig {
                reason: format!("center_t must be in (0, 1), got {}", self.center_t),
            });
        }
        if !(self.max_strength_a0 >= 1.0) {
            return Err(SharpenError::InvalidConfig {
                reason: format!("max_strength_a0 must be >= 1, got {}", self.max_strength_a0),
            });
        }
        if !(self.clamp_epsilon > 0.0 && self.clamp_epsilon <= 0.01) {
            return Err(SharpenError::InvalidConfig {
                reason: format!(
                    "clamp_epsilon must be in (0, 0.01], got {}",
                    self.clamp_epsilon
                ),
            });
        }
        Ok(())
    }
}

/// Inverse sigmoid, `ln(p / (1 - p))`.
///
/// Callers must clamp first; p outside the open interval is a domain error.
pub fn logit(p: f64) -> Result<f64, SharpenError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SharpenError::LogitDomain { p });
    }
    Ok((p / (1.0 - p)).ln())
}

/// Numerically stable sigmoid.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Strength selected from the map's peak probability:
/// `a = a0 - (a0 - 1) * y_max`, linear from `a0` (empty map) down to 1
/// (confident map).
pub fn adaptive_strength(y_max: f64, config: &SharpeningConfig) -> f64 {
    debug_assert!((0.0..=1.0).contains(&y_max));
    config.max_strength_a0 - (config.max_strength_a0 - 1.0) * y_max
}

/// Sharpen one probability with strength `a`:
/// `expit(a * logit(p) + (1 - a) * logit(t))`.
///
/// `p` is clamped to `[eps, 1 - eps]` before the logit, so the result is
/// defined for the closed interval. `a = 1` is an exact identity on the
/// clamped value by construction (no logit/expit round trip).
pub fn sharpen_scalar(p: f64, strength_a: f64, config: &SharpeningConfig) -> f64 {
    debug_assert!(strength_a >= 1.0);
    let eps = config.clamp_epsilon;
    let p = p.clamp(eps, 1.0 - eps);
    if strength_a == 1.0 {
        return p;
    }
    // Domain guaranteed by the clamp.
    let logit_p = (p / (1.0 - p)).ln();
    let logit_t = (config.center_t / (1.0 - config.center_t)).ln();
    expit(strength_a * logit_p + (1.0 - strength_a) * logit_t)
}

/// AALS over raw f64 pixel values: peak detection, adaptive strength, then
/// the elementwise non-decrease guard `max(S(p), p)`.
///
/// This is the double-precision evaluation path; [`aals`] wraps it for
/// f32-backed maps.
pub fn sharpen_values(values: &mut [f64], config: &SharpeningConfig) {
    // Peak over the raw (pre-clamp) map.
    let y_max = values.iter().copied().fold(f64::MIN, f64::max);
    let a = adaptive_strength(y_max.clamp(0.0, 1.0), config);
    if a == 1.0 {
        return; // identity, guard included
    }
    for v in values.iter_mut() {
        *v = sharpen_scalar(*v, a, config).max(*v);
    }
}

/// Sharpen a pseudo ground-truth map.
///
/// One strength per map (from its raw peak), applied elementwise with the
/// `max(S(p), p)` guard. Map storage is f32; each pixel is evaluated in f64.
pub fn aals(pseudo_gt: &ProbabilityMap, config: &SharpeningConfig) -> ProbabilityMap {
    let mut values: Vec<f64> = pseudo_gt.values().iter().map(|&v| v as f64).collect();
    sharpen_values(&mut values, config);
    let grid = Grid::from_vec(
        pseudo_gt.height(),
        pseudo_gt.width(),
        values.into_iter().map(|v| v as f32).collect(),
    )
    .expect("shape preserved");
    ProbabilityMap::new(grid).expect("sharpened values stay in [0, 1]")
}
