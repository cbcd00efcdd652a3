//! Non-ideal weight update.
//!
//! Gradients are scaled into conductance changes, attenuated by the
//! state-dependent write non-linearity, perturbed by gradient-proportional
//! write noise and written to the master device states.
//!
//! Write non-linearity, with `x = (g - g_min) / (g_max - g_min)`:
//!
//! ```text
//! potentiation (dg >= 0):  dg * exp(-v * x)
//! depression   (dg <  0):  dg * exp(-v * (1 - x))
//! ```
//!
//! Write noise is `Normal(0, gamma * sqrt((g_max - g_min) * |dg|))`.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::circuit::CrossbarConfig;
use crate::error::{Error, Result};
use crate::mapping::TiledLayerWeights;
use crate::rng::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateSpec {
    /// Write non-linearity factor.
    #[serde(default)]
    pub v: f64,
    /// Write noise factor.
    #[serde(default)]
    pub gamma: f64,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Weight that maps to a full-range conductance change. `None` uses the
    /// layer's mapping scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_scale: Option<f64>,
}

impl Default for UpdateSpec {
    fn default() -> Self {
        Self { v: 0.0, gamma: 0.0, lr: 0.1, seed: 0, layer_scale: None }
    }
}

impl UpdateSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.v.is_finite() && self.v >= 0.0) {
            return Err(Error::arg(format!("update.v must be >= 0, got {}", self.v)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::arg(format!("update.gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::arg(format!("update.lr must be > 0, got {}", self.lr)));
        }
        if let Some(s) = self.layer_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("update.layer_scale must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    fn scale_for(&self, t: &TiledLayerWeights) -> Result<f64> {
        let s = self.layer_scale.unwrap_or(t.layer_scale());
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Config(format!("layer scale must be > 0, got {s}")));
        }
        Ok(s)
    }
}

/// Ideal conductance change `dW * (g_max - g_min) / layer_scale`.
pub fn scale_gradient(dw: ArrayView2<f64>, layer_scale: f64, cfg: &CrossbarConfig) -> Result<Array2<f64>> {
    if !(layer_scale.is_finite() && layer_scale > 0.0) {
        return Err(Error::Config(format!("layer scale must be > 0, got {layer_scale}")));
    }
    if let Some(bad) = dw.iter().find(|x| !x.is_finite()) {
        return Err(Error::arg(format!("gradient contains non-finite value {bad}")));
    }
    let k = cfg.g_range() / layer_scale;
    Ok(dw.mapv(|x| x * k))
}

/// Attenuation factor for a change of sign `potentiate` at normalised state `x`.
#[inline]
fn attenuation(x: f64, potentiate: bool, v: f64) -> f64 {
    if potentiate {
        (-v * x).exp()
    } else {
        (-v * (1.0 - x)).exp()
    }
}

/// Conductance change actually written for an ideal change `dg` at state `g`.
pub fn nonlinear_update(g: f64, dg: f64, v: f64, cfg: &CrossbarConfig) -> Result<f64> {
    if !(g >= cfg.g_min && g <= cfg.g_max) {
        return Err(Error::arg(format!(
            "conductance {g} outside device range [{}, {}]",
            cfg.g_min, cfg.g_max
        )));
    }
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::arg(format!("non-linearity factor must be >= 0, got {v}")));
    }
    let x = (g - cfg.g_min) / cfg.g_range();
    Ok(dg * attenuation(x, dg >= 0.0, v))
}

/// One write-noise sample for an ideal change `dg`.
pub fn write_noise<R: rand::Rng + ?Sized>(dg: f64, gamma: f64, cfg: &CrossbarConfig, rng: &mut R) -> f64 {
    let sigma = gamma * (cfg.g_range() * dg.abs()).sqrt();
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// Identifies the random stream of one layer update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateKey {
    pub iteration: u64,
    pub layer: u64,
}

/// Applies one SGD step `W -= lr * dW` through the device model and
/// regenerates the programmed tiles.
///
/// Works on normalised device states (`s = (g - g_min) / (g_max - g_min)`).
/// The signed state `u = s_pos - s_neg` moves by `-lr * dW / layer_scale`;
/// the move is written to the device currently encoding the weight and
/// switches to the other device when the weight crosses zero. Noise lands on
/// the device active after the move. Every state is clamped to `[0, 1]`.
pub fn apply_update(t: &mut TiledLayerWeights, dw: ArrayView2<f64>, spec: &UpdateSpec, key: UpdateKey) -> Result<()> {
    spec.validate()?;
    if dw.dim() != (t.inputs(), t.outputs()) {
        return Err(Error::arg(format!(
            "gradient shape {:?} does not match layer shape {:?}",
            dw.dim(),
            (t.inputs(), t.outputs())
        )));
    }
    if let Some(bad) = dw.iter().find(|x| !x.is_finite()) {
        return Err(Error::arg(format!("gradient contains non-finite value {bad}")));
    }
    let scale = spec.scale_for(t)?;
    let (v, gamma, lr) = (spec.v, spec.gamma, spec.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, key.iteration, key.layer]));

    let (pos, neg) = t.master_states_mut();
    for ((p, n), &g) in pos.iter_mut().zip(neg.iter_mut()).zip(dw.iter()) {
        let d = g / scale;
        let delta = -(lr * d);
        let (mut s, mut positive) = if *p > 0.0 {
            (*p, true)
        } else if *n > 0.0 {
            (*n, false)
        } else {
            (0.0, delta >= 0.0)
        };
        let dev = if positive { delta } else { -delta };
        if dev >= 0.0 {
            s += dev * attenuation(s, true, v);
        } else {
            let written = dev * attenuation(s, false, v);
            if s + written >= 0.0 {
                s += written;
            } else {
                // Depress to the rail, spend the remaining ideal change on the
                // other device.
                let used = s / attenuation(s, false, v);
                let rest = -(dev + used);
                positive = !positive;
                s = rest * attenuation(0.0, true, v);
            }
        }
        if gamma > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            s += lr * gamma * d.abs().sqrt() * z;
        }
        let s = s.clamp(0.0, 1.0);
        if positive {
            *p = s;
            *n = 0.0;
        } else {
            *n = s;
            *p = 0.0;
        }
    }
    t.regenerate_tiles();
    Ok(())
}
