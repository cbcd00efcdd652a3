//! Browser bindings for the crossbar simulator demo page.
//!
//! Each export returns a flat `Float64Array` that the page draws onto a
//! canvas; matrices are row-major.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;
use xbar_core::circuit::{aam_convert, fcm_convert, ConductanceTile, CrossbarConfig, FcmOptions};
use xbar_core::update::{nonlinear_update, write_noise};

fn tile(size: usize, r_on: f64, r_off: f64, r_row: f64, r_col: f64, seed: u64) -> Result<ConductanceTile, String> {
    if size == 0 || size > 128 {
        return Err(format!("tile size must be in 1..=128, got {size}"));
    }
    if !(r_on > 0.0 && r_off > r_on) {
        return Err(format!("need 0 < r_on < r_off, got {r_on} and {r_off}"));
    }
    let cfg = CrossbarConfig { rows: size, cols: size, r_row, r_col, g_min: 1.0 / r_off, g_max: 1.0 / r_on, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Array2::from_shape_fn((size, size), |_| rng.random_range(cfg.g_min..=cfg.g_max));
    ConductanceTile::new(cfg, g).map_err(|e| e.to_string())
}

fn fcm(t: &ConductanceTile) -> Result<ConductanceTile, String> {
    let v = Array1::from_elem(t.rows(), t.config().v_fs);
    fcm_convert(t, v.view(), FcmOptions::default()).map_err(|e| e.to_string())
}

/// `1 - g_nonideal / g` of a random tile under FCM: how much of each
/// device's conductance the wires take away.
pub fn distortion(size: usize, r_on: f64, r_off: f64, r_row: f64, r_col: f64, seed: u64) -> Result<Vec<f64>, String> {
    let t = tile(size, r_on, r_off, r_row, r_col, seed)?;
    let f = fcm(&t)?;
    Ok(f.g().iter().zip(t.g()).map(|(n, g)| 1.0 - n / g).collect())
}

/// `|g_aam - g_fcm| / g_fcm` of a random tile.
pub fn aam_error(size: usize, r_on: f64, r_off: f64, r_row: f64, r_col: f64, seed: u64) -> Result<Vec<f64>, String> {
    let t = tile(size, r_on, r_off, r_row, r_col, seed)?;
    let f = fcm(&t)?;
    let a = aam_convert(&t);
    Ok(a.g().iter().zip(f.g()).map(|(a, f)| (a - f).abs() / f).collect())
}

/// Normalised device state after each of `pulses` identical potentiating
/// writes followed by as many depressing ones, starting from `g_min`.
pub fn update_response(v: f64, gamma: f64, pulses: usize, step: f64, seed: u64) -> Result<Vec<f64>, String> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(format!("step must be in (0, 1], got {step}"));
    }
    let cfg = CrossbarConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = cfg.g_min;
    let mut out = Vec::with_capacity(2 * pulses + 1);
    out.push(0.0);
    for k in 0..2 * pulses {
        let dg = if k < pulses { step } else { -step } * cfg.g_range();
        let written = nonlinear_update(g, dg, v, &cfg).map_err(|e| e.to_string())?;
        g = (g + written + write_noise(dg, gamma, &cfg, &mut rng)).clamp(cfg.g_min, cfg.g_max);
        out.push((g - cfg.g_min) / cfg.g_range());
    }
    Ok(out)
}

#[wasm_bindgen(js_name = distortionMap)]
pub fn distortion_map(size: usize, r_on: f64, r_off: f64, r_row: f64, r_col: f64, seed: u32) -> Result<Vec<f64>, JsValue> {
    distortion(size, r_on, r_off, r_row, r_col, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = aamErrorMap)]
pub fn aam_error_map(size: usize, r_on: f64, r_off: f64, r_row: f64, r_col: f64, seed: u32) -> Result<Vec<f64>, JsValue> {
    aam_error(size, r_on, r_off, r_row, r_col, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = updateCurve)]
pub fn update_curve(v: f64, gamma: f64, pulses: usize, step: f64, seed: u32) -> Result<Vec<f64>, JsValue> {
    update_response(v, gamma, pulses, step, seed as u64).map_err(|e| JsValue::from_str(&e))
}
