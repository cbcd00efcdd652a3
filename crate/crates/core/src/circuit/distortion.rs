//! Cached relative conductance distortion, refreshed every `L` iterations.

use ndarray::{Array1, Array2};

use super::{aam_convert_with, fcm_convert, AamPaths, ConductanceTile, FcmOptions};
use crate::error::{Error, Result};

/// Engine used to (re)compute the distortion profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefreshEngine {
    Fcm(FcmOptions),
    Aam(AamPaths),
}

/// Per-device `(g_ideal - g_nonideal) / g_ideal` of the last engine run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionCache {
    d: Array2<f64>,
    refresh_interval: usize,
    age: usize,
    /// Ideal tile and engine output of the last refresh; reused verbatim while
    /// the ideal conductances are unchanged.
    last: Option<(Array2<f64>, Array2<f64>)>,
}

impl DistortionCache {
    /// An empty cache that must be refreshed before first use.
    pub fn new(rows: usize, cols: usize, refresh_interval: usize) -> Result<Self> {
        if refresh_interval == 0 {
            return Err(Error::arg("refresh interval must be >= 1"));
        }
        Ok(Self { d: Array2::zeros((rows, cols)), refresh_interval, age: refresh_interval, last: None })
    }

    pub fn distortion(&self) -> &Array2<f64> {
        &self.d
    }

    pub fn refresh_interval(&self) -> usize {
        self.refresh_interval
    }

    pub fn age(&self) -> usize {
        self.age
    }

    pub fn needs_refresh(&self) -> bool {
        self.age >= self.refresh_interval
    }
}

/// Runs `engine` on the ideal tile and stores its relative distortion.
/// FCM is calibrated with every row at full scale.
pub fn refresh_distortion(cache: &mut DistortionCache, tile: &ConductanceTile, engine: RefreshEngine) -> Result<ConductanceTile> {
    if cache.d.dim() != tile.g().dim() {
        return Err(Error::arg(format!(
            "cache shape {:?} does not match tile shape {:?}",
            cache.d.dim(),
            tile.g().dim()
        )));
    }
    let nonideal = match engine {
        RefreshEngine::Fcm(opts) => {
            let v_cal = Array1::from_elem(tile.rows(), tile.config().v_fs);
            fcm_convert(tile, v_cal.view(), opts)?
        }
        RefreshEngine::Aam(paths) => aam_convert_with(tile, paths),
    };
    let g = tile.g();
    for ((idx, d), &gn) in cache.d.indexed_iter_mut().zip(nonideal.g().iter()) {
        let gi = g[idx];
        *d = if gi == 0.0 { 0.0 } else { (gi - gn) / gi };
    }
    cache.age = 0;
    cache.last = Some((g.clone(), nonideal.g().clone()));
    Ok(nonideal)
}

/// `g_ideal * (1 - d)`; ages the cache by one iteration.
pub fn apply_distortion(cache: &mut DistortionCache, tile: &ConductanceTile) -> Result<ConductanceTile> {
    if cache.needs_refresh() {
        return Err(Error::StaleCache { age: cache.age, interval: cache.refresh_interval });
    }
    if cache.d.dim() != tile.g().dim() {
        return Err(Error::arg("cache shape does not match tile shape"));
    }
    let out = match &cache.last {
        Some((ideal, nonideal)) if ideal == tile.g() => nonideal.clone(),
        _ => {
            let mut out = tile.g().clone();
            out.zip_mut_with(&cache.d, |g, &d| *g *= 1.0 - d);
            out
        }
    };
    cache.age += 1;
    Ok(ConductanceTile::from_parts_unchecked(*tile.config(), out))
}
