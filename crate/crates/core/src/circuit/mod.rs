//! Crossbar circuit models.
//!
//! Geometry: row drivers sit on the left edge and feed cell `(i, 0)` through
//! `r_source` plus one row segment; each column is sensed at its foot, below
//! row `rows - 1`, through one column segment plus `r_sense`. Rows are indexed
//! from 0 at the top, columns from 0 at the driver side.
//!
//! Three engines turn an ideal [`ConductanceTile`] into its non-ideal
//! counterpart: the exact nodal solve ([`solve_nodal_oracle`]), the
//! row/column ladder relaxation ([`fcm_convert`]) and the closed-form
//! path model ([`aam_convert`]). [`DistortionCache`] stores the relative
//! distortion of one engine run so it can be reapplied cheaply.

mod aam;
mod distortion;
mod fcm;
mod ladder;
mod nodal;

pub use aam::{aam_convert, aam_convert_with, AamPaths};
pub use distortion::{apply_distortion, refresh_distortion, DistortionCache, RefreshEngine};
pub use fcm::{fcm_convert, FcmOptions, DEFAULT_FCM_MAX_ITER, DEFAULT_FCM_TOL};
pub use nodal::{solve_nodal_oracle, NodalSolution};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and parasitic/device parameters of one crossbar array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossbarConfig {
    pub rows: usize,
    pub cols: usize,
    /// Ohms per row wire segment.
    pub r_row: f64,
    /// Ohms per column wire segment.
    pub r_col: f64,
    /// Row driver output resistance.
    pub r_source: f64,
    /// Column sense node input resistance.
    pub r_sense: f64,
    /// Minimum device conductance (siemens).
    pub g_min: f64,
    /// Maximum device conductance (siemens).
    pub g_max: f64,
    /// Full-scale row input voltage.
    pub v_fs: f64,
}

impl Default for CrossbarConfig {
    /// 64x64 array of 100 kOhm - 1 MOhm devices with 1 Ohm / 4.6 Ohm wire segments.
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            r_row: 1.0,
            r_col: 4.6,
            r_source: 0.0,
            r_sense: 0.0,
            g_min: 1.0 / 1.0e6,
            g_max: 1.0 / 1.0e5,
            v_fs: 1.0,
        }
    }
}

impl CrossbarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::arg("crossbar rows and cols must be >= 1"));
        }
        for (name, r) in [
            ("r_row", self.r_row),
            ("r_col", self.r_col),
            ("r_source", self.r_source),
            ("r_sense", self.r_sense),
        ] {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::arg(format!("{name} must be finite and >= 0, got {r}")));
            }
        }
        if !(self.g_min.is_finite() && self.g_max.is_finite() && 0.0 < self.g_min && self.g_min < self.g_max) {
            return Err(Error::arg(format!(
                "need 0 < g_min < g_max, got g_min={} g_max={}",
                self.g_min, self.g_max
            )));
        }
        if !(self.v_fs.is_finite() && self.v_fs > 0.0) {
            return Err(Error::arg(format!("v_fs must be > 0, got {}", self.v_fs)));
        }
        Ok(())
    }

    /// `R_max / R_min`, equivalently `g_max / g_min`.
    pub fn on_off_ratio(&self) -> f64 {
        self.g_max / self.g_min
    }

    pub fn g_range(&self) -> f64 {
        self.g_max - self.g_min
    }

    pub fn has_parasitics(&self) -> bool {
        self.r_row > 0.0 || self.r_col > 0.0 || self.r_source > 0.0 || self.r_sense > 0.0
    }

    /// Same device range, all wire/driver/sense resistances set to zero.
    pub fn without_parasitics(&self) -> Self {
        Self {
            r_row: 0.0,
            r_col: 0.0,
            r_source: 0.0,
            r_sense: 0.0,
            ..*self
        }
    }
}

/// A `rows x cols` matrix of device conductances programmed into one array.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductanceTile {
    config: CrossbarConfig,
    g: Array2<f64>,
}

impl ConductanceTile {
    /// Wraps a conductance matrix. Entries must be finite and non-negative and
    /// the matrix must fit inside the physical array.
    pub fn new(config: CrossbarConfig, g: Array2<f64>) -> Result<Self> {
        config.validate()?;
        let (r, c) = g.dim();
        if r == 0 || c == 0 {
            return Err(Error::arg("conductance tile must be non-empty"));
        }
        if r > config.rows || c > config.cols {
            return Err(Error::arg(format!(
                "tile {r}x{c} does not fit in a {}x{} crossbar",
                config.rows, config.cols
            )));
        }
        if let Some(bad) = g.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::arg(format!("conductance must be finite and >= 0, got {bad}")));
        }
        Ok(Self { config, g })
    }

    /// Uniform tile, every device at `value`.
    pub fn uniform(config: CrossbarConfig, rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(config, Array2::from_elem((rows, cols), value))
    }

    pub fn config(&self) -> &CrossbarConfig {
        &self.config
    }

    pub fn g(&self) -> &Array2<f64> {
        &self.g
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.g
    }

    pub fn rows(&self) -> usize {
        self.g.nrows()
    }

    pub fn cols(&self) -> usize {
        self.g.ncols()
    }

    /// True when every entry lies in `[g_min, g_max]`.
    pub fn is_ideal(&self) -> bool {
        let (lo, hi) = (self.config.g_min, self.config.g_max);
        self.g.iter().all(|&v| v >= lo && v <= hi)
    }

    /// Same conductances under a different parasitic configuration.
    pub fn with_config(&self, config: CrossbarConfig) -> Result<Self> {
        Self::new(config, self.g.clone())
    }

    /// Column currents `G^T v` of the tile treated as a plain conductance matrix.
    pub fn column_currents(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.rows() {
            return Err(Error::arg(format!(
                "input length {} does not match tile rows {}",
                v.len(),
                self.rows()
            )));
        }
        Ok(self.g.t().dot(&v))
    }

    pub(crate) fn from_parts_unchecked(config: CrossbarConfig, g: Array2<f64>) -> Self {
        Self { config, g }
    }
}

pub(crate) fn check_inputs(tile: &ConductanceTile, v: ArrayView1<f64>, what: &str) -> Result<()> {
    if v.len() != tile.rows() {
        return Err(Error::arg(format!(
            "{what} has length {} but tile has {} rows",
            v.len(),
            tile.rows()
        )));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::arg(format!("{what} contains non-finite value {bad}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = CrossbarConfig::default();
        cfg.validate().unwrap();
        assert!((cfg.on_off_ratio() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_ranges() {
        let mut cfg = CrossbarConfig::default();
        cfg.g_min = cfg.g_max;
        assert!(cfg.validate().is_err());
        let mut cfg = CrossbarConfig::default();
        cfg.r_col = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = CrossbarConfig::default();
        cfg.rows = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tile_must_fit() {
        let cfg = CrossbarConfig { rows: 4, cols: 4, ..Default::default() };
        assert!(ConductanceTile::uniform(cfg, 5, 4, 1e-6).is_err());
        assert!(ConductanceTile::uniform(cfg, 4, 4, -1e-6).is_err());
        assert!(ConductanceTile::uniform(cfg, 4, 4, 1e-6).unwrap().is_ideal());
    }
}
