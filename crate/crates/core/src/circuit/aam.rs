//! Closed-form approximate model of the parasitic network.
//!
//! Each device sees only its own row-to-column path: the driver, the row
//! segments between the driver and the device, the column segments between
//! the device and the sense foot, and the sense node.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ConductanceTile;

/// How many devices are assumed to load the path of each device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AamPaths {
    /// The device current alone flows through its path.
    Direct,
    /// Every wire segment on the path also carries the full-drive current of
    /// the other devices sharing it (all cells downstream on the row, all
    /// cells upstream on the column).
    #[default]
    Shared,
}

/// [`aam_convert_with`] using [`AamPaths::default`].
pub fn aam_convert(tile: &ConductanceTile) -> ConductanceTile {
    aam_convert_with(tile, AamPaths::default())
}

pub fn aam_convert_with(tile: &ConductanceTile, paths: AamPaths) -> ConductanceTile {
    let cfg = *tile.config();
    let g = tile.g();
    let (rows, cols) = g.dim();
    let mut out = Array2::zeros((rows, cols));
    if !cfg.has_parasitics() {
        return ConductanceTile::from_parts_unchecked(cfg, g.clone());
    }
    match paths {
        AamPaths::Direct => {
            for ((i, j), o) in out.indexed_iter_mut() {
                let gij = g[[i, j]];
                if gij > 0.0 {
                    let r_path = cfg.r_source + (j + 1) as f64 * cfg.r_row + (rows - i) as f64 * cfg.r_col + cfg.r_sense;
                    *o = 1.0 / (1.0 / gij + r_path);
                }
            }
        }
        AamPaths::Shared => {
            // Per unit of device current, the path drop is the sum over its
            // row segments of r_row * (conductance downstream on the row) plus
            // the sum over its column segments of r_col * (conductance
            // upstream on the column), with the driver and sense node
            // carrying the whole row or column. With total drop D per volt
            // across the device, G = 1 / (1/g + D/g) = g / (1 + D).
            let gs = g.as_standard_layout();
            let gs = gs.as_slice().expect("standard layout");
            let os = out.as_slice_mut().expect("fresh array");
            for (grow, orow) in gs.chunks_exact(cols).zip(os.chunks_exact_mut(cols)) {
                let mut downstream: f64 = grow.iter().sum();
                let mut acc = cfg.r_source * downstream;
                for (&gij, o) in grow.iter().zip(orow.iter_mut()) {
                    acc += cfg.r_row * downstream;
                    *o = acc;
                    downstream -= gij;
                }
            }
            let mut upstream = vec![0.0; cols];
            for grow in gs.chunks_exact(cols) {
                for (u, &gij) in upstream.iter_mut().zip(grow) {
                    *u += gij;
                }
            }
            let mut rise: Vec<f64> = upstream.iter().map(|&t| cfg.r_sense * t).collect();
            for (grow, orow) in gs.chunks_exact(cols).zip(os.chunks_exact_mut(cols)).rev() {
                for (((&gij, o), r), u) in grow.iter().zip(orow.iter_mut()).zip(rise.iter_mut()).zip(upstream.iter_mut()) {
                    *r += cfg.r_col * *u;
                    *o = if gij > 0.0 { gij / (1.0 + *o + *r) } else { 0.0 };
                    *u -= gij;
                }
            }
        }
    }
    ConductanceTile::from_parts_unchecked(cfg, out)
}
