//! Mapping of a layer's weight matrix onto differential, bit-sliced tiles.
//!
//! The weight matrix is laid out in crossbar orientation: `w[[i, j]]` couples
//! input `i` (a crossbar row) to output `j` (a crossbar column). Each weight
//! is held as a pair of full-precision device states in `[0, 1]` (fraction of
//! the conductance range) on a positive and a negative device; only one of the
//! two is ever non-zero. Programmed tiles are derived from these states by
//! quantising `|w|` to `weight_bits`, cutting the code into `device_bits`
//! slices and mapping every slice level linearly onto `[g_min, g_max]`.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::circuit::{ConductanceTile, CrossbarConfig};
use crate::error::{Error, Result};
use crate::rng::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSpec {
    /// Precision of the weight magnitude; the sign is carried by the pair.
    pub weight_bits: u32,
    /// Bits stored per device.
    pub device_bits: u32,
    pub tile_rows: usize,
    pub tile_cols: usize,
    /// Relative std of the multiplicative device-to-device variation.
    #[serde(default)]
    pub variation_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Weight mapped to a full-range device. Defaults to `max |W|` at mapping time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wmax: Option<f64>,
}

impl Default for MappingSpec {
    fn default() -> Self {
        Self {
            weight_bits: 8,
            device_bits: 2,
            tile_rows: 64,
            tile_cols: 64,
            variation_sigma: 0.0,
            seed: 0,
            wmax: None,
        }
    }
}

impl MappingSpec {
    pub fn validate(&self, cfg: &CrossbarConfig) -> Result<()> {
        if self.device_bits == 0 || self.weight_bits == 0 || self.weight_bits > 48 {
            return Err(Error::arg("weight_bits must be in 1..=48 and device_bits >= 1"));
        }
        if self.weight_bits % self.device_bits != 0 {
            return Err(Error::arg(format!(
                "mapping.weight_bits ({}) must be divisible by mapping.device_bits ({})",
                self.weight_bits, self.device_bits
            )));
        }
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(Error::arg("tile dimensions must be >= 1"));
        }
        if self.tile_rows > cfg.rows || self.tile_cols > cfg.cols {
            return Err(Error::arg(format!(
                "mapping.tile_rows x mapping.tile_cols ({}x{}) exceeds crossbar.rows x crossbar.cols ({}x{})",
                self.tile_rows, self.tile_cols, cfg.rows, cfg.cols
            )));
        }
        if !(self.variation_sigma.is_finite() && self.variation_sigma >= 0.0) {
            return Err(Error::arg("variation_sigma must be >= 0"));
        }
        if let Some(w) = self.wmax {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::arg("wmax must be > 0"));
            }
        }
        Ok(())
    }

    pub fn slices(&self) -> usize {
        (self.weight_bits / self.device_bits) as usize
    }

    /// Largest weight code, `2^weight_bits - 1`.
    pub fn weight_levels(&self) -> u64 {
        (1u64 << self.weight_bits) - 1
    }

    pub fn device_levels(&self) -> u64 {
        (1u64 << self.device_bits) - 1
    }
}

/// Quantises a normalised magnitude in `[0, 1]` to a weight code.
pub fn quantize_magnitude(x: f64, levels: u64) -> u64 {
    (x.clamp(0.0, 1.0) * levels as f64).round() as u64
}

/// One programmed copy of the layer: a grid of tiles per slice and polarity.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    /// `pos[slice][tile_row][tile_col]`
    pub pos: Vec<Vec<Vec<ConductanceTile>>>,
    pub neg: Vec<Vec<Vec<ConductanceTile>>>,
}

impl TileGrid {
    pub fn iter(&self) -> impl Iterator<Item = &ConductanceTile> {
        self.pos.iter().chain(self.neg.iter()).flatten().flatten()
    }

    pub fn map_tiles(&self, mut f: impl FnMut(&ConductanceTile) -> Result<ConductanceTile>) -> Result<TileGrid> {
        let mut map = |side: &Vec<Vec<Vec<ConductanceTile>>>| -> Result<Vec<Vec<Vec<ConductanceTile>>>> {
            side.iter()
                .map(|grid| grid.iter().map(|row| row.iter().map(&mut f).collect()).collect())
                .collect()
        };
        Ok(TileGrid { pos: map(&self.pos)?, neg: map(&self.neg)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiledLayerWeights {
    spec: MappingSpec,
    config: CrossbarConfig,
    layer_scale: f64,
    /// Full-precision device states in `[0, 1]`, shape `inputs x outputs`.
    master_pos: Array2<f64>,
    master_neg: Array2<f64>,
    tiles: TileGrid,
}

/// Maps `w` (inputs x outputs) onto tiles.
pub fn map_weights(w: ArrayView2<f64>, spec: &MappingSpec, cfg: &CrossbarConfig) -> Result<TiledLayerWeights> {
    spec.validate(cfg)?;
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::arg("weight matrix is empty"));
    }
    if let Some(bad) = w.iter().find(|x| !x.is_finite()) {
        return Err(Error::arg(format!("weight matrix contains non-finite value {bad}")));
    }
    let max_abs = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let layer_scale = spec.wmax.unwrap_or(if max_abs > 0.0 { max_abs } else { 1.0 });
    let u = w.mapv(|x| (x / layer_scale).clamp(-1.0, 1.0));
    let master_pos = u.mapv(|x| x.max(0.0));
    let master_neg = u.mapv(|x| (-x).max(0.0));
    let mut t = TiledLayerWeights {
        spec: spec.clone(),
        config: *cfg,
        layer_scale,
        master_pos,
        master_neg,
        tiles: TileGrid { pos: Vec::new(), neg: Vec::new() },
    };
    t.regenerate_tiles();
    Ok(t)
}

impl TiledLayerWeights {
    pub fn spec(&self) -> &MappingSpec {
        &self.spec
    }

    pub fn config(&self) -> &CrossbarConfig {
        &self.config
    }

    pub fn layer_scale(&self) -> f64 {
        self.layer_scale
    }

    pub fn inputs(&self) -> usize {
        self.master_pos.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.master_pos.ncols()
    }

    /// `(tile rows, tile cols)` of the grid.
    pub fn grid_dims(&self) -> (usize, usize) {
        (
            self.inputs().div_ceil(self.spec.tile_rows),
            self.outputs().div_ceil(self.spec.tile_cols),
        )
    }

    pub fn tiles(&self) -> &TileGrid {
        &self.tiles
    }

    /// Device states of the positive and negative master copies, `[0, 1]`.
    pub fn master_states(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.master_pos, &self.master_neg)
    }

    pub(crate) fn master_states_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>) {
        (&mut self.master_pos, &mut self.master_neg)
    }

    /// Full-precision ideal conductances of the master copy, in siemens.
    pub fn g_ideal_master(&self) -> (Array2<f64>, Array2<f64>) {
        let c = self.config;
        let to_g = |s: &f64| c.g_min + s * c.g_range();
        (self.master_pos.map(to_g), self.master_neg.map(to_g))
    }

    /// Full-precision weights held by the master copy.
    pub fn master_weights(&self) -> Array2<f64> {
        (&self.master_pos - &self.master_neg) * self.layer_scale
    }

    /// Signed weight codes, `sign * round(|u| * (2^weight_bits - 1))`.
    pub fn weight_codes(&self) -> Array2<i64> {
        let levels = self.spec.weight_levels();
        ndarray::Zip::from(&self.master_pos).and(&self.master_neg).map_collect(|&p, &n| {
            if p > 0.0 {
                quantize_magnitude(p, levels) as i64
            } else {
                -(quantize_magnitude(n, levels) as i64)
            }
        })
    }

    /// Weight value of one code step.
    pub fn weight_lsb(&self) -> f64 {
        self.layer_scale / self.spec.weight_levels() as f64
    }

    /// Quantised weights the tiles represent.
    pub fn quantized_weights(&self) -> Array2<f64> {
        let lsb = self.weight_lsb();
        self.weight_codes().mapv(|q| q as f64 * lsb)
    }

    /// Rebuilds the ideal tiles from the master device states.
    pub fn regenerate_tiles(&mut self) {
        let spec = &self.spec;
        let cfg = self.config;
        let codes = self.weight_codes();
        let (tr, tc) = self.grid_dims();
        let (rows, cols) = (self.inputs(), self.outputs());
        let mask = spec.device_levels();
        let step = cfg.g_range() / spec.device_levels() as f64;
        let build = |slice: usize, positive: bool| -> Vec<Vec<ConductanceTile>> {
            (0..tr)
                .map(|bi| {
                    (0..tc)
                        .map(|bj| {
                            let mut g = Array2::from_elem((spec.tile_rows, spec.tile_cols), cfg.g_min);
                            let (r0, c0) = (bi * spec.tile_rows, bj * spec.tile_cols);
                            for i in 0..spec.tile_rows.min(rows - r0) {
                                for j in 0..spec.tile_cols.min(cols - c0) {
                                    let q = codes[[r0 + i, c0 + j]];
                                    if (q > 0) == positive && q != 0 {
                                        let level = (q.unsigned_abs() >> (slice as u32 * spec.device_bits)) & mask;
                                        g[[i, j]] = cfg.g_min + level as f64 * step;
                                    }
                                }
                            }
                            ConductanceTile::from_parts_unchecked(cfg, g)
                        })
                        .collect()
                })
                .collect()
        };
        let slices = spec.slices();
        self.tiles = TileGrid {
            pos: (0..slices).map(|k| build(k, true)).collect(),
            neg: (0..slices).map(|k| build(k, false)).collect(),
        };
    }

    /// Splits a full-length input vector into per-tile-row chunks padded with zeros.
    pub fn split_inputs(&self, x: &[f64]) -> Vec<Array1<f64>> {
        let tr = self.spec.tile_rows;
        (0..self.grid_dims().0)
            .map(|bi| {
                let mut v = Array1::zeros(tr);
                let lo = bi * tr;
                let hi = (lo + tr).min(x.len());
                v.slice_mut(s![..hi - lo]).assign(&ndarray::ArrayView1::from(&x[lo..hi]));
                v
            })
            .collect()
    }
}

/// Multiplies every device by an independent `Normal(1, sigma)` factor,
/// clamped to `(0, g_max]`. Only the programmed tiles change; the master
/// states are left untouched. The same seed gives the same factors, so a
/// fixed seed models static device-to-device variation.
pub fn apply_variation(t: &TiledLayerWeights, sigma: f64, seed: u64) -> Result<TiledLayerWeights> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::arg(format!("variation sigma must be >= 0, got {sigma}")));
    }
    let mut out = t.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    out.tiles = vary_grid(&t.tiles, sigma, seed)?;
    Ok(out)
}

pub(crate) fn vary_grid(grid: &TileGrid, sigma: f64, seed: u64) -> Result<TileGrid> {
    let normal = Normal::new(1.0, sigma).map_err(|e| Error::arg(e.to_string()))?;
    let mut counter = 0u64;
    grid.map_tiles(|tile| {
        counter += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, counter]));
        let cfg = *tile.config();
        let floor = cfg.g_min * 1e-6;
        let g = tile.g().mapv(|g| (g * normal.sample(&mut rng)).clamp(floor, cfg.g_max));
        Ok(ConductanceTile::from_parts_unchecked(cfg, g))
    })
}

/// Per-slice digital partial sums of one output block, for both polarities.
/// Values are in units of one device level times one input LSB.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlicePartials {
    pub pos: Vec<Array1<f64>>,
    pub neg: Vec<Array1<f64>>,
}

/// Recombines slice partial sums: `scale * sum_k 2^(k * device_bits) * (pos_k - neg_k)`.
///
/// Every slice difference is rounded to the integer accumulator grid before
/// the shift-add.
pub fn reconstruct_output(partials: &SlicePartials, spec: &MappingSpec, scale: f64) -> Result<Array1<f64>> {
    let slices = spec.slices();
    if partials.pos.len() != slices || partials.neg.len() != slices {
        return Err(Error::arg(format!(
            "expected {slices} slices per polarity, got {} positive and {} negative",
            partials.pos.len(),
            partials.neg.len()
        )));
    }
    let n = partials.pos[0].len();
    if partials.pos.iter().chain(partials.neg.iter()).any(|p| p.len() != n) {
        return Err(Error::arg("slice partial sums have inconsistent lengths"));
    }
    let mut acc = Array1::<f64>::zeros(n);
    for k in 0..slices {
        let weight = (1u64 << (k as u32 * spec.device_bits)) as f64;
        for j in 0..n {
            acc[j] += weight * (partials.pos[k][j] - partials.neg[k][j]).round();
        }
    }
    Ok(acc * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn small_spec() -> MappingSpec {
        MappingSpec { weight_bits: 4, device_bits: 2, tile_rows: 4, tile_cols: 4, ..Default::default() }
    }

    #[test]
    fn zero_weights_sit_at_g_min() {
        let cfg = CrossbarConfig::default();
        let t = map_weights(Array2::zeros((3, 5)).view(), &small_spec(), &cfg).unwrap();
        assert!(t.tiles().iter().all(|tile| tile.g().iter().all(|&g| g == cfg.g_min)));
    }

    #[test]
    fn full_scale_positive_weight() {
        let cfg = CrossbarConfig::default();
        let spec = MappingSpec { weight_bits: 2, device_bits: 2, ..small_spec() };
        let t = map_weights(array![[0.7]].view(), &spec, &cfg).unwrap();
        assert_eq!(t.tiles().pos[0][0][0].g()[[0, 0]], cfg.g_max);
        assert_eq!(t.tiles().neg[0][0][0].g()[[0, 0]], cfg.g_min);
        let t = map_weights(array![[-0.7]].view(), &spec, &cfg).unwrap();
        assert_eq!(t.tiles().pos[0][0][0].g()[[0, 0]], cfg.g_min);
        assert_eq!(t.tiles().neg[0][0][0].g()[[0, 0]], cfg.g_max);
    }

    #[test]
    fn slices_and_grid_layout() {
        let cfg = CrossbarConfig::default();
        let spec = MappingSpec { weight_bits: 8, device_bits: 2, wmax: Some(255.0), ..small_spec() };
        // code 0b10_01_11_00 = 156
        let mut w = Array2::zeros((5, 6));
        w[[4, 5]] = 156.0;
        let t = map_weights(w.view(), &spec, &cfg).unwrap();
        assert_eq!(t.grid_dims(), (2, 2));
        let step = cfg.g_range() / 3.0;
        let levels: Vec<f64> = (0..4).map(|k| t.tiles().pos[k][1][1].g()[[0, 1]]).collect();
        let want: Vec<f64> = [0.0, 3.0, 1.0, 2.0].iter().map(|l| cfg.g_min + l * step).collect();
        assert_eq!(levels, want);
        // padding cells stay at g_min
        assert_eq!(t.tiles().pos[3][1][1].g()[[3, 3]], cfg.g_min);
    }

    #[test]
    fn non_finite_and_bad_spec() {
        let cfg = CrossbarConfig::default();
        assert!(map_weights(array![[f64::NAN]].view(), &small_spec(), &cfg).is_err());
        let bad = MappingSpec { weight_bits: 5, ..small_spec() };
        assert!(map_weights(array![[1.0]].view(), &bad, &cfg).is_err());
        let big = MappingSpec { tile_rows: 128, ..small_spec() };
        let msg = big.validate(&cfg).unwrap_err().to_string();
        assert!(msg.contains("tile_rows") && msg.contains("crossbar.rows"), "{msg}");
    }

    #[test]
    fn differential_exclusivity() {
        let cfg = CrossbarConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Array2::from_shape_fn((9, 7), |_| rng.random_range(-1.0..1.0));
        let t = map_weights(w.view(), &small_spec(), &cfg).unwrap();
        let (tr, tc) = t.grid_dims();
        for bi in 0..tr {
            for bj in 0..tc {
                for i in 0..4 {
                    for j in 0..4 {
                        let pos_on = (0..2).any(|k| t.tiles().pos[k][bi][bj].g()[[i, j]] > cfg.g_min);
                        let neg_on = (0..2).any(|k| t.tiles().neg[k][bi][bj].g()[[i, j]] > cfg.g_min);
                        assert!(!(pos_on && neg_on));
                    }
                }
            }
        }
    }

    #[test]
    fn variation_statistics_and_determinism() {
        let cfg = CrossbarConfig::default();
        let spec = MappingSpec { weight_bits: 2, device_bits: 2, tile_rows: 64, tile_cols: 64, ..Default::default() };
        // 2 polarities x 13 tiles x 4096 devices > 1e5, all at g_min
        let t = map_weights(Array2::zeros((64 * 13, 64)).view(), &spec, &cfg).unwrap();
        assert_eq!(apply_variation(&t, 0.0, 1).unwrap(), t);
        let a = apply_variation(&t, 0.1, 42).unwrap();
        let b = apply_variation(&t, 0.1, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.master_states(), t.master_states());
        let ratios: Vec<f64> = a.tiles().iter().flat_map(|tile| tile.g().iter().map(|g| g / cfg.g_min).collect::<Vec<_>>()).collect();
        assert!(ratios.len() >= 100_000);
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.1).abs() < 0.002, "sd {sd}");
        assert!(apply_variation(&t, -0.1, 1).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let spec = small_spec();
        let zeros = SlicePartials { pos: vec![Array1::zeros(3); 2], neg: vec![Array1::zeros(3); 2] };
        assert_eq!(reconstruct_output(&zeros, &spec, 2.0).unwrap(), Array1::<f64>::zeros(3));
        let same = SlicePartials { pos: vec![array![1.0, 5.0], array![2.0, 3.0]], neg: vec![array![1.0, 5.0], array![2.0, 3.0]] };
        assert_eq!(reconstruct_output(&same, &spec, 1.0).unwrap(), array![0.0, 0.0]);
        let p = SlicePartials { pos: vec![array![3.0], array![1.0]], neg: vec![array![0.0], array![0.0]] };
        // 3 + 4 * 1
        assert_eq!(reconstruct_output(&p, &spec, 0.5).unwrap(), array![3.5]);
        let missing = SlicePartials { pos: vec![array![1.0]], neg: vec![array![1.0]] };
        assert!(reconstruct_output(&missing, &spec, 1.0).is_err());
    }
}
