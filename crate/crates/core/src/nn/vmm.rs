//! Vector-matrix products of one linear layer.
//!
//! Two interchangeable cores evaluate `y = x W`, `dx = dy W^T` and apply
//! weight gradients:
//!
//! * [`DigitalLinear`] is an exact fixed-point reference: integer products of
//!   quantised operands and plain SGD on a signed weight state.
//! * [`CrossbarLinear`] maps the weights onto differential, bit-sliced tiles
//!   and runs every product through DAC streaming, the (non-ideal) conductance
//!   matrices and the ADC, followed by a digital shift-add.
//!
//! Both cores quantise activations and errors row by row and rescale the same
//! integer accumulator, so with every non-ideality disabled the crossbar core
//! reproduces the reference bit for bit.

use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::tensor::{quantize_rows, QuantizedRows};
use crate::circuit::{
    aam_convert_with, apply_distortion, fcm_convert, refresh_distortion, solve_nodal_oracle, AamPaths,
    ConductanceTile, CrossbarConfig, DistortionCache, FcmOptions, RefreshEngine,
};
use crate::converters::{adc_quantize, dac_encode, AdcCalibrator, AdcSpec, DacSpec};
use crate::error::{Error, Result};
use crate::mapping::{map_weights, quantize_magnitude, vary_grid, MappingSpec, TileGrid, TiledLayerWeights};
use crate::update::{apply_update, UpdateKey, UpdateSpec};

/// Bit widths of the signed activations and errors fed to a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Precision {
    #[serde(default = "default_bits")]
    pub input_bits: u32,
    #[serde(default = "default_bits")]
    pub error_bits: u32,
}

fn default_bits() -> u32 {
    32
}

impl Default for Precision {
    fn default() -> Self {
        Self { input_bits: 32, error_bits: 32 }
    }
}

impl Precision {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("input_bits", self.input_bits), ("error_bits", self.error_bits)] {
            if b == 0 || b > 32 {
                return Err(Error::arg(format!("precision.{name} must be in 1..=32, got {b}")));
            }
        }
        Ok(())
    }
}

/// Conductance conversion used to obtain the non-ideal tiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Engine {
    /// Parasitics ignored; non-ideal tiles equal the programmed tiles.
    Ideal,
    /// Exact nodal solve for every forward product. The backward pass uses
    /// tightly converged FCM conductances.
    Oracle,
    Fcm(FcmOptions),
    Aam(AamPaths),
    /// FCM distortion profile refreshed every `interval` regenerations.
    InterpFcm { interval: usize, fcm: FcmOptions },
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Ideal => "ideal",
            Engine::Oracle => "oracle",
            Engine::Fcm(_) => "fcm",
            Engine::Aam(_) => "aam",
            Engine::InterpFcm { .. } => "interp_fcm",
        }
    }
}

const ORACLE_FCM: FcmOptions = FcmOptions { tol: 1e-12, max_iter: 100_000 };

/// Everything a crossbar-mapped layer needs besides its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarSettings {
    pub crossbar: CrossbarConfig,
    pub mapping: MappingSpec,
    pub dac: DacSpec,
    /// `None` passes column currents through unquantised.
    pub adc: Option<AdcSpec>,
    pub precision: Precision,
    pub engine: Engine,
    pub update: UpdateSpec,
}

impl CrossbarSettings {
    pub fn validate(&self) -> Result<()> {
        self.crossbar.validate()?;
        self.mapping.validate(&self.crossbar)?;
        self.dac.validate()?;
        if let Some(adc) = &self.adc {
            adc.validate()?;
        }
        self.precision.validate()?;
        self.update.validate()?;
        if self.dac.bits > 16 {
            return Err(Error::arg(format!("dac.bits must be <= 16, got {}", self.dac.bits)));
        }
        if self.dac.v_fs > self.crossbar.v_fs {
            return Err(Error::arg(format!(
                "dac.v_fs ({}) exceeds crossbar.v_fs ({})",
                self.dac.v_fs, self.crossbar.v_fs
            )));
        }
        for (name, b) in [("input_bits", self.precision.input_bits), ("error_bits", self.precision.error_bits)] {
            if b % self.dac.bits != 0 {
                return Err(Error::arg(format!(
                    "precision.{name} ({b}) must be divisible by dac.bits ({})",
                    self.dac.bits
                )));
            }
        }
        if let Engine::InterpFcm { interval: 0, .. } = self.engine {
            return Err(Error::arg("engine interval must be >= 1"));
        }
        Ok(())
    }

    /// Settings of the digital reference that this configuration reduces to
    /// when every non-ideality is disabled.
    pub fn digital_reference(&self) -> DigitalSettings {
        DigitalSettings {
            weight_bits: self.mapping.weight_bits,
            precision: self.precision,
            lr: self.update.lr,
            wmax: self.mapping.wmax,
            grad_scale: self.update.layer_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitalSettings {
    pub weight_bits: u32,
    pub precision: Precision,
    pub lr: f64,
    /// Weight mapped to full scale; defaults to `max |W|` at construction.
    pub wmax: Option<f64>,
    /// Weight step corresponding to a full-range state change; defaults to the weight scale.
    pub grad_scale: Option<f64>,
}

impl DigitalSettings {
    pub fn validate(&self) -> Result<()> {
        self.precision.validate()?;
        if self.weight_bits == 0 || self.weight_bits > 48 {
            return Err(Error::arg("weight_bits must be in 1..=48"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::arg(format!("lr must be > 0, got {}", self.lr)));
        }
        for s in [self.wmax, self.grad_scale].into_iter().flatten() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("weight scales must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Digital(DigitalSettings),
    Crossbar(Box<CrossbarSettings>),
}

impl Backend {
    pub fn validate(&self) -> Result<()> {
        match self {
            Backend::Digital(d) => d.validate(),
            Backend::Crossbar(c) => c.validate(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            Backend::Digital(d) => d.precision,
            Backend::Crossbar(c) => c.precision,
        }
    }
}

/// Cost of conductance regeneration since the counters were last taken.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EngineStats {
    /// Full engine conversions (one per tile).
    pub refreshes: u64,
    pub regen_time: Duration,
}

impl std::ops::AddAssign for EngineStats {
    fn add_assign(&mut self, rhs: Self) {
        self.refreshes += rhs.refreshes;
        self.regen_time += rhs.regen_time;
    }
}

/// `acc[b, j] * lsb[b] * w_lsb`.
pub fn rescale(acc: &Array2<i128>, row_lsb: &[f64], w_lsb: f64) -> Array2<f64> {
    let mut out = Array2::zeros(acc.dim());
    for ((b, j), &a) in acc.indexed_iter() {
        out[[b, j]] = a as f64 * row_lsb[b] * w_lsb;
    }
    out
}

/// Weight gradient `x^T dy` of the quantised operands.
pub fn weight_gradient(xq: &QuantizedRows, dyq: &QuantizedRows) -> Array2<f64> {
    xq.dequantize().t().dot(&dyq.dequantize())
}

fn int_matmul(a: &Array2<i64>, b: &Array2<i64>) -> Array2<i128> {
    let (n, k) = a.dim();
    let m = b.ncols();
    let b = b.as_standard_layout();
    let bs = b.as_slice().expect("standard layout");
    let mut out = vec![0i128; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[[i, p]];
            if x == 0 {
                continue;
            }
            let x = x as i128;
            for (o, &w) in row.iter_mut().zip(&bs[p * m..(p + 1) * m]) {
                *o += x * w as i128;
            }
        }
    }
    Array2::from_shape_vec((n, m), out).expect("shape")
}

/// Exact fixed-point layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalLinear {
    settings: DigitalSettings,
    scale: f64,
    /// Signed weight state in `[-1, 1]`; the weight is `u * scale`.
    u: Array2<f64>,
}

impl DigitalLinear {
    pub fn new(w: ArrayView2<f64>, settings: DigitalSettings) -> Result<Self> {
        settings.validate()?;
        if w.is_empty() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("weights must be a non-empty finite matrix"));
        }
        let max_abs = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = settings.wmax.unwrap_or(if max_abs > 0.0 { max_abs } else { 1.0 });
        let u = w.mapv(|x| (x / scale).clamp(-1.0, 1.0));
        Ok(Self { settings, scale, u })
    }

    fn levels(&self) -> u64 {
        (1u64 << self.settings.weight_bits) - 1
    }

    pub fn weight_codes(&self) -> Array2<i64> {
        let levels = self.levels();
        self.u.mapv(|u| {
            let q = quantize_magnitude(u.abs(), levels) as i64;
            if u < 0.0 {
                -q
            } else {
                q
            }
        })
    }

    pub fn weight_lsb(&self) -> f64 {
        self.scale / self.levels() as f64
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, QuantizedRows)> {
        check_cols(x, self.u.nrows(), "input")?;
        let xq = quantize_rows(x, self.settings.precision.input_bits)?;
        let acc = int_matmul(&xq.codes, &self.weight_codes());
        Ok((rescale(&acc, &xq.lsb, self.weight_lsb()), xq))
    }

    pub fn backward(&self, dy: ArrayView2<f64>) -> Result<(Array2<f64>, QuantizedRows)> {
        check_cols(dy, self.u.ncols(), "error")?;
        let dyq = quantize_rows(dy, self.settings.precision.error_bits)?;
        let wt = self.weight_codes().t().to_owned();
        let acc = int_matmul(&dyq.codes, &wt);
        Ok((rescale(&acc, &dyq.lsb, self.weight_lsb()), dyq))
    }

    /// `u <- clamp(u - lr * dW / scale, -1, 1)`.
    pub fn apply_gradient(&mut self, dw: ArrayView2<f64>) -> Result<()> {
        if dw.dim() != self.u.dim() {
            return Err(Error::arg("gradient shape does not match layer"));
        }
        let scale = self.settings.grad_scale.unwrap_or(self.scale);
        let lr = self.settings.lr;
        self.u.zip_mut_with(&dw, |u, &g| {
            let d = g / scale;
            let delta = -(lr * d);
            *u = (*u + delta).clamp(-1.0, 1.0);
        });
        Ok(())
    }

    pub fn quantized_weights(&self) -> Array2<f64> {
        let lsb = self.weight_lsb();
        self.weight_codes().mapv(|q| q as f64 * lsb)
    }
}

fn check_cols(x: ArrayView2<f64>, want: usize, what: &str) -> Result<()> {
    if x.ncols() != want {
        return Err(Error::arg(format!("{what} has {} features, layer expects {want}", x.ncols())));
    }
    Ok(())
}

/// `x.round() as i64` (ties away from zero) without a libm call or a
/// saturating cast; exact for `|x| < 2^51`.
#[inline]
fn round_to_i64(x: f64) -> i64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let y = x + MAGIC;
    let mut r = y.to_bits() as i64 - MAGIC.to_bits() as i64;
    let diff = x - (y - MAGIC);
    // The addition rounds ties to even; move them away from zero.
    if diff == 0.5 && x > 0.0 {
        r += 1;
    } else if diff == -0.5 && x < 0.0 {
        r -= 1;
    }
    r
}

/// `x.round()` for `0 <= x < 2^51` using only additions and a compare, so
/// loops over it vectorise. Values within one ulp below a half round up.
#[inline]
fn round_nonneg(x: f64) -> f64 {
    const MAGIC: f64 = 4_503_599_627_370_496.0; // 2^52
    let y = x + 0.5;
    let r = (y + MAGIC) - MAGIC;
    if r > y {
        r - 1.0
    } else {
        r
    }
}

/// Fractional bits kept below one device-level unit in the crossbar
/// accumulator, so attenuated or finely quantised readouts are not rounded
/// away. Ideal readouts are whole units and stay exact.
const FRAC_BITS: i32 = 16;

/// Converts a pair of column currents into the number of `unit`-sized steps
/// between them, after optional ADC quantisation.

struct Digitizer<'a> {
    adc: Option<&'a AdcSpec>,
    inv_unit: f64,
    /// `max_code / i_fs` for a linear ADC.
    gain: f64,
    top: f64,
    /// ADC step in units.
    lsb_units: f64,
}

impl<'a> Digitizer<'a> {
    fn new(adc: Option<&'a AdcSpec>, unit: f64) -> Self {
        let inv_unit = 2f64.powi(FRAC_BITS) / unit;
        let (gain, top, lsb_units) = match adc {
            Some(a) => (a.max_code() as f64 / a.i_fs, a.max_code() as f64, a.lsb() * inv_unit),
            None => (0.0, 0.0, 0.0),
        };
        Self { adc, inv_unit, gain, top, lsb_units }
    }

    /// Largest magnitude [`Digitizer::add`] can produce for `rows` driven inputs.
    fn bound(&self, rows: usize, cfg: &CrossbarConfig, v_max: f64) -> f64 {
        match self.adc {
            Some(a) => a.i_fs * self.inv_unit,
            None => rows as f64 * cfg.g_max * v_max * self.inv_unit,
        }
    }

    /// `out[j] += (ipos[j] - ineg[j]) << shift`, the difference taken in
    /// fixed-point units with [`FRAC_BITS`] fractional bits.
    fn add(&self, ipos: &[f64], ineg: &[f64], out: &mut [i64], shift: u32) {
        let pairs = ipos.iter().zip(ineg).zip(out.iter_mut());
        match self.adc {
            None => {
                for ((&p, &n), o) in pairs {
                    *o += round_to_i64((p - n) * self.inv_unit) << shift;
                }
            }
            Some(a) if a.transfer.is_none() => {
                let code = |i: f64| round_nonneg((i * self.gain).clamp(0.0, self.top));
                for ((&p, &n), o) in pairs {
                    // truncation only touches the last fractional bit
                    *o += (((code(p) - code(n)) * self.lsb_units) as i64) << shift;
                }
            }
            Some(a) => {
                for ((&p, &n), o) in pairs {
                    let d = a.dequantize(adc_quantize(p, a)) - a.dequantize(adc_quantize(n, a));
                    *o += round_to_i64(d * self.inv_unit) << shift;
                }
            }
        }
    }
}

/// Crossbar-mapped layer evaluated through the three-stage pipeline.
#[derive(Debug, Clone)]
pub struct CrossbarLinear {
    settings: CrossbarSettings,
    weights: TiledLayerWeights,
    /// Programmed tiles after device variation.
    programmed: TileGrid,
    /// Conductances seen by the array after the engine.
    nonideal: TileGrid,
    caches: Vec<DistortionCache>,
    adc_fwd: Option<AdcSpec>,
    adc_bwd: Option<AdcSpec>,
    volts: Vec<f64>,
    /// Whether `nonideal` holds engine output for `programmed`.
    converted: bool,
    stats: EngineStats,
}

impl CrossbarLinear {
    pub fn new(w: ArrayView2<f64>, settings: CrossbarSettings) -> Result<Self> {
        settings.validate()?;
        let weights = map_weights(w, &settings.mapping, &settings.crossbar)?;
        let volts = (0..=(1u64 << settings.dac.bits) - 1)
            .map(|l| dac_encode(l, &settings.dac))
            .collect::<Result<Vec<_>>>()?;
        let caches = match settings.engine {
            Engine::InterpFcm { interval, .. } => {
                let n = weights.tiles().iter().count();
                let m = &settings.mapping;
                (0..n)
                    .map(|_| DistortionCache::new(m.tile_rows, m.tile_cols, interval))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => Vec::new(),
        };
        let mut layer = Self {
            adc_fwd: settings.adc.clone(),
            adc_bwd: settings.adc.clone(),
            programmed: weights.tiles().clone(),
            nonideal: weights.tiles().clone(),
            settings,
            weights,
            caches,
            volts,
            converted: false,
            stats: EngineStats::default(),
        };
        layer.regenerate()?;
        Ok(layer)
    }

    pub fn settings(&self) -> &CrossbarSettings {
        &self.settings
    }

    pub fn weights(&self) -> &TiledLayerWeights {
        &self.weights
    }

    pub fn nonideal_tiles(&self) -> &TileGrid {
        &self.nonideal
    }

    pub fn distortion_caches(&self) -> &[DistortionCache] {
        &self.caches
    }

    /// ADC specs currently used by the forward and backward passes.
    pub fn adc_specs(&self) -> (Option<&AdcSpec>, Option<&AdcSpec>) {
        (self.adc_fwd.as_ref(), self.adc_bwd.as_ref())
    }

    /// Returns and clears the regeneration counters.
    pub fn take_stats(&mut self) -> EngineStats {
        std::mem::take(&mut self.stats)
    }

    /// Sets the ADC full scales from calibrators filled during earlier passes.
    /// A calibrator without observations, or one that saw only zero current,
    /// leaves its full scale unchanged.
    pub fn recalibrate(&mut self, fwd: &AdcCalibrator, bwd: &AdcCalibrator) -> Result<()> {
        for (adc, cal) in [(&mut self.adc_fwd, fwd), (&mut self.adc_bwd, bwd)] {
            if let Some(spec) = adc.as_mut() {
                if cal.sample_count() == 0 {
                    continue;
                }
                let i_fs = cal.calibrate(spec.clip_percentile)?;
                if i_fs > 0.0 {
                    spec.i_fs = i_fs;
                }
            }
        }
        Ok(())
    }

    /// Recomputes the programmed and non-ideal tiles from the master states.
    ///
    /// Conversions are pure functions of a tile, so tiles whose programmed
    /// conductances did not change since the last call keep their previous
    /// non-ideal conductances without being converted again.
    pub fn regenerate(&mut self) -> Result<()> {
        let sigma = self.settings.mapping.variation_sigma;
        let programmed = if sigma > 0.0 {
            vary_grid(self.weights.tiles(), sigma, self.settings.mapping.seed)?
        } else {
            self.weights.tiles().clone()
        };
        let start = Instant::now();
        let v_fs = self.settings.crossbar.v_fs;
        let mut refreshes = 0u64;
        let previous: Vec<(&ConductanceTile, &ConductanceTile)> = if self.converted {
            self.programmed.iter().zip(self.nonideal.iter()).collect()
        } else {
            Vec::new()
        };
        let mut index = 0;
        let mut convert = |t: &ConductanceTile, f: &dyn Fn(&ConductanceTile) -> Result<ConductanceTile>| {
            let prev = previous.get(index);
            index += 1;
            match prev {
                Some((p, n)) if p.g() == t.g() => Ok((*n).clone()),
                _ => {
                    refreshes += 1;
                    f(t)
                }
            }
        };
        let fcm = |opts: FcmOptions| {
            move |t: &ConductanceTile| {
                let v_cal = Array1::from_elem(t.rows(), v_fs);
                fcm_convert(t, v_cal.view(), opts)
            }
        };
        let nonideal = match self.settings.engine {
            Engine::Ideal => programmed.clone(),
            Engine::Oracle => programmed.map_tiles(|t| convert(t, &fcm(ORACLE_FCM)))?,
            Engine::Fcm(opts) => programmed.map_tiles(|t| convert(t, &fcm(opts)))?,
            Engine::Aam(paths) => programmed.map_tiles(|t| convert(t, &|t| Ok(aam_convert_with(t, paths))))?,
            Engine::InterpFcm { fcm: opts, .. } => {
                let mut caches = self.caches.iter_mut();
                programmed.map_tiles(|t| {
                    let cache = caches.next().expect("one cache per tile");
                    if cache.needs_refresh() {
                        refresh_distortion(cache, t, RefreshEngine::Fcm(opts))?;
                        refreshes += 1;
                    }
                    apply_distortion(cache, t)
                })?
            }
        };
        drop(previous);
        self.programmed = programmed;
        self.nonideal = nonideal;
        self.converted = true;
        self.stats.refreshes += refreshes;
        self.stats.regen_time += start.elapsed();
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>, sink: Option<&mut AdcCalibrator>) -> Result<(Array2<f64>, QuantizedRows)> {
        check_cols(x, self.weights.inputs(), "input")?;
        let xq = quantize_rows(x, self.settings.precision.input_bits)?;
        let acc = self.pipeline(&xq, false, self.adc_fwd.as_ref(), sink)?;
        Ok((rescale(&acc, &xq.lsb, self.weights.weight_lsb() * 2f64.powi(-FRAC_BITS)), xq))
    }

    /// Error propagation through the transposed non-ideal conductances.
    pub fn backward(&self, dy: ArrayView2<f64>, sink: Option<&mut AdcCalibrator>) -> Result<(Array2<f64>, QuantizedRows)> {
        check_cols(dy, self.weights.outputs(), "error")?;
        let dyq = quantize_rows(dy, self.settings.precision.error_bits)?;
        let acc = self.pipeline(&dyq, true, self.adc_bwd.as_ref(), sink)?;
        Ok((rescale(&acc, &dyq.lsb, self.weights.weight_lsb() * 2f64.powi(-FRAC_BITS)), dyq))
    }

    pub fn apply_gradient(&mut self, dw: ArrayView2<f64>, key: UpdateKey) -> Result<()> {
        apply_update(&mut self.weights, dw, &self.settings.update, key)?;
        self.regenerate()
    }

    /// Integer accumulator of `q * W` (or `q * W^T` when `transpose`), in
    /// units of one input code times one weight code.
    fn pipeline(
        &self,
        q: &QuantizedRows,
        transpose: bool,
        adc: Option<&AdcSpec>,
        mut sink: Option<&mut AdcCalibrator>,
    ) -> Result<Array2<i128>> {
        let spec = &self.settings.mapping;
        let cfg = &self.settings.crossbar;
        let sb = self.settings.dac.bits;
        let streams = q.bits / sb;
        let smask = (1u64 << sb) - 1;
        let db = spec.device_bits;
        // One device level driven by one DAC step.
        let unit = cfg.g_range() / spec.device_levels() as f64 * (self.settings.dac.v_fs / smask as f64);
        let (n_in, n_out) = if transpose {
            (self.weights.outputs(), self.weights.inputs())
        } else {
            (self.weights.inputs(), self.weights.outputs())
        };
        let (bin, bout) = if transpose { (spec.tile_cols, spec.tile_rows) } else { (spec.tile_rows, spec.tile_cols) };
        let batch = q.codes.nrows();
        let mut acc = vec![0i128; batch * n_out];
        let digitizer = Digitizer::new(adc, unit);
        let v_max = self.volts.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Slices are summed in i64 before the wide accumulator when the
        // largest combined readout leaves headroom; otherwise every slice is
        // flushed on its own.
        let combine = digitizer.bound(bin, cfg, v_max) * 2f64.powi(spec.weight_bits as i32) < 2f64.powi(61);
        let mut part: Vec<i64> = Vec::new();

        for ib in 0..n_in.div_ceil(bin) {
            let lo = ib * bin;
            let used_in = bin.min(n_in - lo);
            // Stack every non-zero (sample, sign, stream) input vector.
            let mut meta: Vec<(usize, i64, u32)> = Vec::new();
            let mut vdata: Vec<f64> = Vec::new();
            for b in 0..batch {
                let codes = q.codes.slice(s![b, lo..lo + used_in]);
                for sign in [1i64, -1] {
                    for st in 0..streams {
                        let start = vdata.len();
                        let mut any = false;
                        for &c in codes.iter() {
                            let m = if (sign > 0 && c > 0) || (sign < 0 && c < 0) { c.unsigned_abs() } else { 0 };
                            let level = (m >> (st * sb)) & smask;
                            any |= level != 0;
                            vdata.push(self.volts[level as usize]);
                        }
                        if any {
                            meta.push((b, sign, st * sb));
                        } else {
                            vdata.truncate(start);
                        }
                    }
                }
            }
            if meta.is_empty() {
                continue;
            }
            let v = Array2::from_shape_vec((meta.len(), used_in), vdata).expect("shape");

            for ob in 0..n_out.div_ceil(bout) {
                let olo = ob * bout;
                let used_out = bout.min(n_out - olo);
                let (ti, tj) = if transpose { (ob, ib) } else { (ib, ob) };
                part.clear();
                part.resize(meta.len() * used_out, 0);
                let mut flush = |part: &mut [i64], extra: u32| {
                    for (r, &(b, sign, shift)) in meta.iter().enumerate() {
                        let out = &mut acc[b * n_out + olo..b * n_out + olo + used_out];
                        for (o, p) in out.iter_mut().zip(&mut part[r * used_out..(r + 1) * used_out]) {
                            *o += ((*p * sign) as i128) << (shift + extra);
                            *p = 0;
                        }
                    }
                };
                for k in 0..spec.slices() {
                    let ipos = self.currents(&v, k, true, (ti, tj), (used_in, used_out), transpose)?;
                    let ineg = self.currents(&v, k, false, (ti, tj), (used_in, used_out), transpose)?;
                    if let Some(sink) = sink.as_deref_mut() {
                        sink.observe_all(ipos.iter().chain(ineg.iter()).copied());
                    }
                    let shift_k = k as u32 * db;
                    let (ps, ns) = (ipos.as_slice().expect("owned"), ineg.as_slice().expect("owned"));
                    for r in 0..meta.len() {
                        let span = r * used_out..(r + 1) * used_out;
                        digitizer.add(&ps[span.clone()], &ns[span.clone()], &mut part[span], if combine { shift_k } else { 0 });
                    }
                    if !combine {
                        flush(&mut part, shift_k);
                    }
                }
                if combine {
                    flush(&mut part, 0);
                }
            }
        }
        Ok(Array2::from_shape_vec((batch, n_out), acc).expect("shape"))
    }

    /// Column currents of one tile for every stacked input vector.
    fn currents(
        &self,
        v: &Array2<f64>,
        slice: usize,
        positive: bool,
        (ti, tj): (usize, usize),
        (used_in, used_out): (usize, usize),
        transpose: bool,
    ) -> Result<Array2<f64>> {
        let pick = |grid: &TileGrid| {
            let side = if positive { &grid.pos } else { &grid.neg };
            side[slice][ti][tj].clone()
        };
        if matches!(self.settings.engine, Engine::Oracle) && !transpose {
            let tile = pick(&self.programmed);
            let mut out = Array2::zeros((v.nrows(), used_out));
            let mut full = Array1::zeros(tile.rows());
            for (r, row) in v.rows().into_iter().enumerate() {
                full.slice_mut(s![..used_in]).assign(&row);
                let sol = solve_nodal_oracle(&tile, full.view())?;
                out.row_mut(r).assign(&sol.i_col.slice(s![..used_out]));
            }
            return Ok(out);
        }
        let side = if positive { &self.nonideal.pos } else { &self.nonideal.neg };
        let g = side[slice][ti][tj].g();
        Ok(if transpose {
            v.dot(&g.slice(s![..used_out, ..used_in]).t())
        } else {
            v.dot(&g.slice(s![..used_in, ..used_out]))
        })
    }
}
