//! DAC and ADC models at the crossbar periphery.
//!
//! Inputs are streamed into the array a few bits at a time; each slice is
//! converted to a row voltage by the DAC. Column currents are digitised per
//! slice by an ADC whose full scale is calibrated from observed currents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn max_code(bits: u32) -> u64 {
    (1u64 << bits) - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DacSpec {
    /// Resolution of one DAC conversion.
    pub bits: u32,
    pub v_fs: f64,
    /// Optional output voltage for every code, `2^bits` entries, non-decreasing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<Vec<f64>>,
}

impl Default for DacSpec {
    fn default() -> Self {
        Self { bits: 1, v_fs: 1.0, transfer: None }
    }
}

impl DacSpec {
    pub fn linear(bits: u32, v_fs: f64) -> Self {
        Self { bits, v_fs, transfer: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 32 {
            return Err(Error::arg(format!("dac bits must be in 1..=32, got {}", self.bits)));
        }
        if !(self.v_fs.is_finite() && self.v_fs > 0.0) {
            return Err(Error::arg("dac v_fs must be > 0"));
        }
        if let Some(t) = &self.transfer {
            if t.len() as u64 != max_code(self.bits) + 1 {
                return Err(Error::arg(format!(
                    "dac transfer table needs {} entries, got {}",
                    max_code(self.bits) + 1,
                    t.len()
                )));
            }
            if t[0] != 0.0 {
                return Err(Error::arg("dac transfer table must start at 0 V"));
            }
            if t.windows(2).any(|w| !(w[1] >= w[0])) || t[t.len() - 1] > self.v_fs {
                return Err(Error::arg("dac transfer table must be non-decreasing within [0, v_fs]"));
            }
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.transfer.is_none()
    }
}

/// Row voltage for digital code `x`.
pub fn dac_encode(x: u64, spec: &DacSpec) -> Result<f64> {
    let top = max_code(spec.bits);
    if x > top {
        return Err(Error::arg(format!("dac code {x} exceeds {top}")));
    }
    Ok(match &spec.transfer {
        Some(t) => t[x as usize],
        None => x as f64 / top as f64 * spec.v_fs,
    })
}

/// Splits `x` into `total_bits / stream_bits` LSB-first slices, each paired
/// with its place weight `2^(k * stream_bits)`.
pub fn stream_slices(x: u64, total_bits: u32, stream_bits: u32) -> Result<Vec<(u64, u64)>> {
    if stream_bits == 0 || total_bits == 0 || total_bits % stream_bits != 0 || total_bits > 63 {
        return Err(Error::arg(format!(
            "total bits {total_bits} must be a positive multiple of stream bits {stream_bits} (max 63)"
        )));
    }
    if x > max_code(total_bits) {
        return Err(Error::arg(format!("value {x} does not fit in {total_bits} bits")));
    }
    let mask = max_code(stream_bits);
    Ok((0..total_bits / stream_bits)
        .map(|k| {
            let shift = k * stream_bits;
            ((x >> shift) & mask, 1u64 << shift)
        })
        .collect())
}

pub const DEFAULT_CLIP_PERCENTILE: f64 = 0.999;

fn default_clip() -> f64 {
    DEFAULT_CLIP_PERCENTILE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcSpec {
    pub bits: u32,
    /// Full-scale current. Replaced by calibration when training.
    #[serde(default = "default_i_fs")]
    pub i_fs: f64,
    /// Optional lower decision threshold of every code as a fraction of
    /// `i_fs`: `2^bits` non-decreasing entries starting at 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<Vec<f64>>,
    #[serde(default = "default_clip")]
    pub clip_percentile: f64,
}

fn default_i_fs() -> f64 {
    1e-3
}

impl AdcSpec {
    pub fn linear(bits: u32, i_fs: f64) -> Self {
        Self { bits, i_fs, transfer: None, clip_percentile: DEFAULT_CLIP_PERCENTILE }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > 32 {
            return Err(Error::arg(format!("adc bits must be in 1..=32, got {}", self.bits)));
        }
        if !(self.i_fs.is_finite() && self.i_fs > 0.0) {
            return Err(Error::arg(format!("adc i_fs must be > 0, got {}", self.i_fs)));
        }
        if !(self.clip_percentile > 0.0 && self.clip_percentile <= 1.0) {
            return Err(Error::arg("adc clip_percentile must be in (0, 1]"));
        }
        if let Some(t) = &self.transfer {
            if t.len() as u64 != max_code(self.bits) + 1 || t[0] != 0.0 || t.windows(2).any(|w| !(w[1] >= w[0])) {
                return Err(Error::arg(
                    "adc transfer table needs 2^bits non-decreasing thresholds starting at 0",
                ));
            }
        }
        Ok(())
    }

    pub fn max_code(&self) -> u64 {
        max_code(self.bits)
    }

    /// Current represented by one code step.
    pub fn lsb(&self) -> f64 {
        self.i_fs / self.max_code() as f64
    }

    pub fn dequantize(&self, code: u64) -> f64 {
        code as f64 * self.lsb()
    }
}

/// Digital code for column current `i`; saturates at both ends.
pub fn adc_quantize(i: f64, spec: &AdcSpec) -> u64 {
    let top = spec.max_code();
    let x = i / spec.i_fs;
    match &spec.transfer {
        Some(t) => {
            // number of thresholds above the first that `x` has reached
            let reached = t[1..].partition_point(|&th| th <= x) as u64;
            reached.min(top)
        }
        None => {
            let code = (x * top as f64).round();
            if code.is_nan() || code <= 0.0 {
                0
            } else if code >= top as f64 {
                top
            } else {
                code as u64
            }
        }
    }
}

const RESERVOIR_CAPACITY: usize = 1 << 16;

/// Collects column-current statistics for the ADC full-scale choice.
///
/// Keeps every observation up to a fixed capacity, then a uniform reservoir
/// sample driven by a fixed-seed generator, so the result depends only on the
/// observation sequence.
#[derive(Debug, Clone)]
pub struct AdcCalibrator {
    samples: Vec<f64>,
    sample_count: u64,
    capacity: usize,
    rng: ChaCha8Rng,
}

impl Default for AdcCalibrator {
    fn default() -> Self {
        Self::with_capacity(RESERVOIR_CAPACITY)
    }
}

impl AdcCalibrator {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            samples: Vec::new(),
            sample_count: 0,
            capacity: capacity.max(1),
            rng: ChaCha8Rng::seed_from_u64(0xADC0_5EED),
        }
    }

    pub fn observe(&mut self, i: f64) {
        if !i.is_finite() {
            return;
        }
        self.sample_count += 1;
        if self.samples.len() < self.capacity {
            self.samples.push(i);
        } else {
            let k = self.rng.random_range(0..self.sample_count);
            if (k as usize) < self.capacity {
                self.samples[k as usize] = i;
            }
        }
    }

    pub fn observe_all(&mut self, currents: impl IntoIterator<Item = f64>) {
        for i in currents {
            self.observe(i);
        }
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn reset(&mut self) {
        *self = Self::with_capacity(self.capacity);
    }

    /// Nearest-rank `clip_percentile` quantile of the observed currents.
    pub fn calibrate(&self, clip_percentile: f64) -> Result<f64> {
        if self.samples.is_empty() {
            return Err(Error::State("adc calibrator has no observations".into()));
        }
        if !(clip_percentile > 0.0 && clip_percentile <= 1.0) {
            return Err(Error::arg("clip percentile must be in (0, 1]"));
        }
        let mut samples = self.samples.clone();
        let rank = (clip_percentile * samples.len() as f64).ceil() as usize;
        let k = rank.clamp(1, samples.len()) - 1;
        let (_, q, _) = samples.select_nth_unstable_by(k, f64::total_cmp);
        Ok(*q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn dac_examples() {
        let one = DacSpec::linear(1, 1.0);
        assert_eq!(dac_encode(0, &one).unwrap(), 0.0);
        assert_eq!(dac_encode(1, &one).unwrap(), 1.0);
        let four = DacSpec::linear(4, 1.0);
        assert_eq!(dac_encode(7, &four).unwrap(), 7.0 / 15.0);
        assert!(dac_encode(16, &four).is_err());
    }

    #[test]
    fn dac_table() {
        let spec = DacSpec { bits: 2, v_fs: 1.0, transfer: Some(vec![0.0, 0.3, 0.7, 0.95]) };
        spec.validate().unwrap();
        assert_eq!(dac_encode(2, &spec).unwrap(), 0.7);
        let bad = DacSpec { transfer: Some(vec![0.0, 0.5, 0.4, 0.9]), ..spec.clone() };
        assert!(bad.validate().is_err());
        let short = DacSpec { transfer: Some(vec![0.0, 0.5]), ..spec };
        assert!(short.validate().is_err());
    }

    #[test]
    fn stream_examples() {
        assert_eq!(stream_slices(5, 4, 1).unwrap(), vec![(1, 1), (0, 2), (1, 4), (0, 8)]);
        assert!(stream_slices(0, 4, 1).unwrap().iter().all(|s| s.0 == 0));
        assert_eq!(stream_slices(255, 8, 2).unwrap(), vec![(3, 1), (3, 4), (3, 16), (3, 64)]);
        assert!(stream_slices(3, 5, 2).is_err());
        assert!(stream_slices(16, 4, 1).is_err());
    }

    #[test]
    fn adc_examples() {
        let spec = AdcSpec::linear(8, 1e-4);
        assert_eq!(adc_quantize(0.0, &spec), 0);
        assert_eq!(adc_quantize(1e-4, &spec), 255);
        assert_eq!(adc_quantize(2e-4, &spec), 255);
        assert_eq!(adc_quantize(-1e-6, &spec), 0);
    }

    #[test]
    fn adc_table_thresholds() {
        let spec = AdcSpec { transfer: Some(vec![0.0, 0.1, 0.2, 0.8]), ..AdcSpec::linear(2, 1.0) };
        spec.validate().unwrap();
        assert_eq!(adc_quantize(0.05, &spec), 0);
        assert_eq!(adc_quantize(0.1, &spec), 1);
        assert_eq!(adc_quantize(0.5, &spec), 2);
        assert_eq!(adc_quantize(5.0, &spec), 3);
    }

    #[test]
    fn calibration_examples() {
        let mut cal = AdcCalibrator::default();
        assert!(matches!(cal.calibrate(0.999), Err(Error::State(_))));
        cal.observe(10e-6);
        assert_eq!(cal.calibrate(0.999).unwrap(), 10e-6);

        let mut cal = AdcCalibrator::default();
        cal.observe_all(std::iter::repeat(3e-6).take(500));
        for p in [0.1, 0.5, 0.999, 1.0] {
            assert_eq!(cal.calibrate(p).unwrap(), 3e-6);
        }
    }

    #[test]
    fn calibration_uniform_quantile() {
        // 100_000 evenly spread observations in [0, 100 uA], shuffled.
        let n = 100_000u64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut obs: Vec<f64> = (0..n).map(|k| 100e-6 * k as f64 / (n - 1) as f64).collect();
        for k in (1..obs.len()).rev() {
            obs.swap(k, rng.random_range(0..=k));
        }
        let mut cal = AdcCalibrator::default();
        cal.observe_all(obs);
        let i_fs = cal.calibrate(0.999).unwrap();
        // reservoir of 65536 samples: quantile standard error ~ 0.012 uA
        assert!((i_fs - 99.9e-6).abs() < 0.1e-6, "{i_fs}");
    }

    proptest! {
        #[test]
        fn quantize_error_within_one_lsb(bits in 1u32..12, frac in 0.0f64..=1.0) {
            let spec = AdcSpec::linear(bits, 7e-5);
            let i = frac * spec.i_fs;
            let back = spec.dequantize(adc_quantize(i, &spec));
            prop_assert!((back - i).abs() <= spec.lsb() * (1.0 + 1e-12));
        }

        #[test]
        fn converters_are_monotone(bits in 1u32..10, a in 0.0f64..2.0, b in 0.0f64..2.0) {
            let adc = AdcSpec::linear(bits, 1.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(adc_quantize(lo, &adc) <= adc_quantize(hi, &adc));
            let dac = DacSpec::linear(bits, 1.0);
            let top = (1u64 << bits) - 1;
            let (x, y) = ((lo / 2.0 * top as f64) as u64, (hi / 2.0 * top as f64) as u64);
            prop_assert!(dac_encode(x, &dac).unwrap() <= dac_encode(y, &dac).unwrap());
        }

        #[test]
        fn slices_reassemble(x in 0u64..(1 << 12), stream in prop::sample::select(vec![1u32, 2, 3, 4, 6, 12])) {
            let total: u64 = stream_slices(x, 12, stream).unwrap().iter().map(|(v, w)| v * w).sum();
            prop_assert_eq!(total, x);
        }
    }
}
