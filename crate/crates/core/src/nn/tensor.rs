use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

use crate::error::{Error, Result};

/// Fixed-point layout of a tensor whose values are `code * lsb`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantInfo {
    pub bits: u32,
    pub lsb: f64,
}

/// Dense real tensor with optional fixed-point metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: ArrayD<f64>,
    pub quant: Option<QuantInfo>,
}

impl Tensor {
    pub fn new(data: ArrayD<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::arg(format!("tensor contains non-finite value {bad}")));
        }
        Ok(Self { data, quant: None })
    }

    pub fn from_matrix(m: Array2<f64>) -> Result<Self> {
        Self::new(m.into_dyn())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { data: ArrayD::zeros(IxDyn(shape)), quant: None }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View as `batch x features`, flattening trailing dimensions.
    pub fn as_matrix(&self) -> Result<ArrayView2<'_, f64>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::arg("scalar tensor has no batch dimension"));
        }
        let batch = shape[0];
        let feat = shape[1..].iter().product::<usize>();
        self.data
            .view()
            .into_shape_with_order((batch, feat))
            .map_err(|e| Error::arg(e.to_string()))
    }
}

/// Row-wise symmetric quantisation: each row gets its own scale `max |x|`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRows {
    /// Signed codes, `|code| <= 2^bits - 1`.
    pub codes: Array2<i64>,
    /// Value of one code step, per row.
    pub lsb: Vec<f64>,
    pub bits: u32,
}

impl QuantizedRows {
    /// `codes * lsb` as reals.
    pub fn dequantize(&self) -> Array2<f64> {
        let mut out = self.codes.mapv(|c| c as f64);
        for (mut row, &l) in out.rows_mut().into_iter().zip(&self.lsb) {
            row.mapv_inplace(|c| c * l);
        }
        out
    }

    pub fn max_code(&self) -> i64 {
        ((1u64 << self.bits) - 1) as i64
    }
}

pub fn quantize_rows(x: ArrayView2<f64>, bits: u32) -> Result<QuantizedRows> {
    if bits == 0 || bits > 32 {
        return Err(Error::arg(format!("quantisation bits must be in 1..=32, got {bits}")));
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let mut codes = Array2::<i64>::zeros(x.dim());
    let mut lsb = Vec::with_capacity(x.nrows());
    for (row, mut out) in x.rows().into_iter().zip(codes.rows_mut()) {
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !scale.is_finite() {
            return Err(Error::arg("cannot quantise non-finite values"));
        }
        if scale == 0.0 {
            lsb.push(0.0);
            continue;
        }
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = ((v.abs() / scale) * levels).round().min(levels) as i64 * if v < 0.0 { -1 } else { 1 };
        }
        lsb.push(scale / levels);
    }
    Ok(QuantizedRows { codes, lsb, bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rows_quantise_independently() {
        let x = array![[1.0, -0.5, 0.0], [0.0, 0.0, 0.0], [2.0, 1.0, -2.0]];
        let q = quantize_rows(x.view(), 2).unwrap();
        assert_eq!(q.codes, array![[3, -2, 0], [0, 0, 0], [3, 2, -3]]);
        assert_eq!(q.lsb[1], 0.0);
        let back = q.dequantize();
        assert!((back[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((back[[2, 2]] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn tensor_matrix_view() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.as_matrix().unwrap().dim(), (2, 12));
        assert!(Tensor::new(ndarray::arr1(&[f64::NAN]).into_dyn()).is_err());
    }
}
