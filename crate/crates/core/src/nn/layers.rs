use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Ix4, IxDyn};
use rand::Rng;

use super::tensor::{quantize_rows, QuantizedRows};
use super::vmm::{weight_gradient, Backend, CrossbarLinear, DigitalLinear, EngineStats};
use crate::converters::AdcCalibrator;
use crate::error::{Error, Result};
use crate::update::UpdateKey;

/// ADC statistics collected for one linear layer.
#[derive(Debug, Clone, Default)]
pub struct Observer {
    pub forward: AdcCalibrator,
    pub backward: AdcCalibrator,
}

/// The matrix-multiply part of a dense or convolutional layer.
#[derive(Debug, Clone)]
pub enum LinearCore {
    Digital(DigitalLinear),
    Crossbar(Box<CrossbarLinear>),
}

impl LinearCore {
    pub fn new(w: ArrayView2<f64>, backend: &Backend) -> Result<Self> {
        Ok(match backend {
            Backend::Digital(s) => LinearCore::Digital(DigitalLinear::new(w, *s)?),
            Backend::Crossbar(s) => LinearCore::Crossbar(Box::new(CrossbarLinear::new(w, (**s).clone())?)),
        })
    }

    pub fn forward(&self, x: ArrayView2<f64>, sink: Option<&mut AdcCalibrator>) -> Result<(Array2<f64>, QuantizedRows)> {
        match self {
            LinearCore::Digital(d) => d.forward(x),
            LinearCore::Crossbar(c) => c.forward(x, sink),
        }
    }

    /// Quantises `dy` and, when `need_dx`, propagates it to the input.
    pub fn backward(
        &self,
        dy: ArrayView2<f64>,
        need_dx: bool,
        sink: Option<&mut AdcCalibrator>,
        error_bits: u32,
    ) -> Result<(Option<Array2<f64>>, QuantizedRows)> {
        if !need_dx {
            return Ok((None, quantize_rows(dy, error_bits)?));
        }
        let (dx, dyq) = match self {
            LinearCore::Digital(d) => d.backward(dy)?,
            LinearCore::Crossbar(c) => c.backward(dy, sink)?,
        };
        Ok((Some(dx), dyq))
    }

    pub fn apply_gradient(&mut self, dw: ArrayView2<f64>, key: UpdateKey) -> Result<()> {
        match self {
            LinearCore::Digital(d) => d.apply_gradient(dw),
            LinearCore::Crossbar(c) => c.apply_gradient(dw, key),
        }
    }

    /// Weights the core currently represents (after weight quantisation).
    pub fn quantized_weights(&self) -> Array2<f64> {
        match self {
            LinearCore::Digital(d) => d.quantized_weights(),
            LinearCore::Crossbar(c) => c.weights().quantized_weights(),
        }
    }

    pub fn take_stats(&mut self) -> EngineStats {
        match self {
            LinearCore::Digital(_) => EngineStats::default(),
            LinearCore::Crossbar(c) => c.take_stats(),
        }
    }

    pub fn recalibrate(&mut self, obs: &Observer) -> Result<()> {
        match self {
            LinearCore::Digital(_) => Ok(()),
            LinearCore::Crossbar(c) => c.recalibrate(&obs.forward, &obs.backward),
        }
    }

    pub fn as_crossbar(&self) -> Option<&CrossbarLinear> {
        match self {
            LinearCore::Crossbar(c) => Some(c),
            LinearCore::Digital(_) => None,
        }
    }
}

fn uniform_init(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let a = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a))
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub core: LinearCore,
    pub bias: Option<Array1<f64>>,
    lr: f64,
    error_bits: u32,
}

impl Dense {
    pub fn new(w: ArrayView2<f64>, bias: Option<Array1<f64>>, backend: &Backend) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != w.ncols() {
                return Err(Error::arg("bias length does not match output count"));
            }
        }
        Ok(Self { core: LinearCore::new(w, backend)?, bias, lr: lr_of(backend), error_bits: backend.precision().error_bits })
    }

    pub fn init(inputs: usize, outputs: usize, bias: bool, backend: &Backend, rng: &mut impl Rng) -> Result<Self> {
        let w = uniform_init(rng, inputs, outputs);
        Self::new(w.view(), bias.then(|| Array1::zeros(outputs)), backend)
    }
}

fn lr_of(backend: &Backend) -> f64 {
    match backend {
        Backend::Digital(d) => d.lr,
        Backend::Crossbar(c) => c.update.lr,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, p, st) = (self.kernel, self.padding, self.stride);
        if k == 0 || st == 0 || h + 2 * p < k || w + 2 * p < k {
            return Err(Error::arg(format!("convolution kernel {k} does not fit a {h}x{w} input")));
        }
        Ok(((h + 2 * p - k) / st + 1, (w + 2 * p - k) / st + 1))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Convolution lowered to a matrix product over image patches.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub geometry: ConvGeometry,
    pub core: LinearCore,
    pub bias: Option<Array1<f64>>,
    lr: f64,
    error_bits: u32,
}

impl Conv2d {
    pub fn init(geometry: ConvGeometry, bias: bool, backend: &Backend, rng: &mut impl Rng) -> Result<Self> {
        let w = uniform_init(rng, geometry.patch_len(), geometry.out_channels);
        Ok(Self {
            geometry,
            core: LinearCore::new(w.view(), backend)?,
            bias: bias.then(|| Array1::zeros(geometry.out_channels)),
            lr: lr_of(backend),
            error_bits: backend.precision().error_bits,
        })
    }
}

/// `(B*OH*OW, C*K*K)` patch matrix, columns ordered channel-major.
pub fn im2col(x: &Array4<f64>, g: &ConvGeometry) -> Result<Array2<f64>> {
    let (b, c, h, w) = x.dim();
    if c != g.in_channels {
        return Err(Error::arg(format!("convolution expects {} channels, got {c}", g.in_channels)));
    }
    let (oh, ow) = g.output_hw(h, w)?;
    let k = g.kernel;
    let mut out = Array2::zeros((b * oh * ow, g.patch_len()));
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = out.row_mut((n * oh + oy) * ow + ox);
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                row[(ch * k + ky) * k + kx] = x[[n, ch, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im(cols: &Array2<f64>, g: &ConvGeometry, shape: (usize, usize, usize, usize)) -> Result<Array4<f64>> {
    let (b, c, h, w) = shape;
    let (oh, ow) = g.output_hw(h, w)?;
    let k = g.kernel;
    let mut out = Array4::zeros(shape);
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = cols.row((n * oh + oy) * ow + ox);
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                out[[n, ch, iy as usize, ix as usize]] += row[(ch * k + ky) * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    MaxPool2d { size: usize },
    Flatten,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Linear { xq: QuantizedRows, in_shape: Vec<usize> },
    Conv { xq: QuantizedRows, in_shape: Vec<usize>, out_hw: (usize, usize) },
    Relu { mask: ArrayD<bool> },
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
}

/// Gradient of a layer's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad {
    pub dw: Array2<f64>,
    pub db: Option<Array1<f64>>,
}

fn to4(x: ArrayD<f64>) -> Result<Array4<f64>> {
    x.into_dimensionality::<Ix4>()
        .map_err(|_| Error::arg("layer expects a (batch, channels, height, width) input"))
}

fn to_matrix(x: &ArrayD<f64>) -> Result<Array2<f64>> {
    let b = *x.shape().first().ok_or_else(|| Error::arg("input has no batch dimension"))?;
    let feat = x.len().checked_div(b).unwrap_or(0);
    x.to_shape((b, feat))
        .map(|v| v.into_owned())
        .map_err(|e| Error::arg(e.to_string()))
}

fn bias_grad(dyq: &QuantizedRows) -> Array1<f64> {
    dyq.dequantize().sum_axis(Axis(0))
}

impl Layer {
    pub fn linear_core(&self) -> Option<&LinearCore> {
        match self {
            Layer::Dense(d) => Some(&d.core),
            Layer::Conv2d(c) => Some(&c.core),
            _ => None,
        }
    }

    pub fn linear_core_mut(&mut self) -> Option<&mut LinearCore> {
        match self {
            Layer::Dense(d) => Some(&mut d.core),
            Layer::Conv2d(c) => Some(&mut c.core),
            _ => None,
        }
    }

    pub fn forward(&self, x: ArrayD<f64>, sink: Option<&mut AdcCalibrator>) -> Result<(ArrayD<f64>, Cache)> {
        match self {
            Layer::Dense(d) => {
                let in_shape = x.shape().to_vec();
                let m = to_matrix(&x)?;
                let (mut y, xq) = d.core.forward(m.view(), sink)?;
                if let Some(b) = &d.bias {
                    y += b;
                }
                Ok((y.into_dyn(), Cache::Linear { xq, in_shape }))
            }
            Layer::Conv2d(c) => {
                let in_shape = x.shape().to_vec();
                let x4 = to4(x)?;
                let (bn, _, h, w) = x4.dim();
                let out_hw = c.geometry.output_hw(h, w)?;
                let patches = im2col(&x4, &c.geometry)?;
                let (mut y, xq) = c.core.forward(patches.view(), sink)?;
                if let Some(b) = &c.bias {
                    y += b;
                }
                let oc = c.geometry.out_channels;
                let y = y
                    .into_shape_with_order((bn, out_hw.0, out_hw.1, oc))
                    .map_err(|e| Error::arg(e.to_string()))?
                    .permuted_axes([0, 3, 1, 2])
                    .as_standard_layout()
                    .into_owned();
                Ok((y.into_dyn(), Cache::Conv { xq, in_shape, out_hw }))
            }
            Layer::Relu => {
                let mask = x.mapv(|v| v > 0.0);
                Ok((x.mapv(|v| v.max(0.0)), Cache::Relu { mask }))
            }
            Layer::MaxPool2d { size } => {
                let size = *size;
                let in_shape = x.shape().to_vec();
                let x4 = to4(x)?;
                let (b, c, h, w) = x4.dim();
                if size == 0 || h < size || w < size {
                    return Err(Error::arg(format!("pool size {size} does not fit a {h}x{w} input")));
                }
                let (oh, ow) = (h / size, w / size);
                let mut out = Array4::zeros((b, c, oh, ow));
                let mut argmax = Vec::with_capacity(b * c * oh * ow);
                for n in 0..b {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best = (f64::NEG_INFINITY, 0);
                                for ky in 0..size {
                                    for kx in 0..size {
                                        let (iy, ix) = (oy * size + ky, ox * size + kx);
                                        let v = x4[[n, ch, iy, ix]];
                                        if v > best.0 {
                                            best = (v, ((n * c + ch) * h + iy) * w + ix);
                                        }
                                    }
                                }
                                out[[n, ch, oy, ox]] = best.0;
                                argmax.push(best.1);
                            }
                        }
                    }
                }
                Ok((out.into_dyn(), Cache::Pool { argmax, in_shape }))
            }
            Layer::Flatten => {
                let in_shape = x.shape().to_vec();
                Ok((to_matrix(&x)?.into_dyn(), Cache::Flatten { in_shape }))
            }
        }
    }

    /// Returns the input gradient (when `need_dx`) and the parameter gradient.
    pub fn backward(
        &self,
        cache: &Cache,
        dy: ArrayD<f64>,
        need_dx: bool,
        sink: Option<&mut AdcCalibrator>,
    ) -> Result<(Option<ArrayD<f64>>, Option<Grad>)> {
        match (self, cache) {
            (Layer::Dense(d), Cache::Linear { xq, in_shape }) => {
                let dy = to_matrix(&dy)?;
                let (dx, dyq) = d.core.backward(dy.view(), need_dx, sink, d.error_bits)?;
                let grad = Grad { dw: weight_gradient(xq, &dyq), db: d.bias.as_ref().map(|_| bias_grad(&dyq)) };
                let dx = dx
                    .map(|m| m.into_shape_with_order(IxDyn(in_shape)).map_err(|e| Error::arg(e.to_string())))
                    .transpose()?;
                Ok((dx, Some(grad)))
            }
            (Layer::Conv2d(c), Cache::Conv { xq, in_shape, out_hw }) => {
                let dy4 = to4(dy)?;
                let (bn, oc, _, _) = dy4.dim();
                let rows = dy4
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((bn * out_hw.0 * out_hw.1, oc))
                    .map_err(|e| Error::arg(e.to_string()))?;
                let (dcols, dyq) = c.core.backward(rows.view(), need_dx, sink, c.error_bits)?;
                let grad = Grad { dw: weight_gradient(xq, &dyq), db: c.bias.as_ref().map(|_| bias_grad(&dyq)) };
                let dx = match dcols {
                    Some(dc) => {
                        let shape = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                        Some(col2im(&dc, &c.geometry, shape)?.into_dyn())
                    }
                    None => None,
                };
                Ok((dx, Some(grad)))
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                let mut dx = dy;
                dx.zip_mut_with(mask, |g, &m| {
                    if !m {
                        *g = 0.0;
                    }
                });
                Ok((Some(dx), None))
            }
            (Layer::MaxPool2d { .. }, Cache::Pool { argmax, in_shape }) => {
                let mut dx = ArrayD::zeros(IxDyn(in_shape));
                let flat = dx.as_slice_mut().expect("standard layout");
                for (&idx, &g) in argmax.iter().zip(dy.iter()) {
                    flat[idx] += g;
                }
                Ok((Some(dx), None))
            }
            (Layer::Flatten, Cache::Flatten { in_shape }) => {
                let dx = dy
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(in_shape))
                    .map_err(|e| Error::arg(e.to_string()))?;
                Ok((Some(dx), None))
            }
            _ => Err(Error::State("layer cache does not belong to this layer".into())),
        }
    }

    pub fn apply(&mut self, grad: &Grad, key: UpdateKey) -> Result<()> {
        let (core, bias, lr) = match self {
            Layer::Dense(d) => (&mut d.core, &mut d.bias, d.lr),
            Layer::Conv2d(c) => (&mut c.core, &mut c.bias, c.lr),
            _ => return Err(Error::State("layer has no parameters".into())),
        };
        core.apply_gradient(grad.dw.view(), key)?;
        if let (Some(b), Some(db)) = (bias.as_mut(), grad.db.as_ref()) {
            b.zip_mut_with(db, |b, &g| *b -= lr * g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry { in_channels: 2, out_channels: 1, kernel: 3, stride: 2, padding: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((2, 2, 5, 6), |_| rng.random_range(-1.0..1.0));
        let cols = im2col(&x, &g).unwrap();
        let c = Array2::from_shape_fn(cols.dim(), |_| rng.random_range(-1.0..1.0));
        let lhs = (&cols * &c).sum();
        let rhs = (&x * &col2im(&c, &g, x.dim()).unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_routes_gradient_to_max() {
        let x = ndarray::Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 4.0, 2.0, 3.0]).unwrap().into_dyn();
        let layer = Layer::MaxPool2d { size: 2 };
        let (y, cache) = layer.forward(x, None).unwrap();
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![4.0]);
        let (dx, _) = layer.backward(&cache, ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 2.0), true, None).unwrap();
        assert_eq!(dx.unwrap().iter().copied().collect::<Vec<_>>(), vec![0.0, 2.0, 0.0, 0.0]);
    }
}
