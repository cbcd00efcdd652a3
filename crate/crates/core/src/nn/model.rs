use ndarray::{Array2, ArrayD, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Conv2d, ConvGeometry, Dense, Grad, Layer, Observer};
use super::vmm::{Backend, EngineStats};
use crate::error::{Error, Result};
use crate::update::UpdateKey;

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// One entry of a model topology description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        outputs: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    MaxPool2d {
        size: usize,
    },
    Flatten,
}

#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<Layer>,
    observers: Vec<Observer>,
    input_shape: Vec<usize>,
}

impl Model {
    /// Builds and initialises a network for samples of `input_shape`
    /// (without the batch dimension).
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], backend: &Backend, seed: u64) -> Result<Self> {
        backend.validate()?;
        if specs.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Dense { outputs, bias } => {
                    let inputs: usize = shape.iter().product();
                    if inputs == 0 || outputs == 0 {
                        return Err(Error::Config(format!("layer {idx}: dense layer needs non-zero sizes")));
                    }
                    shape = vec![outputs];
                    Layer::Dense(Dense::init(inputs, outputs, bias, backend, &mut rng)?)
                }
                LayerSpec::Conv2d { out_channels, kernel, stride, padding, bias } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::Config(format!(
                            "layer {idx}: conv2d needs a (channels, height, width) input, got {shape:?}"
                        )));
                    };
                    let g = ConvGeometry { in_channels: c, out_channels, kernel, stride, padding };
                    let (oh, ow) = g.output_hw(h, w).map_err(|e| Error::Config(format!("layer {idx}: {e}")))?;
                    shape = vec![out_channels, oh, ow];
                    Layer::Conv2d(Conv2d::init(g, bias, backend, &mut rng)?)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2d { size } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::Config(format!("layer {idx}: max_pool2d needs a 3-d input")));
                    };
                    if size == 0 || h < size || w < size {
                        return Err(Error::Config(format!("layer {idx}: pool size {size} too large")));
                    }
                    shape = vec![c, h / size, w / size];
                    Layer::MaxPool2d { size }
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
            };
            layers.push(layer);
        }
        Ok(Self::from_layers(layers, input_shape))
    }

    pub fn from_layers(layers: Vec<Layer>, input_shape: &[usize]) -> Self {
        let observers = vec![Observer::default(); layers.len()];
        Self { layers, observers, input_shape: input_shape.to_vec() }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn run_forward(
        layers: &[Layer],
        x: ArrayD<f64>,
        mut observers: Option<&mut [Observer]>,
    ) -> Result<(Array2<f64>, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(layers.len());
        let mut h = x;
        for (i, layer) in layers.iter().enumerate() {
            let sink = observers.as_deref_mut().map(|o| &mut o[i].forward);
            let (y, cache) = layer.forward(h, sink)?;
            caches.push(cache);
            h = y;
        }
        let b = h.shape()[0];
        let n = h.len() / b.max(1);
        let logits = h.into_shape_with_order((b, n)).map_err(|e| Error::arg(e.to_string()))?;
        Ok((logits, caches))
    }

    fn run_backward(
        layers: &[Layer],
        caches: &[Cache],
        dlogits: Array2<f64>,
        mut observers: Option<&mut [Observer]>,
    ) -> Result<Vec<Option<Grad>>> {
        let mut grads = vec![None; layers.len()];
        let mut g = dlogits.into_dyn();
        for i in (0..layers.len()).rev() {
            let sink = observers.as_deref_mut().map(|o| &mut o[i].backward);
            let (dx, grad) = layers[i].backward(&caches[i], g, i > 0, sink)?;
            grads[i] = grad;
            match dx {
                Some(dx) => g = dx,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Logits for a batch, plus the caches needed by [`Model::backward`].
    pub fn forward(&self, x: ArrayD<f64>) -> Result<(Array2<f64>, Vec<Cache>)> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::arg(format!(
                "batch shape {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Self::run_forward(&self.layers, x, None)
    }

    pub fn backward(&self, caches: &[Cache], dlogits: Array2<f64>) -> Result<Vec<Option<Grad>>> {
        if caches.len() != self.layers.len() {
            return Err(Error::State("backward called without a matching forward pass".into()));
        }
        Self::run_backward(&self.layers, caches, dlogits, None)
    }

    /// Mean loss and parameter gradients of one batch.
    pub fn loss_and_grads(&self, x: ArrayD<f64>, labels: &[usize]) -> Result<(f64, Vec<Option<Grad>>)> {
        let (logits, caches) = self.forward(x)?;
        let (loss, dlogits) = softmax_cross_entropy(logits.view(), labels)?;
        if !loss.is_finite() {
            return Ok((loss, Vec::new()));
        }
        Ok((loss, self.backward(&caches, dlogits)?))
    }

    pub fn predict(&self, x: ArrayD<f64>) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(x)?;
        Ok(argmax_rows(logits.view()))
    }

    /// Runs a forward and backward pass that only records ADC input currents.
    pub fn observe_batch(&mut self, x: ArrayD<f64>, labels: &[usize]) -> Result<()> {
        let Model { layers, observers, .. } = self;
        let (logits, caches) = Self::run_forward(layers, x, Some(observers))?;
        let (loss, dlogits) = softmax_cross_entropy(logits.view(), labels)?;
        if loss.is_finite() {
            Self::run_backward(layers, &caches, dlogits, Some(observers))?;
        }
        Ok(())
    }

    /// Sets every ADC full scale from the statistics observed so far.
    pub fn recalibrate(&mut self) -> Result<()> {
        for (layer, obs) in self.layers.iter_mut().zip(&self.observers) {
            if let Some(core) = layer.linear_core_mut() {
                core.recalibrate(obs)?;
            }
        }
        Ok(())
    }

    /// Applies one SGD step; `grads` comes from [`Model::loss_and_grads`].
    pub fn apply_grads(&mut self, grads: &[Option<Grad>], iteration: u64) -> Result<()> {
        for (i, (layer, grad)) in self.layers.iter_mut().zip(grads).enumerate() {
            if let Some(g) = grad {
                layer.apply(g, UpdateKey { iteration, layer: i as u64 })?;
            }
        }
        Ok(())
    }

    pub fn take_stats(&mut self) -> EngineStats {
        let mut total = EngineStats::default();
        for layer in &mut self.layers {
            if let Some(core) = layer.linear_core_mut() {
                total += core.take_stats();
            }
        }
        total
    }
}

pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, k) = logits.dim();
    if labels.len() != b || b == 0 {
        return Err(Error::arg(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::arg(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Array2::zeros((b, k));
    let mut loss = 0.0;
    for (i, (row, mut g)) in logits.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).enumerate() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = m + sum.ln();
        loss += log_z - row[labels[i]];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *gj = (p - if j == labels[i] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}
