use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::Dataset;
use super::model::Model;
use crate::error::{Error, Result};
use crate::rng::mix_seed;

/// Metrics of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss; NaN once training has diverged.
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Seconds spent training (calibration and updates, not evaluation).
    pub wall_time: f64,
    /// Full conductance-engine conversions performed during the epoch.
    pub engine_refreshes: u64,
    /// Seconds spent regenerating non-ideal conductances.
    pub regen_time: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub batch_size: usize,
    pub seed: u64,
    /// Batches of the training set used for ADC statistics.
    pub calib_batches: usize,
    pub epoch: usize,
    pub iteration: u64,
    pub diverged: bool,
    pub log: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: Model, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        Ok(Self { model, batch_size, seed, calib_batches: 2, epoch: 0, iteration: 0, diverged: false, log: Vec::new() })
    }

    fn observe(&mut self, data: &Dataset) -> Result<()> {
        let n = (self.calib_batches * self.batch_size).min(data.len());
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(self.batch_size) {
            let (x, y) = data.batch(chunk);
            self.model.observe_batch(x, &y)?;
        }
        self.model.recalibrate()
    }
}

/// One pass over `train` in a seeded shuffled order, then evaluation on `test`.
///
/// ADC full scales are calibrated before the first epoch and refreshed at the
/// end of every epoch from statistics accumulated over all epochs. A
/// non-finite loss marks the run as diverged; later epochs then skip
/// training and only evaluate.
pub fn train_epoch(state: &mut TrainState, train: &Dataset, test: &Dataset) -> Result<EpochMetrics> {
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let start = Instant::now();
    state.model.take_stats();
    if state.epoch == 0 && state.calib_batches > 0 {
        state.observe(train)?;
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[state.seed, state.epoch as u64]));
    order.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    if !state.diverged {
        for chunk in order.chunks(state.batch_size) {
            let (x, y) = train.batch(chunk);
            let (loss, grads) = state.model.loss_and_grads(x, &y)?;
            state.iteration += 1;
            let finite = loss.is_finite()
                && grads.iter().flatten().all(|g| g.dw.iter().all(|v| v.is_finite()));
            if !finite {
                state.diverged = true;
                break;
            }
            state.model.apply_grads(&grads, state.iteration - 1)?;
            loss_sum += loss;
            batches += 1;
        }
        if !state.diverged && state.calib_batches > 0 {
            state.observe(train)?;
        }
    }
    let stats = state.model.take_stats();
    let wall_time = start.elapsed().as_secs_f64();
    let test_accuracy = evaluate(&state.model, test)?;
    let metrics = EpochMetrics {
        epoch: state.epoch + 1,
        train_loss: if state.diverged { f64::NAN } else { loss_sum / batches as f64 },
        test_accuracy,
        wall_time,
        engine_refreshes: stats.refreshes,
        regen_time: stats.regen_time.as_secs_f64(),
        diverged: state.diverged,
    };
    state.epoch += 1;
    state.log.push(metrics.clone());
    Ok(metrics)
}

/// Fraction of correctly classified samples; forward passes only.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        let pred = model.predict(x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
