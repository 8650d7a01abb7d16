//! Mini-batch SGD with classical (heavy-ball) momentum on the surrogate loss.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, MlpArchitecture, WeightVector};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    /// Full-dataset evaluation every this many epochs; 0 disables it.
    pub eval_every: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 100,
            epochs: 20,
            shuffle_seed: 0,
            eval_every: 1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Additional differentiable term added to the surrogate loss.
pub trait Penalty {
    /// Returns the penalty at `params` and adds its (sub)gradient into `grad`.
    fn add_value_and_grad(&self, arch: &MlpArchitecture, params: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the mini-batch objectives seen during the epoch.
    pub mean_batch_loss: f64,
    pub train_surrogate: Option<f64>,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
}

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub weights: WeightVector,
    pub velocity: Vec<f64>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl SgdState {
    pub fn new(weights: WeightVector) -> Self {
        let velocity = vec![0.0; weights.len()];
        Self {
            weights,
            velocity,
            epoch: 0,
            history: Vec::new(),
        }
    }
}

/// Per-step information handed to step observers.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub steps_per_epoch: usize,
    pub batch_loss: f64,
}

pub struct SgdTrainer<'a> {
    state: SgdState,
    cfg: SgdConfig,
    data: &'a LabeledDataset,
    test: Option<&'a LabeledDataset>,
    penalty: Option<&'a dyn Penalty>,
    grad: Vec<f64>,
}

impl<'a> SgdTrainer<'a> {
    pub fn new(state: SgdState, cfg: SgdConfig, data: &'a LabeledDataset) -> Result<Self> {
        cfg.validate()?;
        if state.weights.arch().input_dim() != data.dim() {
            return Err(Error::Dimension {
                what: "dataset features",
                expected: state.weights.arch().input_dim(),
                actual: data.dim(),
            });
        }
        let grad = vec![0.0; state.weights.len()];
        Ok(Self {
            state,
            cfg,
            data,
            test: None,
            penalty: None,
            grad,
        })
    }

    pub fn with_test(mut self, test: &'a LabeledDataset) -> Self {
        self.test = Some(test);
        self
    }

    pub fn with_penalty(mut self, penalty: &'a dyn Penalty) -> Self {
        self.penalty = Some(penalty);
        self
    }

    pub fn state(&self) -> &SgdState {
        &self.state
    }

    pub fn into_state(self) -> SgdState {
        self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    /// Runs one epoch over a fresh permutation of the data.
    pub fn run_epoch(
        &mut self,
        on_step: &mut dyn FnMut(&StepInfo, &WeightVector) -> Result<()>,
    ) -> Result<&EpochRecord> {
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.shuffle_seed, Stream::Shuffle, epoch as u64));
        let steps_per_epoch = self.steps_per_epoch();
        let arch = self.state.weights.arch().clone();
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let (x, y) = self.data.gather(batch);
            let result = nn::surrogate_loss_grad(
                &arch,
                self.state.weights.values(),
                x.view(),
                &y,
                &mut self.grad,
            );
            let mut loss = match result {
                Ok(loss) => loss,
                Err(Error::NonFinite(_)) => return Err(self.diverged(epoch, step)),
                Err(e) => return Err(e),
            };
            if let Some(penalty) = self.penalty {
                loss += penalty.add_value_and_grad(&arch, self.state.weights.values(), &mut self.grad);
            }
            if !loss.is_finite() || self.grad.iter().any(|g| !g.is_finite()) {
                return Err(self.diverged(epoch, step));
            }
            let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
            let previous = self.state.weights.clone();
            for ((w, v), g) in self
                .state
                .weights
                .values_mut()
                .iter_mut()
                .zip(self.state.velocity.iter_mut())
                .zip(&self.grad)
            {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
            if self.state.weights.values().iter().any(|w| !w.is_finite()) {
                self.state.weights = previous;
                return Err(self.diverged(epoch, step));
            }
            loss_sum += loss;
            let info = StepInfo {
                epoch,
                step_in_epoch: step,
                steps_per_epoch,
                batch_loss: loss,
            };
            on_step(&info, &self.state.weights)?;
        }
        self.state.epoch += 1;
        let evaluate = self.cfg.eval_every > 0 && self.state.epoch.is_multiple_of(self.cfg.eval_every);
        let mut record = EpochRecord {
            epoch: self.state.epoch,
            mean_batch_loss: loss_sum / steps_per_epoch as f64,
            train_surrogate: None,
            train_error: None,
            test_error: None,
        };
        if evaluate {
            let out = match nn::forward_batch(&self.state.weights, self.data.features()) {
                Ok(out) => out,
                Err(Error::NonFinite(_)) => return Err(self.diverged(epoch, steps_per_epoch)),
                Err(e) => return Err(e),
            };
            let out = out.as_slice().unwrap();
            record.train_surrogate = Some(nn::surrogate_from_outputs(out, self.data.labels()));
            record.train_error = Some(nn::zero_one_from_outputs(out, self.data.labels()));
            if let Some(test) = self.test {
                record.test_error = Some(nn::zero_one_error(&self.state.weights, test)?);
            }
        }
        log::debug!(
            "epoch {} loss {:.5} train err {:?} test err {:?}",
            record.epoch,
            record.mean_batch_loss,
            record.train_error,
            record.test_error
        );
        self.state.history.push(record);
        Ok(self.state.history.last().unwrap())
    }

    /// Trains until `cfg.epochs` epochs have completed in total.
    pub fn run(&mut self) -> Result<()> {
        while self.state.epoch < self.cfg.epochs {
            self.run_epoch(&mut |_, _| Ok(()))?;
        }
        Ok(())
    }

    fn diverged(&self, epoch: usize, step: usize) -> Error {
        Error::Diverged {
            epoch,
            step,
            last_finite: Box::new(self.state.weights.clone()),
        }
    }
}

/// Trains from `w0` for `cfg.epochs` epochs and returns the last iterate and
/// the per-epoch history.
pub fn train_sgd(
    w0: &WeightVector,
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &SgdConfig,
) -> Result<(WeightVector, Vec<EpochRecord>)> {
    let mut trainer = SgdTrainer::new(SgdState::new(w0.clone()), cfg.clone(), data)?;
    if let Some(test) = test {
        trainer = trainer.with_test(test);
    }
    trainer.run()?;
    let state = trainer.into_state();
    Ok((state.weights, state.history))
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: MlpArchitecture,
    config: SgdConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    init_seed: Option<u64>,
}

/// Training checkpoint: weights, momentum buffer, epoch counter and config.
/// Shuffle streams are keyed by epoch, so the counter is the full RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdCheckpoint {
    pub state: SgdState,
    pub config: SgdConfig,
    pub init_seed: Option<u64>,
}

impl SgdCheckpoint {
    pub const KIND: &'static str = "sgd-checkpoint";

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            arch: self.state.weights.arch().clone(),
            config: self.config.clone(),
            epoch: self.state.epoch,
            history: self.state.history.clone(),
            init_seed: self.init_seed,
        };
        Container::new(Self::KIND, header)?
            .with_array("weights", self.state.weights.values().to_vec())
            .with_array("velocity", self.state.velocity.clone())
            .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Container::load(path)?;
        c.expect_kind(Self::KIND)?;
        let h: CheckpointHeader = c.header_as()?;
        let weights = WeightVector::new(h.arch, c.take_array("weights")?)?;
        let velocity = c.take_array("velocity")?;
        if velocity.len() != weights.len() {
            return Err(Error::Container("velocity length does not match weights".into()));
        }
        Ok(Self {
            state: SgdState {
                weights,
                velocity,
                epoch: h.epoch,
                history: h.history,
            },
            config: h.config,
            init_seed: h.init_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::nn::init_weights;

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        for bad in [
            SgdConfig { learning_rate: 0.0, ..Default::default() },
            SgdConfig { momentum: 1.0, ..Default::default() },
            SgdConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn full_batch_no_momentum_is_gradient_descent() {
        let data = synthetic::gaussian_blobs(64, 0.2, false, 2);
        let arch = MlpArchitecture::new(vec![2, 5, 1]).unwrap();
        let w0 = init_weights(&arch, 0.3, 1).unwrap();
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            batch_size: 64,
            epochs: 1,
            eval_every: 0,
            ..Default::default()
        };
        let (w1, _) = train_sgd(&w0, &data, None, &cfg).unwrap();
        let (_, g) = nn::grad_surrogate(&w0, data.features(), data.labels()).unwrap();
        for ((a, b), gi) in w1.values().iter().zip(w0.values()).zip(g.values()) {
            assert!((a - (b - 0.1 * gi)).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn separable_threshold_is_learned() {
        let data = synthetic::threshold_1d(500, 3);
        let arch = MlpArchitecture::new(vec![1, 1, 1]).unwrap();
        let w0 = init_weights(&arch, 0.04, 0).unwrap();
        let cfg = SgdConfig { epochs: 5, learning_rate: 0.5, batch_size: 10, ..Default::default() };
        let (w, history) = train_sgd(&w0, &data, None, &cfg).unwrap();
        assert_eq!(history.len(), 5);
        assert_eq!(nn::zero_one_error(&w, &data).unwrap(), 0.0);
    }

    #[test]
    fn repeat_and_resume_are_bit_identical() {
        let data = synthetic::gaussian_blobs(300, 0.2, false, 5);
        let arch = MlpArchitecture::new(vec![2, 8, 1]).unwrap();
        let w0 = init_weights(&arch, 0.04, 9).unwrap();
        let cfg = SgdConfig { epochs: 4, batch_size: 32, shuffle_seed: 17, ..Default::default() };
        let (full, hist) = train_sgd(&w0, &data, Some(&data), &cfg).unwrap();
        assert_eq!(full, train_sgd(&w0, &data, Some(&data), &cfg).unwrap().0);
        assert!(hist.iter().all(|r| r.mean_batch_loss.is_finite()));

        let mut trainer = SgdTrainer::new(SgdState::new(w0.clone()), cfg.clone(), &data)
            .unwrap()
            .with_test(&data);
        trainer.run_epoch(&mut |_, _| Ok(())).unwrap();
        trainer.run_epoch(&mut |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = SgdCheckpoint { state: trainer.into_state(), config: cfg.clone(), init_seed: Some(9) };
        ckpt.save(&path).unwrap();
        let loaded = SgdCheckpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let mut resumed = SgdTrainer::new(loaded.state, loaded.config, &data)
            .unwrap()
            .with_test(&data);
        resumed.run().unwrap();
        assert_eq!(resumed.state().weights, full);
        assert_eq!(resumed.state().history, hist);
    }

    #[test]
    fn divergence_returns_last_finite_weights() {
        let data = synthetic::gaussian_blobs(50, 0.2, false, 5);
        let arch = MlpArchitecture::new(vec![2, 4, 1]).unwrap();
        let w0 = init_weights(&arch, 0.5, 9).unwrap();
        let cfg = SgdConfig { learning_rate: 1e300, momentum: 0.0, epochs: 3, ..Default::default() };
        match train_sgd(&w0, &data, None, &cfg) {
            Err(Error::Diverged { last_finite, .. }) => {
                assert!(last_finite.values().iter().all(|v| v.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
