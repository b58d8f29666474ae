//! Mini-batch SGD with heavy-ball momentum, scheduled learning rate and
//! batch size, and periodic spectral sampling.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_mnist, synthetic_blobs, Dataset, Split};
use crate::error::{usage, Result};
use crate::fisher::{MeasureSeries, SpectralOptions, SpectralSample};
use crate::linalg::Matrix;
use crate::model::{self, init_params, Backprop, LabeledBatch, MlpSpec, ParamVector};
use crate::schedule::{BatchSchedule, LrSchedule};

/// Offset added to the epoch number to pick the shuffle RNG stream.
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { classes: usize, dims: usize, per_class: usize, spread: f64, seed: u64 },
    Mnist { dir: PathBuf, train_limit: Option<usize>, test_limit: Option<usize> },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            Self::Synthetic { classes, dims, per_class, spread, seed } => {
                synthetic_blobs(*classes, *dims, *per_class, *spread, *seed)
            }
            Self::Mnist { dir, train_limit, test_limit } => load_mnist(dir, *train_limit, *test_limit),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: MlpSpec,
    pub lr: LrSchedule,
    pub batch: BatchSchedule,
    pub momentum: f64,
    pub total_epochs: usize,
    /// Mini-batches between spectral samples; the count restarts each epoch.
    pub measure_interval: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub dataset: DatasetSource,
    /// Evaluate errors after every epoch rather than only the last.
    pub eval_each_epoch: bool,
    #[serde(skip, default)]
    pub spectral: SpectralOptions,
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_MEASURE_INTERVAL: usize = 50;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lr.validate()?;
        self.batch.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return usage(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.measure_interval == 0 {
            return usage("measure interval must be >= 1");
        }
        if self.total_epochs == 0 {
            return usage("total epochs must be >= 1");
        }
        if self.lr.total_epochs != self.total_epochs || self.batch.total_epochs != self.total_epochs {
            return usage(format!(
                "schedules cover {} (lr) and {} (batch) epochs, run has {}",
                self.lr.total_epochs, self.batch.total_epochs, self.total_epochs
            ));
        }
        Ok(())
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.dims() != self.model.input_width() {
            return usage(format!(
                "dataset {} has {} features, model input width is {}",
                data.name,
                data.dims(),
                self.model.input_width()
            ));
        }
        if data.class_count != self.model.class_count() {
            return usage(format!(
                "dataset {} has {} classes, model output width is {}",
                data.name,
                data.class_count,
                self.model.class_count()
            ));
        }
        if data.train.is_empty() || data.test.is_empty() {
            return usage(format!("dataset {} has an empty split", data.name));
        }
        Ok(())
    }
}

/// `v ← μ·v − α·g`, `θ ← θ + v`. `grad` is the batch-mean gradient.
pub fn sgd_step(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], alpha: f64, momentum: f64) -> Result<()> {
    if theta.len() != velocity.len() || theta.len() != grad.len() {
        return usage(format!(
            "sgd step length mismatch: theta {}, velocity {}, grad {}",
            theta.len(),
            velocity.len(),
            grad.len()
        ));
    }
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - alpha * g;
        *t += *v;
    }
    Ok(())
}

/// Classification error in percent: argmax misclassifications, ties to the
/// lowest class index.
pub fn evaluate(spec: &MlpSpec, params: &ParamVector, split: &Split) -> Result<f64> {
    Ok(evaluate_with_loss(spec, params, split)?.0)
}

/// Error percentage and mean cross-entropy of a split.
pub fn evaluate_with_loss(spec: &MlpSpec, params: &ParamVector, split: &Split) -> Result<(f64, f64)> {
    if split.is_empty() {
        return usage("evaluation on an empty split");
    }
    let (pred, loss) = model::predict_with_loss(spec, params, &split.features, &split.labels)?;
    Ok((error_percent(&pred, &split.labels), loss))
}

pub fn error_percent(predicted: &[usize], labels: &[usize]) -> f64 {
    let wrong = predicted.iter().zip(labels).filter(|(p, y)| p != y).count();
    100.0 * wrong as f64 / labels.len() as f64
}

/// Learning rate and batch size applied at one SGD iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sampled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Scheduled batch size (the final batch of an epoch may be smaller).
    pub batch_size: usize,
    pub iterations: usize,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
    pub train_loss: Option<f64>,
    pub c_bar: Option<f64>,
    pub l_cum: f64,
    pub samples_seen: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub samples: Vec<SpectralSample>,
    pub iterations: Vec<IterationRecord>,
    pub initial_train_loss: f64,
    /// SHA-256 of the final parameters (little-endian `f64` bytes), hex.
    pub param_digest: String,
    pub degenerate_samples: usize,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub final_params: ParamVector,
}

impl TrainReport {
    pub fn final_epoch(&self) -> &EpochRecord {
        self.epochs.last().expect("a report has at least one epoch")
    }
}

pub fn param_digest(params: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in &params.theta {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Mutable state of one training run.
pub struct Trainer<'a> {
    config: &'a TrainConfig,
    data: &'a Dataset,
    pub params: ParamVector,
    pub velocity: Vec<f64>,
    pub series: MeasureSeries,
    pub samples: Vec<SpectralSample>,
    pub iterations: Vec<IterationRecord>,
    pub warnings: Vec<String>,
    /// Jacobian mean rows of sampled iterations, kept only when requested.
    pub sampled_gradients: Option<Vec<Vec<f64>>>,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        config.check_dataset(data)?;
        let params = init_params(&config.model);
        let velocity = vec![0.0; params.len()];
        Ok(Self {
            config,
            data,
            params,
            velocity,
            series: MeasureSeries::new(),
            samples: Vec::new(),
            iterations: Vec::new(),
            warnings: Vec::new(),
            sampled_gradients: None,
            iteration: 0,
        })
    }

    /// Deterministic permutation of the training indices for `epoch`.
    pub fn shuffle(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn gather(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let train = &self.data.train;
        let cols = train.dims();
        let mut x = Vec::with_capacity(indices.len() * cols);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(train.features.row(i));
            y.push(train.labels[i]);
        }
        LabeledBatch::new(Matrix::new(indices.len(), cols, x)?, y)
    }

    /// One pass over the training split. Returns the number of iterations run.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<usize> {
        let cfg = self.config;
        let lr = cfg.lr.lr_at(epoch)?;
        let batch_size = cfg.batch.batch_size_at(&cfg.lr, epoch)?;
        let order = self.shuffle(epoch);
        let mut count = 0;
        for (t, chunk) in order.chunks(batch_size).enumerate() {
            self.iteration += 1;
            count += 1;
            let batch = self.gather(chunk)?;
            let sampled = t % cfg.measure_interval == 0;
            let grad = if sampled {
                let bp = Backprop::run(&cfg.model, &self.params, &batch)?;
                if let Some(store) = &mut self.sampled_gradients {
                    store.push(model::batch_gradient(&bp.jacobian())?);
                }
                if bp.is_finite() {
                    let gram = bp.layer_blocked_gram();
                    let (sample, warning) = SpectralSample::from_gram(&gram, epoch, self.iteration, lr, &cfg.spectral)?;
                    if let Some(w) = warning {
                        self.warnings.push(format!("iteration {}: {w}", self.iteration));
                    }
                    self.series.update(&sample)?;
                    self.samples.push(sample);
                } else {
                    self.warnings.push(format!(
                        "iteration {}: non-finite per-sample gradients, spectral sample skipped",
                        self.iteration
                    ));
                }
                bp.mean_gradient()
            } else {
                model::loss_and_gradient(&cfg.model, &self.params, &batch)?.1
            };
            sgd_step(&mut self.params.theta, &mut self.velocity, &grad, lr, cfg.momentum)?;
            self.iterations.push(IterationRecord {
                epoch,
                iteration: self.iteration,
                batch_size: chunk.len(),
                lr,
                sampled,
            });
        }
        Ok(count)
    }
}

/// Loads the configured dataset and trains on it.
pub fn train(config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let data = config.dataset.load()?;
    train_on(config, &data)
}

/// Full training run on an already loaded dataset.
pub fn train_on(config: &TrainConfig, data: &Dataset) -> Result<TrainReport> {
    let started = Instant::now();
    let mut trainer = Trainer::new(config, data)?;
    let (_, initial_train_loss) = evaluate_with_loss(&config.model, &trainer.params, &data.train)?;
    let mut epochs = Vec::with_capacity(config.total_epochs);
    for epoch in 1..=config.total_epochs {
        let epoch_start = Instant::now();
        let iterations = trainer.run_epoch(epoch)?;
        let measure = trainer.series.finish_epoch(epoch)?;
        let wall_time_s = epoch_start.elapsed().as_secs_f64();
        let (train_error, test_error, train_loss) = if config.eval_each_epoch || epoch == config.total_epochs {
            let (tr, loss) = evaluate_with_loss(&config.model, &trainer.params, &data.train)?;
            let te = evaluate(&config.model, &trainer.params, &data.test)?;
            (Some(tr), Some(te), Some(loss))
        } else {
            (None, None, None)
        };
        epochs.push(EpochRecord {
            epoch,
            lr: config.lr.lr_at(epoch)?,
            batch_size: config.batch.batch_size_at(&config.lr, epoch)?,
            iterations,
            train_error,
            test_error,
            train_loss,
            c_bar: measure.c_bar,
            l_cum: measure.l_cum,
            samples_seen: measure.samples_seen,
            wall_time_s,
        });
    }
    Ok(TrainReport {
        epochs,
        degenerate_samples: trainer.series.degenerate_count(),
        param_digest: param_digest(&trainer.params),
        samples: trainer.samples,
        iterations: trainer.iterations,
        initial_train_loss,
        warnings: trainer.warnings,
        wall_time_s: started.elapsed().as_secs_f64(),
        final_params: trainer.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut theta = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut theta, &mut v, &[1.0, -2.0], 0.1, 0.0).unwrap();
        assert_eq!(theta, vec![0.9, 2.2]);
    }

    #[test]
    fn coasting_with_zero_gradient() {
        let mut theta = vec![1.0];
        let mut v = vec![0.5];
        sgd_step(&mut theta, &mut v, &[0.0], 0.1, 0.9).unwrap();
        assert_eq!(v, vec![0.45]);
        assert_eq!(theta, vec![1.45]);
    }

    #[test]
    fn two_momentum_steps_match_unrolled() {
        let (g1, g2, a, m) = (0.3, -0.7, 0.05, 0.9);
        let mut theta = vec![2.0];
        let mut v = vec![0.0];
        sgd_step(&mut theta, &mut v, &[g1], a, m).unwrap();
        sgd_step(&mut theta, &mut v, &[g2], a, m).unwrap();
        let v1 = -a * g1;
        let t1 = 2.0 + v1;
        let v2 = m * v1 - a * g2;
        let t2 = t1 + v2;
        assert!((theta[0] - t2).abs() < 1e-15);
        assert!((v[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_length_mismatch() {
        let mut theta = vec![0.0; 2];
        let mut v = vec![0.0; 3];
        assert!(sgd_step(&mut theta, &mut v, &[0.0; 2], 0.1, 0.9).is_err());
    }

    #[test]
    fn error_percent_counts() {
        assert_eq!(error_percent(&[0, 1, 2], &[0, 1, 2]), 0.0);
        assert_eq!(error_percent(&[0, 0, 0, 0], &[0, 1, 0, 1]), 50.0);
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let spec = MlpSpec::new(vec![2, 2], 0).unwrap();
        let params = ParamVector::zeros(&spec);
        let empty = Split::new(Matrix::zeros(0, 2), vec![]).unwrap();
        assert!(evaluate(&spec, &params, &empty).is_err());
    }

    #[test]
    fn uniform_model_predicts_class_zero() {
        let spec = MlpSpec::new(vec![2, 2], 0).unwrap();
        let params = ParamVector::zeros(&spec);
        let x = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]]).unwrap();
        let split = Split::new(x, vec![0, 1, 0, 1]).unwrap();
        assert_eq!(evaluate(&spec, &params, &split).unwrap(), 50.0);
    }
}
