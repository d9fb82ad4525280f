//! SGD training with a step learning-rate schedule, evaluation and metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Tape};
use crate::data::{batch_iter, read_idx, synth_blobs, AugmentConfig, Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::model::{build_model, Model, ModelConfig, TINY3};
use crate::par::ExecMode;
use crate::param::{sgd_step, SgdConfig};
use crate::rng::Rng;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,lr,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian-bump images from [`synth_blobs`]; `seed` defaults to the run seed.
    Synth {
        #[serde(default = "defaults::n_per_class")]
        n_per_class: usize,
        #[serde(default = "defaults::test_per_class")]
        test_per_class: usize,
        #[serde(default = "defaults::size")]
        size: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            n_per_class: defaults::n_per_class(),
            test_per_class: defaults::test_per_class(),
            size: defaults::size(),
            seed: None,
        }
    }
}

mod defaults {
    pub fn n_per_class() -> usize {
        200
    }
    pub fn test_per_class() -> usize {
        50
    }
    pub fn size() -> usize {
        32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub arch: String,
    pub widths: Vec<usize>,
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices at which the learning rate drops tenfold.
    pub lr_milestones: Vec<usize>,
    pub seed: u64,
    pub data: DataSource,
    /// Use at most this many training images.
    pub train_limit: Option<usize>,
    pub augment: AugmentConfig,
    /// `None` fits per-channel statistics on the training set.
    pub normalization: Option<Normalization>,
    pub exec: ExecMode,
    /// Off by default so that metrics files are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Learned,
            arch: TINY3.into(),
            widths: vec![16, 32, 64],
            classes: 10,
            epochs: 10,
            batch_size: 32,
            eval_batch_size: 256,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: Vec::new(),
            seed: 0,
            data: DataSource::default(),
            train_limit: None,
            augment: AugmentConfig::default(),
            normalization: None,
            exec: ExecMode::default(),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.validate_common()
    }

    /// Everything except the learning-rate sign, which `lr = 0` runs relax.
    fn validate_common(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be >= 1".into()));
        }
        if !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum and weight_decay must be >= 0".into()));
        }
        for pair in self.lr_milestones.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Config(format!(
                    "lr_milestones must be strictly increasing, got {:?}",
                    self.lr_milestones
                )));
            }
        }
        if let Some(&last) = self.lr_milestones.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "milestone {last} is not below epochs = {}",
                    self.epochs
                )));
            }
        }
        self.model_config(1).effective_widths()?;
        Ok(())
    }

    pub fn model_config(&self, in_channels: usize) -> ModelConfig {
        ModelConfig {
            preset: self.arch.clone(),
            widths: self.widths.clone(),
            in_channels,
            classes: self.classes,
            head: self.head,
        }
    }

    pub fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// `lr * 10^-(number of milestones <= epoch)`
pub fn step_lr(epoch: usize, base_lr: f64, milestones: &[usize]) -> f64 {
    let drops = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr / 10f64.powi(drops as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Zero-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.lr, self.wall_ms
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    crate::fsutil::write_atomic(path.as_ref(), metrics_csv(rows).as_bytes())
}

/// Loads the configured train and test splits.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.data {
        DataSource::Synth {
            n_per_class,
            test_per_class,
            size,
            seed,
        } => {
            let seed = seed.unwrap_or(cfg.seed);
            (
                synth_blobs(cfg.classes, *n_per_class, *size, seed, Split::Train)?,
                synth_blobs(cfg.classes, *test_per_class, *size, seed, Split::Test)?,
            )
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            read_idx(train_images, train_labels, Some(cfg.classes), Split::Train)?,
            read_idx(test_images, test_labels, Some(cfg.classes), Split::Test)?,
        ),
    };
    let train = match cfg.train_limit {
        Some(n) if n < train.len() => train.slice(0, n)?,
        _ => train,
    };
    Ok((train, test))
}

/// Model plus the optimizer-side state needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub normalization: Normalization,
    pub epochs_completed: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

/// Top-1 accuracy with batch norm in inference mode and no augmentation.
pub fn evaluate(model: &Model, data: &Dataset, norm: &Normalization, batch_size: usize, exec: ExecMode) -> Result<f64> {
    if data.classes() != model.config.classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            model.config.classes,
            data.classes()
        )));
    }
    let mut correct = 0usize;
    for batch in batch_iter(data, batch_size, None, norm)? {
        let logits = model.logits(&batch.x, exec)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&batch.y)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Loads data from the config and trains from scratch.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (train_set, test_set) = load_datasets(cfg)?;
    train_on(cfg, &train_set, &test_set, None)
}

/// Trains on the given splits, starting from `resume` when present, until
/// `cfg.epochs` epochs are complete.
pub fn train_on(cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset, resume: Option<TrainState>) -> Result<TrainOutcome> {
    cfg.validate_common()?;
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(Error::Config(format!("lr must be >= 0, got {}", cfg.lr)));
    }
    for d in [train_set, test_set] {
        if d.classes() != cfg.classes {
            return Err(Error::Config(format!(
                "config has {} classes, {:?} split has {}",
                cfg.classes,
                d.split,
                d.classes()
            )));
        }
    }
    let channels = train_set.shape()[1];
    let mut state = match resume {
        Some(s) => {
            if s.model.config != cfg.model_config(channels) {
                return Err(Error::Config("checkpoint model does not match the config".into()));
            }
            s
        }
        None => TrainState {
            model: build_model(&cfg.model_config(channels), cfg.seed)?,
            normalization: cfg.normalization.clone().unwrap_or_else(|| Normalization::fit(train_set)),
            epochs_completed: 0,
        },
    };
    state.normalization.validate(channels)?;
    let fixed_before = state.model.fixed_snapshot();
    let run_rng = Rng::new(cfg.seed);
    let mut metrics = Vec::new();

    for epoch in state.epochs_completed..cfg.epochs {
        let start = Instant::now();
        let lr = step_lr(epoch, cfg.lr, &cfg.lr_milestones);
        let sgd = cfg.sgd(lr);
        let shuffle_seed = run_rng.fork(2 * epoch as u64 + 1).next_u64();
        let aug_rng = run_rng.fork(2 * epoch as u64 + 2);
        let batches = batch_iter(train_set, cfg.batch_size, Some(shuffle_seed), &state.normalization)?
            .with_augment(cfg.augment, aug_rng)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in batches.enumerate() {
            let mut tape = Tape::with_mode(cfg.exec);
            let vars = state.model.forward(&mut tape, &batch.x, BnMode::Train)?;
            let loss = tape.softmax_cross_entropy(vars.logits, &batch.y)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: loss_value,
                });
            }
            tape.backward(loss)?;
            state.model.absorb_grads(&tape, &vars);
            sgd_step(&mut state.model.params_mut(), &sgd)?;
            let n = batch.y.len();
            loss_sum += loss_value * n as f64;
            seen += n;
            correct += tape
                .value(vars.logits)
                .argmax_rows()
                .iter()
                .zip(&batch.y)
                .filter(|(p, y)| p == y)
                .count();
        }
        let test_acc = evaluate(&state.model, test_set, &state.normalization, cfg.eval_batch_size, cfg.exec)?;
        state.epochs_completed = epoch + 1;
        metrics.push(MetricsRow {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
            lr,
            wall_ms: if cfg.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }

    if state.model.fixed_snapshot() != fixed_before {
        return Err(Error::Contract("a fixed parameter changed during training".into()));
    }
    Ok(TrainOutcome { state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let m = [81, 122];
        assert_eq!(step_lr(0, 0.1, &m), 0.1);
        assert_eq!(step_lr(80, 0.1, &m), 0.1);
        assert!((step_lr(81, 0.1, &m) - 0.01).abs() < 1e-18);
        assert!((step_lr(122, 0.1, &m) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn milestone_validation() {
        let mut c = TrainConfig {
            epochs: 5,
            lr_milestones: vec![3, 2],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.lr_milestones = vec![2, 5];
        assert!(c.validate().is_err());
        c.lr_milestones = vec![2, 4];
        assert!(c.validate().is_ok());
        c.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let row = MetricsRow {
            epoch: 0,
            train_loss: 1.5,
            train_acc: 0.25,
            test_acc: 1.0,
            lr: 0.1,
            wall_ms: 0,
        };
        assert_eq!(metrics_csv(&[row]), format!("{METRICS_HEADER}\n0,1.5,0.25,1,0.1,0\n"));
    }

    #[test]
    fn config_defaults_from_partial_json() {
        let c: TrainConfig = serde_json::from_str(r#"{"head": "FixedHadamard", "epochs": 3}"#).unwrap();
        assert_eq!(c.head, HeadKind::FixedHadamard);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch_size, 32);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
