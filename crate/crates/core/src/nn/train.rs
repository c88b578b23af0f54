//! Minibatch SGD with heavy-ball momentum and per-epoch learning-rate decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{accumulate, check_images, mean_loss};
use super::{Architecture, CnnModel, NnError, Result};
use crate::dataset::{Image, LabeledDataset};
use crate::scalar::Scalar;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub initial_lr: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Train on only the first `n` samples (desk-scale runs).
    pub max_samples: Option<usize>,
    /// Size of the fixed training slice on which loss is monitored.
    pub monitor_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::reference(),
            initial_lr: 0.1,
            lr_decay: 0.5,
            momentum: 0.95,
            batch_size: 128,
            epochs: 3,
            seed: 0,
            max_samples: None,
            monitor_samples: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        let bad = |msg: String| Err(NnError::Config(msg));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.max_samples == Some(0) {
            return bad("max_samples must be positive".into());
        }
        Ok(())
    }

    /// Learning rate used in each epoch, e.g. `[0.1, 0.05, 0.025]`.
    pub fn learning_rates(&self) -> Vec<f64> {
        (0..self.epochs)
            .map(|e| self.initial_lr * self.lr_decay.powi(e as i32))
            .collect()
    }
}

/// Progress after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean of the minibatch losses seen during the epoch.
    pub train_loss: f64,
    /// Loss on the monitoring slice after the epoch.
    pub monitor_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_monitor_loss: f64,
    pub epochs: Vec<EpochSummary>,
    pub samples: usize,
}

/// Trains a freshly initialized model. See [`train_with`].
pub fn train<T: Scalar>(dataset: &LabeledDataset<T>, cfg: &TrainConfig) -> Result<(CnnModel<T>, TrainReport)> {
    train_with(dataset, cfg, |_| {})
}

/// Trains from Glorot initialization, calling `on_epoch` after every epoch.
///
/// Initialization draws from `cfg.seed`; shuffling draws from a separate
/// stream of the same seed. The final partial minibatch of an epoch is kept.
/// Update rule: `v <- momentum * v - lr * g`, `w <- w + v`.
pub fn train_with<T: Scalar>(
    dataset: &LabeledDataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<(CnnModel<T>, TrainReport)> {
    cfg.validate()?;
    let n = cfg.max_samples.map_or(dataset.len(), |m| m.min(dataset.len()));
    if n == 0 {
        return Err(NnError::EmptyBatch);
    }
    let images: Vec<&Image<T>> = dataset.images()[..n].iter().collect();
    let labels = &dataset.labels().as_slice()[..n];
    let arch = cfg.architecture;
    check_images(&arch, &images)?;
    if let Some(&label) = labels.iter().find(|&&l| l >= arch.classes) {
        return Err(NnError::Label {
            label,
            classes: arch.classes,
        });
    }

    let mut model = CnnModel::glorot(arch, cfg.seed)?;
    let monitor = cfg.monitor_samples.clamp(1, n);
    let monitor_loss = |m: &CnnModel<T>| mean_loss(m, &images[..monitor], &labels[..monitor]).map(|l| l.widen());
    let initial_monitor_loss = monitor_loss(&model)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = vec![T::zero(); model.num_params()];
    let mut grad = vec![T::zero(); model.num_params()];
    let mut buffers = Vec::new();
    let mut batch_imgs = Vec::with_capacity(cfg.batch_size);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    let mu = T::of(cfg.momentum);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for (e, lr) in cfg.learning_rates().into_iter().enumerate() {
        order.shuffle(&mut rng);
        let lr_t = T::of(lr);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch_imgs.clear();
            batch_labels.clear();
            batch_imgs.extend(chunk.iter().map(|&i| images[i]));
            batch_labels.extend(chunk.iter().map(|&i| labels[i]));
            let loss = accumulate(&model, &batch_imgs, &batch_labels, &mut buffers, &mut grad);
            let scale = lr_t / T::of(chunk.len() as f64);
            for ((w, v), &g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = mu * *v - scale * g;
                *w += *v;
            }
            loss_sum += loss.widen() / chunk.len() as f64;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        if !train_loss.is_finite() {
            return Err(NnError::Diverged { epoch: e + 1 });
        }
        let summary = EpochSummary {
            epoch: e + 1,
            learning_rate: lr,
            train_loss,
            monitor_loss: monitor_loss(&model)?,
        };
        on_epoch(&summary);
        epochs.push(summary);
    }

    Ok((
        model,
        TrainReport {
            initial_monitor_loss,
            epochs,
            samples: n,
        },
    ))
}
