//! Convolutional classifier built from scratch.
//!
//! The network is `conv(k x k, F filters) -> ReLU -> avg-pool -> flatten ->
//! FC(h1) -> ReLU -> FC(h2) -> ReLU -> FC(classes) -> softmax`. The reference
//! instance ([`Architecture::reference`]) maps a 28x28 image through
//! `20x20x20 -> 10x10x20 -> 2000 -> 360 -> 60 -> 10`.
//!
//! All parameters live in one flat vector ([`CnnModel::params`]) laid out as
//! described by [`ParamLayout`], which keeps the optimizer, gradient checks
//! and checkpoints uniform across layers.

mod checkpoint;
mod network;
mod train;

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_model, load_model_expecting, save_model, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use network::{backward, forward, forward_backward, loss_and_gradients, mean_loss, Gradients};
pub use train::{train, train_with, EpochSummary, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("image {index} is {height}x{width}, model expects {expected}x{expected}")]
    InputShape {
        index: usize,
        height: usize,
        width: usize,
        expected: usize,
    },
    #[error("{images} images but {labels} labels")]
    LabelCount { images: usize, labels: usize },
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture {found:?} does not match expected {expected:?}")]
    ArchitectureMismatch {
        expected: Architecture,
        found: Architecture,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Selection(#[from] crate::selection::SelectionError),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

const MAX_DIMENSION: usize = 1 << 16;
const MAX_PARAMS: u128 = 1 << 30;

/// Layer sizes of the convolutional classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Architecture {
    /// Input images are `input_side x input_side`.
    pub input_side: usize,
    pub filters: usize,
    pub kernel: usize,
    /// Average-pool window and stride.
    pub pool: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
}

impl Architecture {
    /// 20 filters 9x9, 2x2 average pool, FC 360 and 60, 10 classes.
    pub const fn reference() -> Self {
        Self {
            input_side: 28,
            filters: 20,
            kernel: 9,
            pool: 2,
            hidden1: 360,
            hidden2: 60,
            classes: 10,
        }
    }

    pub fn conv_side(&self) -> usize {
        self.input_side + 1 - self.kernel
    }

    pub fn pooled_side(&self) -> usize {
        self.conv_side() / self.pool
    }

    pub fn flat_len(&self) -> usize {
        self.filters * self.pooled_side() * self.pooled_side()
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.input_side,
            self.filters,
            self.kernel,
            self.pool,
            self.hidden1,
            self.hidden2,
            self.classes,
        ];
        if fields.contains(&0) {
            return Err(NnError::Architecture(format!("zero-sized layer in {self:?}")));
        }
        if fields.iter().any(|&f| f > MAX_DIMENSION) {
            return Err(NnError::Architecture(format!(
                "layer wider than {MAX_DIMENSION} in {self:?}"
            )));
        }
        if self.kernel > self.input_side {
            return Err(NnError::Architecture(format!(
                "kernel {} larger than input {}",
                self.kernel, self.input_side
            )));
        }
        if !self.conv_side().is_multiple_of(self.pool) {
            return Err(NnError::Architecture(format!(
                "conv output {} not divisible by pool {}",
                self.conv_side(),
                self.pool
            )));
        }
        let flat = self.filters as u128 * (self.conv_side() / self.pool).pow(2) as u128;
        let params = flat * self.hidden1 as u128 + self.hidden1 as u128 * self.hidden2 as u128;
        if params > MAX_PARAMS {
            return Err(NnError::Architecture(format!("more than {MAX_PARAMS} parameters")));
        }
        if self.classes < 2 {
            return Err(NnError::Architecture("need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    /// Activation sizes from input to logits.
    pub fn shape_chain(&self) -> [Vec<usize>; 7] {
        let (c, p) = (self.conv_side(), self.pooled_side());
        [
            vec![self.input_side, self.input_side],
            vec![self.filters, c, c],
            vec![self.filters, p, p],
            vec![self.flat_len()],
            vec![self.hidden1],
            vec![self.hidden2],
            vec![self.classes],
        ]
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::reference()
    }
}

/// Offsets of every tensor inside the flat parameter vector.
///
/// Convolution weights are `[filter][ky][kx]`; fully-connected weights are
/// stored input-major, `[in][out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub conv_w: Range<usize>,
    pub conv_b: Range<usize>,
    pub fc1_w: Range<usize>,
    pub fc1_b: Range<usize>,
    pub fc2_w: Range<usize>,
    pub fc2_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
}

impl ParamLayout {
    fn new(a: &Architecture) -> Self {
        let mut at = 0;
        let mut next = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        Self {
            conv_w: next(a.filters * a.kernel * a.kernel),
            conv_b: next(a.filters),
            fc1_w: next(a.flat_len() * a.hidden1),
            fc1_b: next(a.hidden1),
            fc2_w: next(a.hidden1 * a.hidden2),
            fc2_b: next(a.hidden2),
            out_w: next(a.hidden2 * a.classes),
            out_b: next(a.classes),
        }
    }

    pub fn len(&self) -> usize {
        self.out_b.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(name, range)` for every tensor, in storage order.
    pub fn tensors(&self) -> [(&'static str, Range<usize>); 8] {
        [
            ("conv.weight", self.conv_w.clone()),
            ("conv.bias", self.conv_b.clone()),
            ("fc1.weight", self.fc1_w.clone()),
            ("fc1.bias", self.fc1_b.clone()),
            ("fc2.weight", self.fc2_w.clone()),
            ("fc2.bias", self.fc2_b.clone()),
            ("out.weight", self.out_w.clone()),
            ("out.bias", self.out_b.clone()),
        ]
    }
}

/// Parameters of one classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<T> {
    arch: Architecture,
    layout: ParamLayout,
    params: Vec<T>,
}

impl<T: Scalar> CnnModel<T> {
    /// All weights and biases zero: every input maps to the uniform row.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        Ok(Self {
            params: vec![T::zero(); layout.len()],
            arch,
            layout,
        })
    }

    /// Glorot-uniform weights `U(+-sqrt(6 / (fan_in + fan_out)))`, zero biases.
    pub fn glorot(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = arch.kernel * arch.kernel;
        let l = model.layout.clone();
        let fans = [
            (l.conv_w, k2, arch.filters * k2),
            (l.fc1_w, arch.flat_len(), arch.hidden1),
            (l.fc2_w, arch.hidden1, arch.hidden2),
            (l.out_w, arch.hidden2, arch.classes),
        ];
        for (range, fan_in, fan_out) in fans {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut model.params[range] {
                *p = T::of(rng.random_range(-limit..limit));
            }
        }
        Ok(model)
    }

    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if params.len() != layout.len() {
            return Err(NnError::Architecture(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                layout.len()
            )));
        }
        Ok(Self { arch, layout, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shape_chain() {
        let a = Architecture::reference();
        a.validate().unwrap();
        assert_eq!(
            a.shape_chain(),
            [
                vec![28, 28],
                vec![20, 20, 20],
                vec![20, 10, 10],
                vec![2000],
                vec![360],
                vec![60],
                vec![10]
            ]
        );
        let l = a.layout();
        assert_eq!(l.conv_w.len(), 20 * 81);
        assert_eq!(l.fc1_w.len(), 2000 * 360);
        assert_eq!(l.len(), 1620 + 20 + 720_000 + 360 + 21_600 + 60 + 600 + 10);
    }

    #[test]
    fn invalid_architectures() {
        let mut a = Architecture::reference();
        a.pool = 3;
        assert!(a.validate().is_err());
        a = Architecture::reference();
        a.kernel = 30;
        assert!(a.validate().is_err());
        a = Architecture::reference();
        a.classes = 1;
        assert!(a.validate().is_err());
        assert!(CnnModel::<f64>::from_params(Architecture::reference(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let a = Architecture {
            input_side: 12,
            filters: 2,
            kernel: 5,
            pool: 2,
            hidden1: 20,
            hidden2: 10,
            classes: 10,
        };
        let m = CnnModel::<f64>::glorot(a, 1).unwrap();
        let l = m.layout();
        let lim = (6.0f64 / (20.0 + 10.0)).sqrt();
        assert!(m.params()[l.fc2_w.clone()].iter().all(|w| w.abs() < lim));
        for r in [&l.conv_b, &l.fc1_b, &l.fc2_b, &l.out_b] {
            assert!(m.params()[r.clone()].iter().all(|&b| b == 0.0));
        }
        assert_eq!(m, CnnModel::glorot(a, 1).unwrap());
        assert_ne!(m, CnnModel::glorot(a, 2).unwrap());
    }
}
