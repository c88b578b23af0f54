//! Image perturbations used to derive the D1-D4 datasets from an original.
//!
//! | op | transform                                             |
//! |----|-------------------------------------------------------|
//! | 1  | 7x7 Gaussian lowpass, sigma 1                         |
//! | 2  | 3x3 Laplacian approximation (alpha = 0.2)             |
//! | 3  | additive Gaussian noise, mean 0, variance 0.02        |
//! | 4  | additive Gaussian noise, mean 0, variance 0.1         |
//!
//! Filtering is correlation with zero padding and same-size output; every
//! public transform clamps its result to `[0, 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Image, LabeledDataset};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImageOpError {
    #[error("kernel size must be odd and positive, got {0}")]
    KernelSize(usize),
    #[error("gaussian sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("noise variance must be non-negative and finite, got {0}")]
    Variance(f64),
    #[error("kernel {kh}x{kw} does not fit a {h}x{w} image")]
    KernelTooLarge { kh: usize, kw: usize, h: usize, w: usize },
    #[error("unknown operation id {0}, expected 1..=4")]
    UnknownOperation(u8),
    #[error("laplacian alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
}

pub type Result<T, E = ImageOpError> = std::result::Result<T, E>;

/// Odd-sized correlation kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D<T> {
    height: usize,
    width: usize,
    weights: Vec<T>,
}

impl<T: Scalar> Kernel2D<T> {
    pub fn new(height: usize, width: usize, weights: Vec<T>) -> Result<Self> {
        for s in [height, width] {
            if s % 2 == 0 {
                return Err(ImageOpError::KernelSize(s));
            }
        }
        assert_eq!(weights.len(), height * width, "kernel weight count");
        Ok(Self { height, width, weights })
    }

    pub fn identity() -> Self {
        let mut w = vec![T::zero(); 9];
        w[4] = T::one();
        Self::new(3, 3, w).expect("3x3 is odd")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.weights[i * self.width + j]
    }

    pub fn sum(&self) -> T {
        self.weights.iter().copied().sum()
    }
}

/// Rotationally symmetric Gaussian, normalized to unit sum.
pub fn gaussian_kernel<T: Scalar>(size: usize, sigma: f64) -> Result<Kernel2D<T>> {
    if size.is_multiple_of(2) {
        return Err(ImageOpError::KernelSize(size));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ImageOpError::Sigma(sigma));
    }
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size * size)
        .map(|idx| {
            let di = (idx / size) as f64 - c;
            let dj = (idx % size) as f64 - c;
            (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Kernel2D::new(size, size, raw.iter().map(|&w| T::of(w / total)).collect())
}

/// Shape of the 3x3 Laplacian approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LaplacianShape {
    /// `4/(alpha+1) * [[a/4, (1-a)/4, a/4], [(1-a)/4, -1, (1-a)/4], [a/4, (1-a)/4, a/4]]`.
    Alpha(f64),
    /// `[[0, 1, 0], [1, -4, 1], [0, 1, 0]]`.
    FivePoint,
}

impl Default for LaplacianShape {
    fn default() -> Self {
        LaplacianShape::Alpha(0.2)
    }
}

/// The default `alpha = 0.2` Laplacian.
pub fn laplacian_kernel<T: Scalar>() -> Kernel2D<T> {
    laplacian_kernel_shaped(LaplacianShape::default()).expect("default alpha is valid")
}

pub fn laplacian_kernel_shaped<T: Scalar>(shape: LaplacianShape) -> Result<Kernel2D<T>> {
    let w: [f64; 9] = match shape {
        LaplacianShape::Alpha(a) => {
            if !(0.0..=1.0).contains(&a) {
                return Err(ImageOpError::Alpha(a));
            }
            let s = 4.0 / (a + 1.0);
            let corner = s * a / 4.0;
            let edge = s * (1.0 - a) / 4.0;
            [corner, edge, corner, edge, -s, edge, corner, edge, corner]
        }
        LaplacianShape::FivePoint => [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
    };
    Kernel2D::new(3, 3, w.iter().map(|&v| T::of(v)).collect())
}

/// Zero-padded same-size correlation without clamping.
pub fn correlate<T: Scalar>(img: &Image<T>, kernel: &Kernel2D<T>) -> Result<Image<T>> {
    let (h, w) = (img.height(), img.width());
    let (kh, kw) = (kernel.height(), kernel.width());
    if kh > h || kw > w {
        return Err(ImageOpError::KernelTooLarge { kh, kw, h, w });
    }
    let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for i in 0..kh {
                let sy = y as isize + i as isize - ch;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in 0..kw {
                    let sx = x as isize + j as isize - cw;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    acc += kernel.get(i, j) * img.get(sy as usize, sx as usize);
                }
            }
            out.set(y, x, acc);
        }
    }
    Ok(out)
}

/// [`correlate`] followed by clamping to `[0, 1]`.
pub fn filter2d<T: Scalar>(img: &Image<T>, kernel: &Kernel2D<T>) -> Result<Image<T>> {
    let mut out = correlate(img, kernel)?;
    out.clamp_unit();
    Ok(out)
}

fn check_variance(variance: f64) -> Result<()> {
    if variance >= 0.0 && variance.is_finite() {
        Ok(())
    } else {
        Err(ImageOpError::Variance(variance))
    }
}

fn noise_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn add_noise_with<T: Scalar>(img: &Image<T>, normal: &Normal<f64>, rng: &mut ChaCha8Rng) -> Image<T> {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p += T::of(normal.sample(rng));
    }
    out.clamp_unit();
    out
}

/// Adds i.i.d. `Normal(mean, variance)` noise to every pixel, then clamps.
///
/// Deterministic in `seed`; equivalent to stream 0 of
/// [`add_gaussian_noise_stream`].
pub fn add_gaussian_noise<T: Scalar>(img: &Image<T>, mean: f64, variance: f64, seed: u64) -> Result<Image<T>> {
    add_gaussian_noise_stream(img, mean, variance, seed, 0)
}

/// Noise drawn from an independent stream `(seed, stream)`, so images can be
/// perturbed in any order with the same result.
pub fn add_gaussian_noise_stream<T: Scalar>(
    img: &Image<T>,
    mean: f64,
    variance: f64,
    seed: u64,
    stream: u64,
) -> Result<Image<T>> {
    check_variance(variance)?;
    let normal = Normal::new(mean, variance.sqrt()).map_err(|_| ImageOpError::Variance(variance))?;
    Ok(add_noise_with(img, &normal, &mut noise_rng(seed, stream)))
}

/// One of the four dataset-deriving operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    GaussianBlur { size: usize, sigma: f64 },
    Laplacian(LaplacianShape),
    GaussianNoise { mean: f64, variance: f64 },
}

impl Perturbation {
    /// Operations 1-4 with their reference parameters.
    pub fn from_id(op_id: u8) -> Result<Self> {
        Ok(match op_id {
            1 => Perturbation::GaussianBlur { size: 7, sigma: 1.0 },
            2 => Perturbation::Laplacian(LaplacianShape::default()),
            3 => Perturbation::GaussianNoise {
                mean: 0.0,
                variance: 0.02,
            },
            4 => Perturbation::GaussianNoise {
                mean: 0.0,
                variance: 0.1,
            },
            other => return Err(ImageOpError::UnknownOperation(other)),
        })
    }

    /// Applies to every image; image `i` draws noise from stream `i`.
    pub fn apply<T: Scalar>(&self, images: &[Image<T>], seed: u64) -> Result<Vec<Image<T>>> {
        match *self {
            Perturbation::GaussianBlur { size, sigma } => {
                let k = gaussian_kernel(size, sigma)?;
                images.par_iter().map(|img| filter2d(img, &k)).collect()
            }
            Perturbation::Laplacian(shape) => {
                let k = laplacian_kernel_shaped(shape)?;
                images.par_iter().map(|img| filter2d(img, &k)).collect()
            }
            Perturbation::GaussianNoise { mean, variance } => {
                check_variance(variance)?;
                let normal = Normal::new(mean, variance.sqrt()).map_err(|_| ImageOpError::Variance(variance))?;
                Ok(images
                    .par_iter()
                    .enumerate()
                    .map(|(i, img)| add_noise_with(img, &normal, &mut noise_rng(seed, i as u64)))
                    .collect())
            }
        }
    }
}

/// Name of the dataset derived by `op_id`: `X-D0` becomes `X-D<op>`.
pub fn derived_name(name: &str, op_id: u8) -> String {
    match name.strip_suffix("-D0") {
        Some(family) => format!("{family}-D{op_id}"),
        None => format!("{name}-D{op_id}"),
    }
}

/// Derives dataset `D<op_id>`: same size, same labels, perturbed images.
pub fn apply_operation<T: Scalar>(dataset: &LabeledDataset<T>, op_id: u8, seed: u64) -> Result<LabeledDataset<T>> {
    let op = Perturbation::from_id(op_id)?;
    let images = op.apply(dataset.images(), seed)?;
    Ok(dataset.with_images(derived_name(&dataset.name, op_id), images))
}
