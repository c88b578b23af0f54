//! Grayscale images and labeled datasets.

use std::fmt;

use crate::scalar::Scalar;
use crate::selection::LabelVector;

pub const MNIST_SIDE: usize = 28;
pub const MNIST_CLASSES: usize = 10;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    pixels: Vec<T>,
}

impl<T: Scalar> Image<T> {
    /// # Panics
    /// If `pixels.len() != height * width`.
    pub fn new(height: usize, width: usize, pixels: Vec<T>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel buffer size");
        Self { height, width, pixels }
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [T] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.max(T::zero()).min(T::one());
        }
    }

    pub fn is_unit_range(&self) -> bool {
        self.pixels.iter().all(|&p| p >= T::zero() && p <= T::one())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Images paired one-to-one with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    pub name: String,
    pub split: Split,
    images: Vec<Image<T>>,
    labels: LabelVector,
}

impl<T: Scalar> LabeledDataset<T> {
    /// # Panics
    /// If the image and label counts differ.
    pub fn new(name: impl Into<String>, split: Split, images: Vec<Image<T>>, labels: LabelVector) -> Self {
        assert_eq!(images.len(), labels.len(), "one label per image");
        Self {
            name: name.into(),
            split,
            images,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image<T>] {
        &self.images
    }

    pub fn labels(&self) -> &LabelVector {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    /// Subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            split: self.split,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self.labels.select(indices),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn with_images(&self, name: impl Into<String>, images: Vec<Image<T>>) -> Self {
        Self::new(name, self.split, images, self.labels.clone())
    }
}
