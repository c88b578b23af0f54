//! IDX container reader/writer for MNIST-family datasets.
//!
//! Layout: two zero bytes, a type byte (`0x08`, unsigned byte), a rank byte,
//! `rank` big-endian `u32` dimensions, then row-major payload. Images are rank
//! 3 (`count x rows x cols`), labels rank 1. Gzip-compressed files (as
//! distributed) are decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use thiserror::Error;

use crate::dataset::{Image, LabeledDataset, Split};
use crate::scalar::Scalar;
use crate::selection::LabelVector;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
const UNSIGNED_BYTE: u8 = 0x08;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gzip stream: {0}")]
    Gzip(#[source] std::io::Error),
    #[error("offset {offset}: need {needed} bytes, only {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("offset 0: bad magic {found:02x?}, expected 00 00 08 xx")]
    BadMagic { found: [u8; 4] },
    #[error("offset 2: unsupported data type 0x{found:02x}, expected 0x08")]
    DataType { found: u8 },
    #[error("offset 3: rank {found}, expected {expected}")]
    Rank { expected: u8, found: u8 },
    #[error("offset {offset}: dimension {index} is zero")]
    ZeroDimension { offset: usize, index: usize },
    #[error("offset {offset}: payload size overflows")]
    Overflow { offset: usize },
    #[error("offset {offset}: {extra} unexpected trailing bytes")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("offset {offset}: label {value} outside 0..{classes}")]
    LabelOutOfRange { offset: usize, value: u8, classes: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("images of differing sizes: {0}")]
    RaggedImages(String),
    #[error("refusing to write an empty dataset")]
    EmptyDataset,
    #[error("{0} images too large for an IDX u32 dimension")]
    TooLarge(usize),
}

pub type Result<T, E = IdxError> = std::result::Result<T, E>;

/// Magic word and dimensions of an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: [u8; 4],
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn rank(&self) -> u8 {
        self.magic[3]
    }

    pub fn header_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.magic.to_vec();
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out
    }
}

fn need(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    bytes
        .get(offset..offset.saturating_add(len))
        .filter(|s| s.len() == len)
        .ok_or(IdxError::Truncated {
            offset,
            needed: len,
            available: bytes.len().saturating_sub(offset),
        })
}

/// Parses the header, checking type byte and rank.
pub fn parse_header(bytes: &[u8], expected_rank: u8) -> Result<IdxHeader> {
    let m = need(bytes, 0, 4)?;
    let magic = [m[0], m[1], m[2], m[3]];
    if magic[0] != 0 || magic[1] != 0 {
        return Err(IdxError::BadMagic { found: magic });
    }
    if magic[2] != UNSIGNED_BYTE {
        return Err(IdxError::DataType { found: magic[2] });
    }
    if magic[3] != expected_rank {
        return Err(IdxError::Rank {
            expected: expected_rank,
            found: magic[3],
        });
    }
    let mut dims = Vec::with_capacity(expected_rank as usize);
    for index in 0..expected_rank as usize {
        let offset = 4 + 4 * index;
        let d = need(bytes, offset, 4)?;
        dims.push(u32::from_be_bytes([d[0], d[1], d[2], d[3]]));
    }
    Ok(IdxHeader { magic, dims })
}

/// Checks the payload against the header and returns it.
fn payload<'a>(bytes: &'a [u8], header: &IdxHeader) -> Result<&'a [u8]> {
    let offset = header.header_len();
    let len = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or(IdxError::Overflow { offset })?;
    let data = need(bytes, offset, len)?;
    let end = offset + len;
    if bytes.len() > end {
        return Err(IdxError::TrailingBytes {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    Ok(data)
}

/// Decodes an image file held in memory. Bytes map to `b / 255`.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Vec<Image<T>>> {
    let header = parse_header(bytes, 3)?;
    let (rows, cols) = (header.dims[1] as usize, header.dims[2] as usize);
    for (index, &d) in header.dims.iter().enumerate().skip(1) {
        if d == 0 {
            return Err(IdxError::ZeroDimension {
                offset: 4 + 4 * index,
                index,
            });
        }
    }
    let data = payload(bytes, &header)?;
    let lut: Vec<T> = (0..=255u32).map(|b| T::of(b as f64 / 255.0)).collect();
    Ok(data
        .chunks_exact(rows * cols)
        .map(|c| Image::new(rows, cols, c.iter().map(|&b| lut[b as usize]).collect()))
        .collect())
}

/// Decodes a label file held in memory; every label must be `< classes`.
pub fn parse_idx_labels(bytes: &[u8], classes: usize) -> Result<LabelVector> {
    let header = parse_header(bytes, 1)?;
    let data = payload(bytes, &header)?;
    let start = header.header_len();
    if let Some((i, &value)) = data.iter().enumerate().find(|(_, &b)| b as usize >= classes) {
        return Err(IdxError::LabelOutOfRange {
            offset: start + i,
            value,
            classes,
        });
    }
    Ok(LabelVector::new(data.iter().map(|&b| b as usize).collect(), classes).expect("labels range-checked"))
}

/// Reads a file, inflating it first if it is gzip-compressed.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(IdxError::Gzip)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_idx_images<T: Scalar>(path: &Path) -> Result<Vec<Image<T>>> {
    parse_idx_images(&read_bytes(path)?)
}

pub fn read_idx_labels(path: &Path, classes: usize) -> Result<LabelVector> {
    parse_idx_labels(&read_bytes(path)?, classes)
}

/// Reads an image/label file pair into a dataset.
pub fn read_dataset<T: Scalar>(
    images: &Path,
    labels: &Path,
    name: impl Into<String>,
    split: Split,
    classes: usize,
) -> Result<LabeledDataset<T>> {
    let imgs = read_idx_images(images)?;
    let labs = read_idx_labels(labels, classes)?;
    if imgs.len() != labs.len() {
        return Err(IdxError::CountMismatch {
            images: imgs.len(),
            labels: labs.len(),
        });
    }
    Ok(LabeledDataset::new(name, split, imgs, labs))
}

/// Nearest byte, halves rounded up; input clamped to `[0, 1]` first.
pub fn quantize<T: Scalar>(p: T) -> u8 {
    let v = p.widen().clamp(0.0, 1.0);
    (v * 255.0 + 0.5).floor() as u8
}

/// Encodes images (all the same size) as an IDX image file.
pub fn encode_images<T: Scalar>(images: &[Image<T>]) -> Result<Vec<u8>> {
    let first = images.first().ok_or(IdxError::EmptyDataset)?;
    let (rows, cols) = (first.height(), first.width());
    let count = u32::try_from(images.len()).map_err(|_| IdxError::TooLarge(images.len()))?;
    let header = IdxHeader {
        magic: IMAGE_MAGIC.to_be_bytes(),
        dims: vec![count, rows as u32, cols as u32],
    };
    let mut out = header.to_bytes();
    out.reserve(images.len() * rows * cols);
    for (i, img) in images.iter().enumerate() {
        if img.height() != rows || img.width() != cols {
            return Err(IdxError::RaggedImages(format!(
                "image {i} is {}x{}, expected {rows}x{cols}",
                img.height(),
                img.width()
            )));
        }
        out.extend(img.pixels().iter().map(|&p| quantize(p)));
    }
    Ok(out)
}

pub fn encode_labels(labels: &LabelVector) -> Result<Vec<u8>> {
    if labels.is_empty() {
        return Err(IdxError::EmptyDataset);
    }
    let count = u32::try_from(labels.len()).map_err(|_| IdxError::TooLarge(labels.len()))?;
    let header = IdxHeader {
        magic: LABEL_MAGIC.to_be_bytes(),
        dims: vec![count],
    };
    let mut out = header.to_bytes();
    out.extend(labels.as_slice().iter().map(|&l| l as u8));
    Ok(out)
}

/// `<dir>/<name>-<split>-images.idx` and the matching labels path.
pub fn dataset_paths(dir: &Path, name: &str, split: Split) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}-{split}-images.idx")),
        dir.join(format!("{name}-{split}-labels.idx")),
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a dataset as an image/label IDX pair under `dir`, returning the two
/// paths.
pub fn write_idx<T: Scalar>(dataset: &LabeledDataset<T>, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if dataset.is_empty() {
        return Err(IdxError::EmptyDataset);
    }
    let images = encode_images(dataset.images())?;
    let labels = encode_labels(dataset.labels())?;
    fs::create_dir_all(dir).map_err(|source| IdxError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let (ip, lp) = dataset_paths(dir, &dataset.name, dataset.split);
    write_file(&ip, &images)?;
    write_file(&lp, &labels)?;
    Ok((ip, lp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [count, rows, cols] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        b
    }

    #[test]
    fn header_fields_are_big_endian() {
        let bytes = image_file(2, 28, 28, 0);
        let h = parse_header(&bytes, 3).unwrap();
        assert_eq!(h.dims, vec![2, 28, 28]);
        assert_eq!(u32::from_be_bytes(h.magic), IMAGE_MAGIC);
        assert_eq!(h.to_bytes(), bytes[..16]);
    }

    #[test]
    fn pixel_endpoints() {
        let mut bytes = image_file(1, 2, 2, 0);
        bytes[16] = 255;
        let imgs = parse_idx_images::<f64>(&bytes).unwrap();
        assert_eq!(imgs[0].pixels(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut bytes = image_file(3, 4, 4, 9);
        bytes.pop();
        match parse_idx_images::<f64>(&bytes).unwrap_err() {
            IdxError::Truncated {
                offset,
                needed,
                available,
            } => {
                assert_eq!((offset, needed, available), (16, 48, 47));
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(
            parse_idx_images::<f64>(&bytes[..10]),
            Err(IdxError::Truncated { offset: 8, .. })
        ));
    }

    #[test]
    fn header_errors() {
        let mut bytes = image_file(1, 2, 2, 0);
        bytes[0] = 1;
        assert!(matches!(
            parse_idx_images::<f64>(&bytes),
            Err(IdxError::BadMagic { .. })
        ));
        let mut bytes = image_file(1, 2, 2, 0);
        bytes[2] = 0x0d;
        assert!(matches!(
            parse_idx_images::<f64>(&bytes),
            Err(IdxError::DataType { found: 0x0d })
        ));
        let bytes = image_file(1, 2, 2, 0);
        assert!(matches!(
            parse_idx_labels(&bytes, 10),
            Err(IdxError::Rank { expected: 1, found: 3 })
        ));
        let bytes = image_file(1, 0, 2, 0);
        assert!(matches!(
            parse_idx_images::<f64>(&bytes),
            Err(IdxError::ZeroDimension { index: 1, .. })
        ));
        let mut bytes = image_file(1, 2, 2, 0);
        bytes.push(0);
        assert!(matches!(
            parse_idx_images::<f64>(&bytes),
            Err(IdxError::TrailingBytes { offset: 20, extra: 1 })
        ));
    }

    #[test]
    fn labels_parse_and_range_check() {
        let mut b = vec![0, 0, 8, 1];
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[9, 0, 4]);
        let labels = parse_idx_labels(&b, 10).unwrap();
        assert_eq!(labels.as_slice(), &[9, 0, 4]);
        b[9] = 10;
        assert!(matches!(
            parse_idx_labels(&b, 10),
            Err(IdxError::LabelOutOfRange {
                offset: 9,
                value: 10,
                classes: 10
            })
        ));
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.5f64), 128);
        assert_eq!(quantize(0.0f64), 0);
        assert_eq!(quantize(1.0f64), 255);
        assert_eq!(quantize(1.0f64 / 255.0), 1);
        assert_eq!(quantize(1.5f64 / 255.0), 2);
        assert_eq!(quantize(-0.2f64), 0);
        let bytes = {
            let mut b = image_file(1, 1, 1, 0);
            b[16] = quantize(0.5f64);
            b
        };
        assert_eq!(parse_idx_images::<f64>(&bytes).unwrap()[0].pixels()[0], 128.0 / 255.0);
    }

    #[test]
    fn empty_dataset_is_not_written() {
        let d = LabeledDataset::<f64>::new("E-D0", Split::Test, vec![], LabelVector::new(vec![], 10).unwrap());
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_idx(&d, dir.path()), Err(IdxError::EmptyDataset)));
    }

    #[test]
    fn gzip_files_are_inflated() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let raw = image_file(2, 3, 3, 51);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&raw).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gz");
        fs::write(&path, enc.finish().unwrap()).unwrap();
        let imgs = read_idx_images::<f64>(&path).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[1].get(2, 2), 0.2);
    }
}
