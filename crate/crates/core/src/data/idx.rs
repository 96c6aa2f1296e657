//! Reader and writer for unsigned-byte IDX files (the classic digit
//! dataset container).

use std::path::Path;

use thiserror::Error;

use super::{DomainDataset, DomainTag};
use crate::error::{Error as CrateError, Result};
use crate::objectives::OneHotLabels;
use crate::tensor::Tensor;

pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("unsupported magic 0x{found:08x} at offset 0 (expected 0x{LABEL_MAGIC:08x} or 0x{IMAGE_MAGIC:08x})")]
    UnsupportedMagic { found: u32 },
    #[error("truncated at offset {offset}: expected {expected}, {available} bytes available")]
    Truncated {
        offset: usize,
        expected: String,
        available: usize,
    },
    #[error("{extra} trailing bytes at offset {offset}: expected end of file")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("zero-sized dimension {axis} in header at offset {offset}")]
    EmptyDimension { axis: usize, offset: usize },
}

/// Parsed contents of an IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// Raw class labels.
    Labels(Vec<u8>),
    /// `count × rows × cols`, scaled to `[0, 1]` by `/255`.
    Images(Tensor<f32>),
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| IdxError::Truncated {
            offset,
            expected: format!("4-byte {what}"),
            available: bytes.len().saturating_sub(offset),
        })
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, IdxError> {
    let magic = read_u32(bytes, 0, "magic")?;
    let rank = match magic {
        LABEL_MAGIC => 1,
        IMAGE_MAGIC => 3,
        found => return Err(IdxError::UnsupportedMagic { found }),
    };
    let mut dims = Vec::with_capacity(rank);
    for axis in 0..rank {
        let offset = 4 + 4 * axis;
        let d = read_u32(bytes, offset, &format!("length of dimension {axis}"))? as usize;
        if d == 0 {
            return Err(IdxError::EmptyDimension { axis, offset });
        }
        dims.push(d);
    }
    let start = 4 + 4 * rank;
    let count: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() < count {
        return Err(IdxError::Truncated {
            offset: start + payload.len(),
            expected: format!("{count} payload bytes from offset {start}"),
            available: payload.len(),
        });
    }
    if payload.len() > count {
        return Err(IdxError::TrailingBytes {
            offset: start + count,
            extra: payload.len() - count,
        });
    }
    Ok(match rank {
        1 => IdxData::Labels(payload.to_vec()),
        _ => IdxData::Images(
            Tensor::new(dims, payload.iter().map(|&b| b as f32 / 255.0).collect()).expect("checked dims"),
        ),
    })
}

fn header(magic: u32, dims: &[usize]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = header(LABEL_MAGIC, &[labels.len()]);
    out.extend_from_slice(labels);
    out
}

/// Inverse of the image branch of [`parse_idx`]: values are mapped back
/// to bytes by `round(v · 255)`.
pub fn write_idx_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    if images.dims().len() != 3 {
        return Err(CrateError::contract(format!("IDX images must be rank-3, got {}", images.shape())));
    }
    let mut out = header(IMAGE_MAGIC, images.dims());
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CrateError::io(path, e))
}

/// Loads an image file and its label file as a grayscale dataset. Labels
/// must be below `num_classes`.
pub fn load_idx_dataset(images: &Path, labels: &Path, num_classes: usize) -> Result<DomainDataset> {
    let IdxData::Images(img) = parse_idx(&read(images)?)? else {
        return Err(CrateError::contract(format!("{} is not an IDX image file", images.display())));
    };
    let IdxData::Labels(lab) = parse_idx(&read(labels)?)? else {
        return Err(CrateError::contract(format!("{} is not an IDX label file", labels.display())));
    };
    let &[n, h, w] = img.dims() else { unreachable!("rank-3 images") };
    let onehot = OneHotLabels::from_indices(lab.iter().map(|&b| b as usize).collect(), num_classes)?;
    DomainDataset::new(
        img.reshape(vec![n, h, w, 1])?,
        Some(onehot),
        DomainTag::Source,
        format!("idx({})", images.display()),
    )
}
