//! IDX ubyte files: a big-endian magic (`0x00000803` for `[N, H, W]` images,
//! `0x00000801` for labels), big-endian u32 dimensions, then raw bytes.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, IdxError, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            found: bytes.len(),
        })
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> std::result::Result<Vec<usize>, IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(IdxError::BadMagic { found, expected: magic });
    }
    let dims: Vec<usize> = (0..dims)
        .map(|d| read_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<std::result::Result<_, _>>()?;
    let needed = 4 + 4 * dims.len() + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    Ok(dims)
}

/// Parses an image file and a label file already read into memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let d = header(images, IMAGES_MAGIC, 3)?;
    let l = header(labels, LABELS_MAGIC, 1)?;
    if d[0] != l[0] {
        return Err(IdxError::CountMismatch {
            images: d[0],
            labels: l[0],
        }
        .into());
    }
    let (n, h, w) = (d[0], d[1], d[2]);
    let pixels = images[16..16 + n * h * w].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], pixels)?,
        labels: labels[8..8 + n].iter().map(|&b| b as usize).collect(),
    })
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    parse_idx(&read(images_path.as_ref())?, &read(labels_path.as_ref())?)
}

/// Serialises a single-channel dataset; pixels are rounded to 1/255 steps.
pub fn encode_idx(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let s = data.images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("write_idx", format!("IDX stores [N, 1, H, W] images, got {s:?}")));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l > 255) {
        return Err(Error::shape("write_idx", format!("label {l} does not fit a byte")));
    }
    let mut images = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [s[0], s[2], s[3]] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(data.images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut labels = LABELS_MAGIC.to_be_bytes().to_vec();
    labels.extend_from_slice(&(data.labels.len() as u32).to_be_bytes());
    labels.extend(data.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(data: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = encode_idx(data)?;
    crate::io::write_atomic(images_path.as_ref(), &images)?;
    crate::io::write_atomic(labels_path.as_ref(), &labels)
}
