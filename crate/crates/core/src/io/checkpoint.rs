//! Binary checkpoints.
//!
//! Layout (little-endian): magic `TPCK`, u32 version, u32 length + UTF-8
//! TOML architecture, u32 tensor count, then per tensor: u16 name length +
//! UTF-8 name, u8 rank, u64 per dimension, f64 data. Besides parameters a
//! checkpoint may hold `<param>.mask` tensors and `<layer>.filter_index`
//! tensors (`[pairs, 2]` rows of `(out, in)`) for filter-compacted layers.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Architecture, Model};
use crate::ops::FilterLayout;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TPCK";
pub const VERSION: u32 = 1;

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let arch = toml::to_string(model.architecture()).expect("architecture serialises");
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for conv in model.convs() {
        if let Some(layout) = &conv.layout {
            let pairs = layout.pair_list();
            let data = pairs.iter().flat_map(|&(o, i)| [o as f64, i as f64]).collect();
            tensors.push((format!("{}.filter_index", conv.id), vec![pairs.len(), 2], data));
        }
    }
    for p in model.params() {
        tensors.push((p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()));
        if let Some(mask) = &p.mask {
            tensors.push((format!("{}.mask", p.name), p.value.shape().to_vec(), mask.clone()));
        }
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        push_tensor(&mut out, name, shape, data);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, CheckpointError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

type RawTensors = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn read_tensors(r: &mut Reader<'_>) -> std::result::Result<RawTensors, CheckpointError> {
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for k in 0..count {
        let len = r.u16(&format!("name of tensor {k}"))? as usize;
        let name = String::from_utf8_lossy(r.take(len, &format!("name of tensor {k}"))?).into_owned();
        let rank = r.u8(&format!("tensor `{name}`"))? as usize;
        let shape = (0..rank)
            .map(|_| r.u64(&format!("tensor `{name}`")).map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel.saturating_mul(8), &format!("tensor `{name}`"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.insert(name, (shape, data));
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.try_into().expect("4 bytes")).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let len = r.u32("architecture length")? as usize;
    let text = std::str::from_utf8(r.take(len, "architecture")?)
        .map_err(|e| CheckpointError::BadArchitecture(e.to_string()))?;
    let arch: Architecture = toml::from_str(text).map_err(|e| CheckpointError::BadArchitecture(e.to_string()))?;
    let mut model = Model::skeleton(&arch).map_err(|e| CheckpointError::BadArchitecture(e.to_string()))?;
    let mut tensors = read_tensors(&mut r)?;

    for conv in model.convs_mut() {
        let Some((shape, data)) = tensors.remove(&format!("{}.filter_index", conv.id)) else { continue };
        let bad = || CheckpointError::DimMismatch {
            name: format!("{}.filter_index", conv.id),
            found: shape.clone(),
            expected: vec![0, 2],
        };
        if shape.len() != 2 || shape[1] != 2 {
            return Err(bad().into());
        }
        let pairs: Vec<(usize, usize)> = data.chunks(2).map(|p| (p[0] as usize, p[1] as usize)).collect();
        let g = conv.geometry;
        let layout = FilterLayout::from_pairs(g.out_channels, g.in_channels, &pairs).map_err(|_| bad())?;
        conv.weight.value = Tensor::zeros(&[layout.pairs(), g.kernel, g.kernel]);
        conv.layout = Some(Arc::new(layout));
    }

    let expected = model.params().len();
    let mut found = 0;
    for p in model.params_mut() {
        let Some((shape, data)) = tensors.remove(&p.name) else { continue };
        if shape != p.value.shape() {
            return Err(CheckpointError::DimMismatch {
                name: p.name.clone(),
                found: shape,
                expected: p.value.shape().to_vec(),
            }
            .into());
        }
        p.value = Tensor::new(shape, data)?;
        found += 1;
        if let Some((shape, mask)) = tensors.remove(&format!("{}.mask", p.name)) {
            if shape != p.value.shape() {
                return Err(CheckpointError::DimMismatch {
                    name: format!("{}.mask", p.name),
                    found: shape,
                    expected: p.value.shape().to_vec(),
                }
                .into());
            }
            p.mask = Some(mask);
        }
    }
    if found != expected {
        return Err(CheckpointError::ParamCount { found, expected }.into());
    }
    if let Some(name) = tensors.into_keys().next() {
        return Err(CheckpointError::UnknownTensor(name).into());
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    super::write_atomic(path.as_ref(), &encode_checkpoint(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
