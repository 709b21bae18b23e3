//! Binary weight files.
//!
//! Layout (little endian): magic `GBHW`, `u32` version, `u32` tensor count,
//! then per tensor: `u16` name length, UTF-8 name, `u8` dtype (0 = f32),
//! `u8` rank, `u32` per dimension, payload; finally a `u32` CRC-32 of every
//! preceding byte.
//!
//! Every file starts with `meta.variant` (`[arch, depth, width, input, classes]`)
//! and `meta.anchors` (`[heads, 3, 2]`), followed by the model's parameters and
//! buffers in registration order, followed by optional `train.*` tensors
//! (optimizer state, epoch counter). A file is parsed and validated in full
//! before any model is constructed, so a failed load never yields a partially
//! initialised model.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::graph::Model;
use super::variant::{Architecture, HeadAnchors, ModelVariant, ANCHORS_PER_HEAD};
use crate::error::{CheckpointError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GBHW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const META_VARIANT: &str = "meta.variant";
const META_ANCHORS: &str = "meta.anchors";
/// Prefix of auxiliary tensors stored alongside the model.
pub const TRAIN_PREFIX: &str = "train.";

/// A loaded model plus any `train.*` tensors that were stored with it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub extra: Vec<(String, Tensor<f32>)>,
}

fn variant_tensor(v: &ModelVariant) -> Tensor<f32> {
    let data = vec![
        v.arch.code() as f32,
        v.depth_multiple as f32,
        v.width_multiple as f32,
        v.input_size as f32,
        v.num_classes as f32,
    ];
    Tensor::new(&[5], data).expect("five meta values")
}

fn anchors_tensor(v: &ModelVariant) -> Tensor<f32> {
    let data: Vec<f32> = v.anchors.iter().flatten().flatten().copied().collect();
    Tensor::new(&[v.anchors.len(), ANCHORS_PER_HEAD, 2], data).expect("anchor layout")
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

/// Serialise `model` and optional `train.*` tensors.
pub fn to_bytes(model: &Model, extra: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    if let Some((name, _)) = extra.iter().find(|(n, _)| !n.starts_with(TRAIN_PREFIX)) {
        return Err(CheckpointError::UnknownTensor(name.clone()).into());
    }
    let variant = variant_tensor(&model.variant);
    let anchors = anchors_tensor(&model.variant);
    let mut tensors: Vec<(&str, &Tensor<f32>)> = vec![(META_VARIANT, &variant), (META_ANCHORS, &anchors)];
    tensors.extend(model.store.named_tensors());
    tensors.extend(extra.iter().map(|(n, t)| (n.as_str(), t)));
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        write_tensor(&mut out, name, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    save_with(model, &[], path)
}

pub fn save_with(model: &Model, extra: &[(String, Tensor<f32>)], path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, extra)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated { what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decode every tensor of a weight file without interpreting names.
pub fn parse(file: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let body_len = file.len().saturating_sub(4);
    let buf = &file[..body_len];
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::Magic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Utf8)?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Dtype(dtype));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or(CheckpointError::Truncated { what: "payload" })?;
        let data: Vec<f32> = r
            .take(bytes, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|_| CheckpointError::Truncated { what: "payload" })?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Trailing);
    }
    // the structure is intact; the checksum catches corrupted payload bytes
    let stored = file
        .get(body_len..)
        .and_then(|c| <[u8; 4]>::try_from(c).ok())
        .map(u32::from_le_bytes)
        .ok_or(CheckpointError::Truncated { what: "checksum" })?;
    let computed = crc32fast::hash(buf);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok(tensors)
}

fn variant_from_meta(meta: &Tensor<f32>, anchors: &Tensor<f32>) -> Result<ModelVariant, CheckpointError> {
    let shape_err = |name: &str, expected: Vec<usize>, found: &[usize]| CheckpointError::TensorShape {
        name: name.to_string(),
        expected,
        found: found.to_vec(),
    };
    if meta.shape() != [5] {
        return Err(shape_err(META_VARIANT, vec![5], meta.shape()));
    }
    let m = meta.data();
    let arch = Architecture::from_code(m[0] as u8)
        .filter(|a| a.code() as f32 == m[0])
        .ok_or_else(|| CheckpointError::UnknownTensor(format!("{META_VARIANT} (architecture code {})", m[0])))?;
    let heads = arch.head_strides().len();
    if anchors.shape() != [heads, ANCHORS_PER_HEAD, 2] {
        return Err(shape_err(META_ANCHORS, vec![heads, ANCHORS_PER_HEAD, 2], anchors.shape()));
    }
    let anchors: Vec<HeadAnchors> = anchors
        .data()
        .chunks_exact(2 * ANCHORS_PER_HEAD)
        .map(|c| [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]]])
        .collect();
    Ok(ModelVariant {
        arch,
        depth_multiple: m[1] as f64,
        width_multiple: m[2] as f64,
        input_size: m[3] as usize,
        num_classes: m[4] as usize,
        anchors,
    })
}

fn same_variant(a: &ModelVariant, b: &ModelVariant) -> bool {
    a.arch == b.arch
        && a.depth_multiple as f32 == b.depth_multiple as f32
        && a.width_multiple as f32 == b.width_multiple as f32
        && a.num_classes == b.num_classes
}

fn describe(v: &ModelVariant) -> String {
    format!(
        "{} (depth {:.3}, width {:.3}, {} classes)",
        v.arch, v.depth_multiple, v.width_multiple, v.num_classes
    )
}

/// Rebuild a model from serialised bytes. With `expected`, the stored
/// architecture, multiples and class count must match it.
pub fn from_bytes(buf: &[u8], expected: Option<&ModelVariant>) -> Result<Checkpoint> {
    let tensors = parse(buf)?;
    let mut it = tensors.into_iter();
    let (meta, anchors) = match (it.next(), it.next()) {
        (Some((n1, t1)), Some((n2, t2))) if n1 == META_VARIANT && n2 == META_ANCHORS => (t1, t2),
        _ => return Err(CheckpointError::Missing(META_VARIANT.to_string()).into()),
    };
    let variant = variant_from_meta(&meta, &anchors)?;
    if let Some(exp) = expected {
        if !same_variant(exp, &variant) {
            return Err(CheckpointError::Variant {
                expected: describe(exp),
                found: describe(&variant),
            }
            .into());
        }
    }
    // Validate every name and shape against a freshly built skeleton before
    // copying anything into it.
    let mut model = Model::new(variant, 0)?;
    let mut wanted: HashMap<String, Vec<usize>> = model
        .store
        .named_tensors()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let mut weights = Vec::new();
    let mut extra = Vec::new();
    for (name, t) in it {
        if name.starts_with(TRAIN_PREFIX) {
            extra.push((name, t));
            continue;
        }
        let expected = wanted
            .remove(&name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
        if t.shape() != expected.as_slice() {
            return Err(CheckpointError::TensorShape {
                name,
                expected,
                found: t.shape().to_vec(),
            }
            .into());
        }
        weights.push((name, t));
    }
    if let Some(missing) = model
        .store
        .named_tensors()
        .map(|(n, _)| n)
        .find(|n| wanted.contains_key(*n))
    {
        return Err(CheckpointError::Missing(missing.to_string()).into());
    }
    for (name, t) in weights {
        *model.store.tensor_by_name_mut(&name).expect("validated name") = t;
    }
    Ok(Checkpoint { model, extra })
}

pub fn load(path: &Path, expected: Option<&ModelVariant>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?, expected)
}
