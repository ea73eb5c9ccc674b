//! Checkpoint directory: `manifest.json`, `params.bin`, `vocab.json`.
//!
//! `params.bin` layout, all little-endian: the 8-byte magic, a u32 tensor
//! count, then per tensor a u32 name length, the UTF-8 name, a u8 kind, a u32
//! rank, u32 dimensions, and the values as f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::encoder::{Encoder, InputDims, ModelConfig};
use crate::error::{Error, Result};
use crate::objectives::{Head, HeadConfig, Metric, HEAD_WEIGHT};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::Tokenizer;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PRSNPRM1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    Velocity,
}

impl TensorKind {
    fn code(self) -> u8 {
        match self {
            TensorKind::Param => 0,
            TensorKind::Buffer => 1,
            TensorKind::Velocity => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(TensorKind::Param),
            1 => Ok(TensorKind::Buffer),
            2 => Ok(TensorKind::Velocity),
            _ => Err(Error::Checkpoint(format!("unknown tensor kind {c}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub model: ModelConfig,
    pub dims: InputDims,
    pub head: HeadConfig,
    pub classes: usize,
    pub train: TrainConfig,
    pub iteration: usize,
    /// Similarity evaluation should use unless told otherwise.
    pub metric: Metric,
    pub vocab_sha256: String,
    /// Architecture choices not captured by the configs.
    pub notes: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder<T>,
    pub head: Head<T>,
    pub velocity: BTreeMap<String, Tensor<T>>,
}

fn default_notes(model: &ModelConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        (
            "layer_norm".into(),
            "pre-norm residual blocks, no affine".into(),
        ),
        ("feed_forward_width".into(), model.d_hidden.to_string()),
        (
            "head_init".into(),
            "glorot uniform, rows normalized per forward under am".into(),
        ),
        ("momentum".into(), "classic: v = mu*v + g; p -= lr*v".into()),
    ])
}

fn entries<T: Scalar>(
    encoder: &Encoder<T>,
    head: &Head<T>,
    velocity: &BTreeMap<String, Tensor<T>>,
) -> Vec<(TensorEntry, Tensor<T>)> {
    let store = |s: &ParamStore<T>| -> Vec<(TensorEntry, Tensor<T>)> {
        s.iter()
            .map(|p| {
                let kind = if p.trainable {
                    TensorKind::Param
                } else {
                    TensorKind::Buffer
                };
                (
                    TensorEntry {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                        kind,
                    },
                    p.value.clone(),
                )
            })
            .collect()
    };
    let mut out = store(&encoder.params);
    out.extend(store(&head.params));
    out.extend(velocity.iter().map(|(n, t)| {
        (
            TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                kind: TensorKind::Velocity,
            },
            t.clone(),
        )
    }));
    out
}

fn encode_blob<T: Scalar>(tensors: &[(TensorEntry, Tensor<T>)]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (e, t) in tensors {
        b.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        b.extend_from_slice(e.name.as_bytes());
        b.push(e.kind.code());
        b.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            b.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "{PARAMS_FILE} truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_blob<T: Scalar>(buf: &[u8]) -> Result<Vec<(TensorEntry, Tensor<T>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{PARAMS_FILE} has a bad magic number"
        )));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let kind = TensorKind::from_code(r.take(1)?[0])?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        out.push((
            TensorEntry {
                name,
                shape: shape.clone(),
                kind,
            },
            Tensor::new(shape, data)?,
        ));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes in {PARAMS_FILE}",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(
        tokenizer: Tokenizer,
        encoder: Encoder<T>,
        head: Head<T>,
        velocity: BTreeMap<String, Tensor<T>>,
        train: TrainConfig,
        iteration: usize,
    ) -> Self {
        let tensors = entries(&encoder, &head, &velocity)
            .into_iter()
            .map(|(e, _)| e)
            .collect();
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            model: encoder.config.clone(),
            dims: encoder.dims,
            head: head.config.clone(),
            classes: head.classes(),
            train,
            iteration,
            metric: head.config.loss.metric(),
            vocab_sha256: tokenizer.hash(),
            notes: default_notes(&encoder.config),
            tensors,
        };
        Self {
            manifest,
            tokenizer,
            encoder,
            head,
            velocity,
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = encode_blob(&entries(&self.encoder, &self.head, &self.velocity));
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        for (name, bytes) in [
            (VOCAB_FILE, self.tokenizer.to_json().into_bytes()),
            (PARAMS_FILE, blob),
            (MANIFEST_FILE, manifest.into_bytes()),
        ] {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Loads and cross-checks all three files; nothing is returned unless
    /// every check passes.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?)
            .map_err(|e| Error::Checkpoint(format!("{MANIFEST_FILE}: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported",
                manifest.format_version
            )));
        }
        let vocab =
            String::from_utf8(read(VOCAB_FILE)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tokenizer = Tokenizer::from_json(&vocab)?;
        if tokenizer.hash() != manifest.vocab_sha256 {
            return Err(Error::Checkpoint(
                "vocabulary hash does not match the manifest".into(),
            ));
        }
        if crate::encoder::InputDims::of(&tokenizer) != manifest.dims {
            return Err(Error::Checkpoint(
                "vocabulary sizes do not match the manifest".into(),
            ));
        }
        let tensors = decode_blob::<T>(&read(PARAMS_FILE)?)?;
        if tensors.iter().map(|(e, _)| e).ne(manifest.tensors.iter()) {
            return Err(Error::Checkpoint(
                "tensor list differs from the manifest".into(),
            ));
        }
        let mut enc = ParamStore::new();
        let mut head_w = None;
        let mut velocity = BTreeMap::new();
        for (e, t) in tensors {
            match e.kind {
                TensorKind::Velocity => {
                    velocity.insert(e.name, t);
                }
                TensorKind::Param if e.name == HEAD_WEIGHT => head_w = Some(t),
                kind => enc.insert(e.name, t, kind == TensorKind::Param),
            }
        }
        let encoder = Encoder::from_params(manifest.model.clone(), manifest.dims, enc)?;
        let head_w = head_w.ok_or_else(|| Error::Checkpoint("missing head weight".into()))?;
        if head_w.shape() != [manifest.classes, manifest.model.d_out] {
            return Err(Error::Checkpoint(format!(
                "head weight shape {:?}",
                head_w.shape()
            )));
        }
        let head = Head::from_weight(manifest.head.clone(), head_w)?;
        for (name, v) in &velocity {
            let expect = encoder
                .params
                .get(name)
                .or_else(|_| head.params.get(name))?;
            if expect.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "velocity {name} shape {:?}",
                    v.shape()
                )));
            }
        }
        Ok(Self {
            manifest,
            tokenizer,
            encoder,
            head,
            velocity,
        })
    }
}
