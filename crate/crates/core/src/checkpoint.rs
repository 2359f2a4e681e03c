//! Binary checkpoint: `PEPG`, version, config echo, named little-endian
//! `f32` tensors, SHA-256 of everything before it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scene::{Anchor, Vec3, FEATURE_DIM};
use crate::tensor::Parameters;

pub const MAGIC: &[u8; 4] = b"PEPG";
pub const VERSION: u32 = 1;
pub const POSITION_TENSOR: &str = "anchor.position";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved configuration in `key = value` form.
    pub config: String,
    pub tensors: Vec<NamedBlob>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint("unexpected end of data".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid UTF-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &TrainConfig) -> Self {
        let mut tensors = vec![NamedBlob {
            name: POSITION_TENSOR.into(),
            shape: vec![model.anchor_count(), 3],
            data: model.positions.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        }];
        model.visit("", &mut |name, t| {
            tensors.push(NamedBlob {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| *v as f32).collect(),
            })
        });
        Self {
            config: config.echo(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_u32(&mut out, self.config.len());
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_u32(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for d in &t.shape {
                put_u32(&mut out, *d);
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(Error::CorruptCheckpoint("missing PEPG header".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedBlob { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_text(&self.config)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.name != POSITION_TENSOR).map(|t| t.data.len()).sum()
    }

    /// Rebuilds the model; names and shapes must match the configured
    /// architecture exactly.
    pub fn to_model(&self) -> Result<Model> {
        let cfg = self.train_config()?;
        let pos = self
            .tensors
            .iter()
            .find(|t| t.name == POSITION_TENSOR)
            .ok_or_else(|| Error::CorruptCheckpoint("missing anchor positions".into()))?;
        if pos.shape.len() != 2 || pos.shape[1] != 3 {
            return Err(Error::CorruptCheckpoint("malformed anchor positions".into()));
        }
        let anchors: Vec<Anchor> = pos
            .data
            .chunks_exact(3)
            .map(|p| Anchor {
                position: Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64),
                feature: vec![0.0; FEATURE_DIM],
                scale: Vec3::repeat(1.0),
                offsets: vec![Vec3::zeros(); cfg.k],
            })
            .collect();
        let mut model = Model::new(&anchors, cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let blobs: Vec<&NamedBlob> = self.tensors.iter().filter(|t| t.name != POSITION_TENSOR).collect();
        let mut i = 0;
        let mut err = None;
        model.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match blobs.get(i) {
                Some(b) if b.name == name && b.shape == t.shape() => {
                    for (d, s) in t.data_mut().iter_mut().zip(&b.data) {
                        *d = *s as f64;
                    }
                }
                _ => err = Some(Error::CorruptCheckpoint(format!("tensor `{name}` missing or misshapen"))),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != blobs.len() {
            return Err(Error::CorruptCheckpoint("unexpected extra tensors".into()));
        }
        Ok(model)
    }
}
