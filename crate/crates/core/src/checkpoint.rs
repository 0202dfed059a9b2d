//! Single-file checkpoint container.
//!
//! ```text
//! "TSDCKPT\0"  u32 version  u64 header_len  header (JSON)
//! u64 n_blobs, then per blob:
//!   u8 kind  u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 data[..]
//! 32-byte SHA-256 of everything before it
//! ```
//!
//! All integers and floats are little endian; tensors round-trip bitwise.

use crate::error::{Error, Result};
use crate::features::MelConfig;
use crate::model::{EnhancementConfig, ModelConfig, TsdModel};
use crate::params::{Adam, ParamStore, INIT_SCHEME};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TSDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Last completed epoch (0-based).
    pub epoch: usize,
    /// SHA-256 of the resolved run configuration.
    pub config_hash: String,
    pub init_scheme: String,
    pub features: MelConfig,
    pub enhancement: EnhancementConfig,
    /// Whether any training step ran with the enhanced embedding.
    pub ee_trained: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    model: ModelConfig,
    adam: AdamHeader,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TsdModel,
    pub optimizer: Adam,
    pub meta: CheckpointMeta,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Param = 0,
    Buffer = 1,
    AdamM = 2,
    AdamV = 3,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Kind::Param,
            1 => Kind::Buffer,
            2 => Kind::AdamM,
            3 => Kind::AdamV,
            _ => return Err(Error::Checkpoint(format!("unknown blob kind {v}"))),
        })
    }
}

fn put_blob(out: &mut Vec<u8>, kind: Kind, name: &str, t: &Tensor) {
    out.push(kind as u8);
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn new(model: TsdModel, optimizer: Adam, epoch: usize, config_hash: String, features: MelConfig, enhancement: EnhancementConfig, ee_trained: bool) -> Self {
        Self {
            model,
            optimizer,
            meta: CheckpointMeta {
                epoch,
                config_hash,
                init_scheme: INIT_SCHEME.to_string(),
                features,
                enhancement,
                ee_trained,
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            model: self.model.config.clone(),
            adam: AdamHeader {
                lr: self.optimizer.lr,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
                step: self.optimizer.step,
            },
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);

        let p = &self.model.params;
        let n = p.params().count() + p.buffers().count() + 2 * self.optimizer.moments().count();
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for (name, t) in p.params() {
            put_blob(&mut out, Kind::Param, name, t);
        }
        for (name, t) in p.buffers() {
            put_blob(&mut out, Kind::Buffer, name, t);
        }
        for (name, m, v) in self.optimizer.moments() {
            put_blob(&mut out, Kind::AdamM, name, m);
            put_blob(&mut out, Kind::AdamV, name, v);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = r.len()?;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        header.model.validate()?;

        let mut store = ParamStore::new();
        let mut opt = Adam::new(header.adam.lr);
        opt.beta1 = header.adam.beta1;
        opt.beta2 = header.adam.beta2;
        opt.eps = header.adam.eps;
        opt.step = header.adam.step;
        let mut pending_m: Option<(String, Tensor)> = None;
        let n = r.len()?;
        for _ in 0..n {
            let kind = Kind::from_u8(r.u8()?)?;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("blob {name} too large")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("blob {name}: {e}")))?;
            match kind {
                Kind::Param => store.insert(&name, t),
                Kind::Buffer => store.insert_buffer(&name, t),
                Kind::AdamM => pending_m = Some((name, t)),
                Kind::AdamV => match pending_m.take() {
                    Some((m_name, m)) if m_name == name => opt.set_moments(&name, m, t),
                    _ => return Err(Error::Checkpoint(format!("second moment of {name} without first"))),
                },
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        // every declared tensor must be present with its declared shape
        let template = TsdModel::new(header.model.clone(), 0)?;
        for (name, t) in template.params.params() {
            match store.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("parameter {name} missing or misshapen"))),
            }
        }
        for (name, t) in template.params.buffers() {
            match store.buffer(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("buffer {name} missing or misshapen"))),
            }
        }
        if store.params().count() != template.params.params().count() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self {
            model: TsdModel {
                config: header.model,
                params: store,
            },
            optimizer: opt,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
