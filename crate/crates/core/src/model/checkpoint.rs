//! Binary checkpoint format.
//!
//! ```text
//! "MSF1" | version: u32 LE
//! count: u32 LE
//! count x { name_len: u32 LE, name: UTF-8, rank: u32 LE, extents: rank x u64 LE }
//! payload: f32 LE values of every tensor, manifest order
//! crc32 of the payload: u32 LE
//! ```
//!
//! Integers that do not fit an f32 exactly (step, seed) are stored as four
//! 16-bit limbs, least significant first.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{EncoderConfig, EncoderPair};
use crate::error::{Error, Result};
use crate::tensor::nn::{Module, TensorKind};
use crate::tensor::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSF1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn vector(name: impl Into<String>, data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(name, &[n], data)
    }
}

/// Ordered collection of named tensors, as stored on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<NamedTensor>,
}

impl Archive {
    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Like [`get`](Self::get) but a missing entry is a checkpoint error.
    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name).ok_or_else(|| Error::Checkpoint {
            offset: 0,
            msg: format!("missing tensor `{name}`"),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        let start = out.len();
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.error(0, format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut manifest = Vec::with_capacity(count.min(4096));
        let mut total: usize = 0;
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank_at = r.pos;
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(r.error(rank_at, format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let ext_at = r.pos;
                let e = r.u64("extent")?;
                let e = usize::try_from(e)
                    .ok()
                    .filter(|&e| e > 0)
                    .ok_or_else(|| r.error(ext_at, format!("tensor `{name}` has extent {e}")))?;
                shape.push(e);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| total.checked_add(n).map(|t| (n, t)))
                .filter(|&(_, t)| t.checked_mul(4).map_or(false, |b| b <= bytes.len()))
                .ok_or_else(|| r.error(rank_at, format!("tensor `{name}` is larger than the file")))?;
            total = n.1;
            manifest.push((name, shape, n.0));
        }
        let payload_start = r.pos;
        let expected = payload_start + 4 * total + 4;
        if bytes.len() != expected {
            return Err(r.error(
                bytes.len().min(expected) as u64,
                format!("file is {} bytes, manifest implies {expected}", bytes.len()),
            ));
        }
        let payload = &bytes[payload_start..payload_start + 4 * total];
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
        let crc = crc32fast::hash(payload);
        if crc != stored {
            return Err(r.error(
                (expected - 4) as u64,
                format!("payload checksum {crc:08x} does not match stored {stored:08x}"),
            ));
        }
        let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let tensors = manifest
            .into_iter()
            .map(|(name, shape, n)| NamedTensor {
                name,
                shape,
                data: floats.by_ref().take(n).collect(),
            })
            .collect();
        Ok(Self { tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: impl TryInto<u64>, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: offset.try_into().unwrap_or(u64::MAX),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let tmp = path.with_extension("msf.tmp");
    let bytes = archive.to_bytes();
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Archive::from_bytes(&bytes)
}

pub fn encode_u64(v: u64) -> Vec<f32> {
    (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect()
}

pub fn decode_u64(limbs: &[f32]) -> Result<u64> {
    if limbs.len() != 4 {
        return Err(Error::Checkpoint {
            offset: 0,
            msg: format!("expected 4 limbs, found {}", limbs.len()),
        });
    }
    let mut v = 0u64;
    for (i, &l) in limbs.iter().enumerate() {
        if !(0.0..65536.0).contains(&l) || l.fract() != 0.0 {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: format!("invalid limb {l}"),
            });
        }
        v |= (l as u64) << (16 * i);
    }
    Ok(v)
}

/// Everything needed to resume training.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub pair: EncoderPair<f32>,
    pub optimizer: OptimizerState<f32>,
    pub step: u64,
    pub seed: u64,
    /// Caller-owned state (memory bank, normalization constants, ...).
    pub extra: Archive,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset: 0,
        msg: msg.into(),
    }
}

fn velocity_names(pair: &EncoderPair<f32>) -> Vec<String> {
    pair.online
        .named_tensors("online")
        .into_iter()
        .filter(|(_, _, k)| *k == TensorKind::Param)
        .map(|(n, _, _)| format!("optim.velocity.{n}"))
        .collect()
}

impl CheckpointData {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.push(NamedTensor::vector("meta.step", encode_u64(self.step)));
        a.push(NamedTensor::vector("meta.seed", encode_u64(self.seed)));
        a.push(NamedTensor::vector(
            "meta.encoder",
            self.pair.config.to_codes().into_iter().map(|c| c as f32).collect(),
        ));
        a.push(NamedTensor::vector("meta.ema_momentum", vec![self.pair.momentum]));
        for (name, t, _) in self.pair.named_state() {
            a.push(NamedTensor::new(name, t.shape(), t.data().to_vec()));
        }
        let o = &self.optimizer;
        a.push(NamedTensor::vector("optim.hparams", vec![o.lr0, o.momentum, o.weight_decay]));
        for (name, v) in velocity_names(&self.pair).into_iter().zip(&o.velocity) {
            a.push(NamedTensor::vector(name, v.clone()));
        }
        for t in &self.extra.tensors {
            a.push(t.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let step = decode_u64(&a.require("meta.step")?.data)?;
        let seed = decode_u64(&a.require("meta.seed")?.data)?;
        let codes: Vec<usize> = a
            .require("meta.encoder")?
            .data
            .iter()
            .map(|&c| if c >= 0.0 && c.fract() == 0.0 { Ok(c as usize) } else { Err(invalid("encoder description")) })
            .collect::<Result<_>>()?;
        let config = EncoderConfig::from_codes(&codes).map_err(|e| invalid(e.to_string()))?;
        let momentum = *a
            .require("meta.ema_momentum")?
            .data
            .first()
            .ok_or_else(|| invalid("empty EMA momentum"))?;
        let mut pair = EncoderPair::new(&config, momentum, 0).map_err(|e| invalid(e.to_string()))?;
        let mut used: Vec<&str> = vec!["meta.step", "meta.seed", "meta.encoder", "meta.ema_momentum", "optim.hparams"];
        {
            let mut slots = pair.online.named_tensors_mut("online");
            slots.extend(pair.target.named_tensors_mut("target"));
            for (name, t, _) in slots {
                let src = a.require(&name)?;
                if src.shape != t.shape() {
                    return Err(invalid(format!("tensor `{name}` has shape {:?}, expected {:?}", src.shape, t.shape())));
                }
                t.data_mut().copy_from_slice(&src.data);
                used.push(&src.name);
            }
        }
        let h = &a.require("optim.hparams")?.data;
        if h.len() != 3 {
            return Err(invalid("optimizer hyperparameters"));
        }
        let mut velocity = Vec::new();
        for (name, (_, p, _)) in velocity_names(&pair)
            .into_iter()
            .zip(pair.online.named_tensors("").into_iter().filter(|(_, _, k)| *k == TensorKind::Param))
        {
            let v = a.require(&name)?;
            if v.data.len() != p.len() {
                return Err(invalid(format!("velocity `{name}` has {} values, expected {}", v.data.len(), p.len())));
            }
            velocity.push(v.data.clone());
            used.push(&v.name);
        }
        let optimizer = OptimizerState::new(std::iter::empty(), h[0], h[1], h[2]).map_err(|e| invalid(e.to_string()))?;
        let optimizer = OptimizerState { velocity, ..optimizer };
        let extra = Archive {
            tensors: a
                .tensors
                .iter()
                .filter(|t| !used.contains(&t.name.as_str()))
                .cloned()
                .collect(),
        };
        if let Some(t) = extra.tensors.iter().find(|t| t.name.starts_with("online.") || t.name.starts_with("target.") || t.name.starts_with("optim.")) {
            return Err(invalid(format!("unexpected tensor `{}`", t.name)));
        }
        Ok(Self {
            pair,
            optimizer,
            step,
            seed,
            extra,
        })
    }
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    write_archive(path, &data.to_archive())
}

/// Reads and validates a whole checkpoint; nothing is returned on error.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    CheckpointData::from_archive(&read_archive(path)?)
}
