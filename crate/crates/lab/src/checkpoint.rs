//! Checkpoints: a binary parameter file plus a JSON sidecar.
//!
//! Binary layout, all integers little-endian `u32`:
//!
//! ```text
//! "MPAR" version count
//! count × { name_len name_utf8 rank dims[rank] values[numel] as f64 LE }
//! ```
//!
//! The sidecar sits next to the binary with a `.json` extension and holds
//! everything needed to rebuild the learner around the parameters.

use std::path::{Path, PathBuf};

use meta_attack_core::learner::{Learner, MamlLearner, ProtoLearner, SeqConfig, SeqLearner};
use meta_attack_core::model::{ClassifierSpec, ParamSet};
use meta_attack_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{LearnerConfig, ShapeConfig};
use crate::error::{io_err, LabError, Result};

pub const MAGIC: &[u8; 4] = b"MPAR";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * params.numel());
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    u32le(&mut out, FORMAT_VERSION as usize);
    u32le(&mut out, params.len());
    for (name, t) in params.iter() {
        u32le(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32le(&mut out, t.shape().len());
        for &d in t.shape() {
            u32le(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_params(bytes: &[u8]) -> std::result::Result<ParamSet, String> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err("not a parameter file (bad magic)".into());
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(format!("unsupported format version {version}"));
    }
    let count = c.u32()?;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| format!("parameter name: {e}"))?
            .to_string();
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("shape overflows")?;
        let raw = c.take(numel.checked_mul(8).ok_or("shape overflows")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        entries.push((name, t));
    }
    if c.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.at));
    }
    Ok(ParamSet::new(entries))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    pub config_name: String,
    pub learner: LearnerConfig,
    pub input_dim: usize,
    pub shape: ShapeConfig,
    /// Seed of the initial parameters.
    pub seed: u64,
    pub epochs: usize,
    /// SHA-256 of the binary parameter file.
    pub params_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub sidecar: Sidecar,
    pub params: ParamSet,
}

pub fn sidecar_path(params_path: &Path) -> PathBuf {
    params_path.with_extension("json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn save(&self, params_path: &Path) -> Result<()> {
        let bytes = encode_params(&self.params);
        let mut sidecar = self.sidecar.clone();
        sidecar.params_sha256 = sha256_hex(&bytes);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
        if let Some(dir) = params_path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(params_path, bytes).map_err(io_err(params_path))?;
        let side = sidecar_path(params_path);
        std::fs::write(&side, json).map_err(io_err(&side))
    }

    pub fn load(params_path: &Path) -> Result<Self> {
        let bad = |message: String| LabError::Checkpoint {
            path: params_path.to_path_buf(),
            message,
        };
        let bytes = std::fs::read(params_path).map_err(io_err(params_path))?;
        let side = sidecar_path(params_path);
        let text = std::fs::read_to_string(&side).map_err(io_err(&side))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| bad(format!("sidecar: {e}")))?;
        if sidecar.format_version != FORMAT_VERSION {
            return Err(bad(format!("sidecar format version {}", sidecar.format_version)));
        }
        if sidecar.params_sha256 != sha256_hex(&bytes) {
            return Err(bad("parameter file does not match the sidecar hash".into()));
        }
        let params = decode_params(&bytes).map_err(bad)?;
        let ck = Checkpoint { sidecar, params };
        ck.learner().map_err(|e| bad(e.to_string()))?;
        Ok(ck)
    }

    /// The learner these parameters belong to.
    pub fn learner(&self) -> Result<Learner> {
        let s = &self.sidecar;
        build_learner(&s.learner, s.input_dim, &s.shape, Some(self.params.clone()), s.seed)
    }
}

/// Builds a learner, either freshly initialized from `seed` or around
/// existing parameters.
pub fn build_learner(
    config: &LearnerConfig,
    input_dim: usize,
    shape: &ShapeConfig,
    params: Option<ParamSet>,
    seed: u64,
) -> Result<Learner> {
    let learner = match config {
        LearnerConfig::Maml {
            hidden,
            inner_lr,
            finetune_steps,
        } => {
            let spec = ClassifierSpec::new(input_dim, hidden.clone(), shape.way)?;
            Learner::Maml(match params {
                Some(p) => MamlLearner::new(spec, p, *inner_lr, *finetune_steps)?,
                None => MamlLearner::init(spec, seed, *inner_lr, *finetune_steps)?,
            })
        }
        LearnerConfig::Proto { hidden, embedding_dim } => {
            let spec = ClassifierSpec::new(input_dim, hidden.clone(), *embedding_dim)?;
            Learner::Proto(match params {
                Some(p) => ProtoLearner::new(spec, p, shape.way)?,
                None => ProtoLearner::init(spec, shape.way, seed)?,
            })
        }
        LearnerConfig::Seq { hidden, positional } => {
            let cfg = SeqConfig {
                input_dim,
                way: shape.way,
                hidden: *hidden,
                context_len: shape.way * shape.shot + 1,
                positional: *positional,
            };
            Learner::Seq(match params {
                Some(p) => SeqLearner::new(cfg, p)?,
                None => SeqLearner::init(cfg, seed)?,
            })
        }
    };
    Ok(learner)
}
