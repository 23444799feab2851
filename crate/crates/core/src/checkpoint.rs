//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CAPSCKPT"  u32 version  u64 header_len  header (JSON, header_len bytes)
//! f64 values of every tensor, in header order
//! ```
//!
//! The header carries the config hash, step, architecture, activation, the
//! canonical config text and each tensor's name and shape. Values are
//! stored as raw IEEE bits, so a save/load cycle is bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activations::ActivationFn;
use crate::capsule::{ArchConfig, CapsNet, Params};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CAPSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    step: usize,
    arch: ArchConfig,
    activation: ActivationFn,
    config: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config_hash: String,
    /// Canonical `key = value` rendering of the run config.
    pub config_text: String,
    pub net: CapsNet,
}

impl Checkpoint {
    pub fn new(net: CapsNet, config: &RunConfig, step: usize) -> Self {
        Checkpoint {
            step,
            config_hash: config.hash(),
            config_text: config.to_kv_string(),
            net,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse_str(&self.config_text)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = Params::NAMES
            .iter()
            .zip(self.net.params.tensors())
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = Header {
            config_hash: self.config_hash.clone(),
            step: self.step,
            arch: self.net.arch.clone(),
            activation: self.net.activation,
            config: self.config_text.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.net.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.net.params.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format("checkpoint", path, reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing CAPSCKPT magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..)
            .and_then(|b| b.get(..header_len).map(|h| (h, &b[header_len..])))
            .ok_or_else(|| bad("truncated header".into()))?;
        let (header, mut payload) = body;
        let header: Header = serde_json::from_slice(header).map_err(|e| bad(format!("header: {e}")))?;

        let mut params = Params::zeros(&header.arch);
        if header.tensors.len() != Params::NAMES.len() {
            return Err(bad(format!("expected {} tensors, header lists {}", Params::NAMES.len(), header.tensors.len())));
        }
        for ((entry, name), slot) in header.tensors.iter().zip(Params::NAMES).zip(params.tensors_mut()) {
            if entry.name != *name || entry.shape != slot.shape() {
                return Err(bad(format!(
                    "tensor '{}' {:?} does not match architecture ('{}' {:?})",
                    entry.name,
                    entry.shape,
                    name,
                    slot.shape()
                )));
            }
            let n = slot.len() * 8;
            if payload.len() < n {
                return Err(bad(format!("truncated data for tensor '{name}'")));
            }
            let data = payload[..n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *slot = Tensor::new(entry.shape.clone(), data)?;
            payload = &payload[n..];
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing bytes", payload.len())));
        }
        Ok(Checkpoint {
            step: header.step,
            config_hash: header.config_hash,
            config_text: header.config,
            net: CapsNet::new(header.arch, header.activation, params)?,
        })
    }

    /// Writes through a temporary file and renames, so a crash never
    /// leaves a half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn checkpoint_file_name(step: usize) -> String {
    format!("ckpt-{step:08}.bin")
}

/// Checkpoint files in `dir`, sorted by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(usize, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("ckpt-")?.strip_suffix(".bin")?.parse().ok()?;
            Some((step, e.path()))
        })
        .collect();
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}
