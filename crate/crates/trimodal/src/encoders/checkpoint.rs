//! Binary checkpoint container for encoder sets.
//!
//! Layout: magic `TMA1`, a u32 format version, a u32 manifest length, a JSON
//! manifest (topology, vocab, stage, epoch, config digest, array directory),
//! then all parameter arrays as little-endian f64. Values round-trip
//! bit-exactly, so an encoder restored from disk reproduces its embeddings
//! to the last bit.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::conv::{ConvEncoder, ConvSpec};
use super::text::{TextEncoder, Vocab};
use super::{EncoderSet, TemperatureParam};
use crate::error::io_err;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TMA1";
const VERSION: u32 = 1;
const TEMPERATURE_ARRAY: &str = "temperature.log_inverse_tau";

/// Run bookkeeping stored next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub epoch: u64,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: u8,
    epoch: u64,
    config_digest: String,
    image_spec: ConvSpec,
    symbol_spec: Option<ConvSpec>,
    text_token_dim: usize,
    text_embed_dim: usize,
    vocab: Vec<String>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    offset: u64,
    len: u64,
}

pub fn save_checkpoint(
    set: &EncoderSet,
    epoch: u64,
    config_digest: &str,
    path: &Path,
) -> Result<()> {
    let named = set.named_params();
    let mut arrays = Vec::with_capacity(named.len() + 1);
    let mut offset = 0u64;
    for (name, p) in &named {
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: p.shape.clone(),
            offset,
            len: p.len() as u64,
        });
        offset += p.len() as u64;
    }
    arrays.push(ArrayEntry {
        name: TEMPERATURE_ARRAY.to_string(),
        shape: vec![1],
        offset,
        len: 1,
    });

    let manifest = Manifest {
        stage: set.stage(),
        epoch,
        config_digest: config_digest.to_string(),
        image_spec: set.image.spec.clone(),
        symbol_spec: set.symbol.as_ref().map(|s| s.spec.clone()),
        text_token_dim: set.text.token_dim,
        text_embed_dim: set.text.embed_dim,
        vocab: set.text.vocab.tokens.clone(),
        arrays,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encoding failed: {e}")))?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let io = io_err(path);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&manifest_bytes)?;
        for (_, p) in &named {
            for v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&set.temperature.log_inverse_tau.to_le_bytes())?;
        w.flush()
    })()
    .map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderSet, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a TMA1 checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let data_start = 12 + manifest_len;
    if bytes.len() < data_start {
        return Err(Error::Checkpoint("truncated manifest".to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..data_start])
        .map_err(|e| Error::Checkpoint(format!("manifest decoding failed: {e}")))?;

    let data = &bytes[data_start..];
    if data.len() % 8 != 0 {
        return Err(Error::Checkpoint("data section is not f64-aligned".to_string()));
    }
    let total: u64 = manifest.arrays.iter().map(|a| a.len).sum();
    if (data.len() / 8) as u64 != total {
        return Err(Error::Checkpoint(format!(
            "data section holds {} values, manifest expects {total}",
            data.len() / 8
        )));
    }

    let read_array = |entry: &ArrayEntry| -> Vec<f64> {
        let start = entry.offset as usize * 8;
        let end = start + entry.len as usize * 8;
        data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let find = |name: &str| -> Result<&ArrayEntry> {
        manifest
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("array {name} missing from checkpoint")))
    };

    let vocab = Vocab::from_tokens(manifest.vocab.clone())
        .map_err(|e| Error::Checkpoint(format!("bad vocab: {e}")))?;
    let mut image = ConvEncoder::zeros(manifest.image_spec.clone())?;
    let mut symbol = match &manifest.symbol_spec {
        Some(spec) => Some(ConvEncoder::zeros(spec.clone())?),
        None => None,
    };
    let mut text = TextEncoder::zeros(vocab, manifest.text_token_dim, manifest.text_embed_dim)?;

    let fill = |prefix: &str, params: Vec<&mut super::Param>| -> Result<()> {
        for p in params {
            let name = format!("{prefix}.{}", p.name);
            let entry = find(&name)?;
            if entry.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "array {name} has shape {:?}, expected {:?}",
                    entry.shape, p.shape
                )));
            }
            let max = entry.offset + entry.len;
            if max > total {
                return Err(Error::Checkpoint(format!(
                    "array {name} overruns the data section"
                )));
            }
            p.data = read_array(entry);
        }
        Ok(())
    };
    fill("image", image.params_mut())?;
    if let Some(sym) = &mut symbol {
        fill("symbol", sym.params_mut())?;
    }
    fill("text", text.params_mut())?;
    let temp_entry = find(TEMPERATURE_ARRAY)?;
    let temperature = TemperatureParam::new(read_array(temp_entry)[0]);

    let expected_stage = if symbol.is_some() { 2 } else { 1 };
    if manifest.stage != expected_stage {
        return Err(Error::Checkpoint(format!(
            "manifest stage {} does not match stored towers (stage {expected_stage})",
            manifest.stage
        )));
    }

    Ok((
        EncoderSet {
            image,
            symbol,
            text,
            temperature,
        },
        CheckpointMeta {
            stage: manifest.stage,
            epoch: manifest.epoch,
            config_digest: manifest.config_digest,
        },
    ))
}
