//! Pretrained backbone descriptors and weight-bundle loading.
//!
//! A descriptor names an adapter topology (dims, channel list, preprocessing
//! constants) plus the optimizer profile its fine-tuning defaults follow.
//! Weight bundles are ordinary TMA1 containers exported offline into that
//! topology; loading validates the bundle against the registry entry and
//! never falls back to random parameters.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::EncoderSet;
use crate::{Error, Result};

/// Which fine-tuning hyperparameter family applies to a backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerProfile {
    Attention,
    Convolutional,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub optimizer_profile: OptimizerProfile,
    pub image_size: usize,
    pub embed_dim: usize,
    pub image_channels: Vec<usize>,
    pub token_dim: usize,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

static REGISTRY: OnceLock<BTreeMap<String, BackboneDescriptor>> = OnceLock::new();

/// The built-in descriptor table.
pub fn registry() -> &'static BTreeMap<String, BackboneDescriptor> {
    REGISTRY.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/backbones.json"))
            .expect("bundled backbone registry is valid JSON")
    })
}

fn float3_eq(a: &[f64; 3], b: &[f64; 3]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
}

/// Loads a pretrained encoder set for a registered descriptor from a weight
/// bundle on disk, checking the bundle's topology against the registry.
pub fn load_pretrained(name: &str, weights_path: &Path) -> Result<EncoderSet> {
    let desc = registry().get(name).ok_or_else(|| Error::UnknownDescriptor {
        name: name.to_string(),
    })?;
    if !weights_path.exists() {
        return Err(Error::MissingFile {
            path: weights_path.to_path_buf(),
        });
    }
    let (set, _meta) = load_checkpoint(weights_path)?;
    let mismatch = |detail: String| Error::TopologyMismatch {
        name: name.to_string(),
        detail,
    };
    if set.symbol.is_some() {
        return Err(mismatch(
            "weight bundle already contains a split symbol tower; pretrained bundles carry a single visual tower".to_string(),
        ));
    }
    let spec = &set.image.spec;
    if spec.image_size != desc.image_size {
        return Err(mismatch(format!(
            "image_size {} in bundle, {} in registry",
            spec.image_size, desc.image_size
        )));
    }
    if spec.channels != desc.image_channels {
        return Err(mismatch(format!(
            "conv channels {:?} in bundle, {:?} in registry",
            spec.channels, desc.image_channels
        )));
    }
    if spec.embed_dim != desc.embed_dim || set.text.embed_dim != desc.embed_dim {
        return Err(mismatch(format!(
            "embed_dim {}/{} in bundle, {} in registry",
            spec.embed_dim, set.text.embed_dim, desc.embed_dim
        )));
    }
    if set.text.token_dim != desc.token_dim {
        return Err(mismatch(format!(
            "token_dim {} in bundle, {} in registry",
            set.text.token_dim, desc.token_dim
        )));
    }
    if !float3_eq(&spec.pixel_mean, &desc.pixel_mean) || !float3_eq(&spec.pixel_std, &desc.pixel_std)
    {
        return Err(mismatch(
            "pixel normalization constants differ from the registry".to_string(),
        ));
    }
    Ok(set)
}
