//! Experiment configuration, the optimizer, and the two-stage training loops.
//!
//! An experiment is described by a TOML file (see `ConfigFile`), resolved
//! into a concrete `ExperimentConfig`, and executed by `run_experiment`,
//! which drives the stage loops in `stages` over the phase plan from
//! `resolve_variant`. Results land under `runs/<name>/<seed>/`.

mod experiment;
mod optimizer;
mod stages;

pub use experiment::{run_experiment, run_experiment_with, ExperimentReport, RunRecord, TrainEvent};
pub use optimizer::Adam;
pub use stages::{run_stage1, run_stage2, CheckpointSink, EpochRecord};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{generate_synthetic, load_exported, load_galaxy10, load_galaxymnist, Dataset, SyntheticSpec};
use crate::encoders::{registry, OptimizerProfile};
use crate::{Error, Result};

/// Warm-up budget: "just over 10 epochs" of stage-1 alignment.
pub const DEFAULT_STAGE1_EPOCHS: usize = 12;
/// Joint fine-tuning budget for stage 2.
pub const DEFAULT_STAGE2_EPOCHS: usize = 50;
/// Stage-1 budget for the v3 variant, which spends its whole schedule on
/// the shared-encoder stage and needs longer to converge.
pub const CONVERGENCE_EPOCHS: usize = 50;
/// Default in-batch negative pool size.
pub const DEFAULT_BATCH_SIZE: usize = 64;

/// Which slice of the two-stage pipeline an experiment runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Stage 1, transfer, stage 2.
    Full,
    /// Warm-up only: the shared-encoder model is the product.
    V1,
    /// No warm-up: the symbol tower starts from the base initialization
    /// instead of warmed-up weights.
    V2,
    /// Warm-up only, but run to a convergence budget rather than the short
    /// default.
    V3,
    /// Same phases as full with pretrained loading disabled; encoders start
    /// from random parameters even when the config names a backbone.
    Scratch,
    /// Image and text only; no symbol terms in either stage's loss.
    Bimodal,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::Scratch => "scratch",
            Variant::Bimodal => "bimodal",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Variant::Full),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "scratch" => Ok(Variant::Scratch),
            "bimodal" => Ok(Variant::Bimodal),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant {other:?}; expected full, v1, v2, v3, scratch, or bimodal"
            ))),
        }
    }
}

fn default_n_classes() -> usize {
    SyntheticSpec::default().n_classes
}
fn default_per_class() -> usize {
    SyntheticSpec::default().per_class
}
fn default_image_size() -> usize {
    SyntheticSpec::default().image_size
}
fn default_noise() -> f64 {
    SyntheticSpec::default().noise
}

/// Where training data comes from. The `seed` of a synthetic dataset is
/// independent of the experiment seed so that repeated runs see the same
/// data and differ only in training stochasticity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "default_n_classes")]
        n_classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// A directory previously written by dataset export (PNG files plus
    /// manifest.json).
    Exported { path: PathBuf },
    Galaxy10 {
        path: PathBuf,
        #[serde(default)]
        target_size: Option<usize>,
    },
    Galaxymnist {
        path: PathBuf,
        #[serde(default)]
        target_size: Option<usize>,
    },
}

impl DatasetConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            DatasetConfig::Synthetic { .. } => "synthetic",
            DatasetConfig::Exported { .. } => "exported",
            DatasetConfig::Galaxy10 { .. } => "galaxy10",
            DatasetConfig::Galaxymnist { .. } => "galaxymnist",
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DatasetConfig::Synthetic {
            n_classes: s.n_classes,
            per_class: s.per_class,
            image_size: s.image_size,
            noise: s.noise,
            seed: s.seed,
        }
    }
}

fn default_embed_dim() -> usize {
    64
}

/// Which encoder family the experiment trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderConfig {
    Toy {
        #[serde(default = "default_embed_dim")]
        embed_dim: usize,
    },
    /// A registered backbone adapter loaded from a weight bundle on disk.
    Pretrained { name: String, weights: PathBuf },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Toy {
            embed_dim: default_embed_dim(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
}

/// The on-disk shape of an experiment config. Every field is optional;
/// `resolve` fills defaults, applies variant presets, and reports every
/// problem it finds in one error. CLI flag overrides are applied by setting
/// fields on this struct before resolving.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub symmetric_loss: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_masked_negatives: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment_symbols: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
}

impl ConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid {
            problems: vec![format!("TOML parse error: {e}")],
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_toml_str(&text)
    }

    /// Fills defaults and variant presets and validates everything at once.
    ///
    /// Variant presets set the epoch budget a variant forbids to zero (for
    /// example v1 forces stage2_epochs = 0). Writing a nonzero budget for a
    /// stage the variant skips is a config error, not a silent override.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut problems = Vec::new();

        let variant = match self.variant.as_deref() {
            None => Variant::Full,
            Some(v) => match Variant::from_name(v) {
                Ok(v) => v,
                Err(e) => {
                    problems.push(e.to_string());
                    Variant::Full
                }
            },
        };

        let (preset1, preset2) = match variant {
            Variant::Full | Variant::Scratch | Variant::Bimodal => {
                (DEFAULT_STAGE1_EPOCHS, DEFAULT_STAGE2_EPOCHS)
            }
            Variant::V1 => (DEFAULT_STAGE1_EPOCHS, 0),
            Variant::V2 => (0, DEFAULT_STAGE2_EPOCHS),
            Variant::V3 => (CONVERGENCE_EPOCHS, 0),
        };
        let stage1_epochs = self.stage1_epochs.unwrap_or(preset1);
        let stage2_epochs = self.stage2_epochs.unwrap_or(preset2);
        if variant == Variant::V2 && stage1_epochs != 0 {
            problems.push(format!(
                "variant v2 skips stage 1; stage1_epochs must be 0 or omitted, got {stage1_epochs}"
            ));
        }
        if matches!(variant, Variant::V1 | Variant::V3) && stage2_epochs != 0 {
            problems.push(format!(
                "variant {} has no stage 2; stage2_epochs must be 0 or omitted, got {stage2_epochs}",
                variant.name()
            ));
        }

        let batch_size = self.batch_size.unwrap_or(DEFAULT_BATCH_SIZE);
        if batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        let repeats = self.repeats.unwrap_or(1);
        if repeats == 0 {
            problems.push("repeats must be at least 1".to_string());
        }
        let test_fraction = self.test_fraction.unwrap_or(0.2);
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            problems.push(format!(
                "test_fraction must be strictly between 0 and 1, got {test_fraction}"
            ));
        }

        let dataset = self.dataset.clone().unwrap_or_default();
        if let DatasetConfig::Synthetic {
            n_classes,
            per_class,
            image_size,
            noise,
            ..
        } = &dataset
        {
            if !(1..=10).contains(n_classes) {
                problems.push(format!(
                    "synthetic n_classes must be between 1 and 10, got {n_classes}"
                ));
            }
            if *per_class < 2 {
                problems.push(format!(
                    "synthetic per_class must be at least 2 so the split keeps a sample on each side, got {per_class}"
                ));
            }
            if *image_size < 8 {
                problems.push(format!(
                    "synthetic image_size must be at least 8, got {image_size}"
                ));
            }
            if !(*noise >= 0.0) {
                problems.push(format!("synthetic noise must be non-negative, got {noise}"));
            }
        }

        let encoder = self.encoder.clone().unwrap_or_default();
        // Learning-rate defaults follow the encoder family: attention
        // backbones take a larger step than convolutional ones, and the toy
        // tower needs a desk-scale rate to move at all.
        let (default_lr, default_wd) = match &encoder {
            EncoderConfig::Toy { embed_dim } => {
                if *embed_dim < 8 {
                    problems.push(format!("embed_dim must be at least 8, got {embed_dim}"));
                }
                (1e-3, 1e-4)
            }
            EncoderConfig::Pretrained { name, .. } => match registry().get(name.as_str()) {
                Some(desc) => match desc.optimizer_profile {
                    OptimizerProfile::Convolutional => (5e-6, 2e-4),
                    OptimizerProfile::Attention => (1e-4, 0.02),
                },
                None => {
                    problems.push(format!(
                        "unknown backbone descriptor {name:?}; known: {}",
                        registry().keys().cloned().collect::<Vec<_>>().join(", ")
                    ));
                    (1e-4, 0.02)
                }
            },
        };

        let opt = self.optimizer.clone().unwrap_or_default();
        if let Some(name) = &opt.name {
            if name != "adam" {
                problems.push(format!(
                    "optimizer {name:?} is not supported; only \"adam\" is implemented"
                ));
            }
        }
        let learning_rate = opt.lr.unwrap_or(default_lr);
        if !(learning_rate > 0.0) {
            problems.push(format!("optimizer lr must be positive, got {learning_rate}"));
        }
        let weight_decay = opt.weight_decay.unwrap_or(default_wd);
        if !(weight_decay >= 0.0) {
            problems.push(format!(
                "optimizer weight_decay must be non-negative, got {weight_decay}"
            ));
        }

        if !problems.is_empty() {
            return Err(Error::ConfigInvalid { problems });
        }

        let name = self
            .name
            .clone()
            .unwrap_or_else(|| format!("{}-{}", variant.name(), dataset.kind_name()));

        Ok(ExperimentConfig {
            name,
            variant,
            seed: self.seed.unwrap_or(0),
            repeats,
            stage1_epochs,
            stage2_epochs,
            batch_size,
            test_fraction,
            symmetric_loss: self.symmetric_loss.unwrap_or(false),
            label_masked_negatives: self.label_masked_negatives.unwrap_or(false),
            augment_symbols: self.augment_symbols.unwrap_or(false),
            learning_rate,
            weight_decay,
            dataset,
            encoder,
        })
    }
}

/// A fully resolved experiment description. Every field is concrete; the
/// snapshot written into a run directory serializes this back into the
/// `ConfigFile` schema so it can be rerun as-is.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub variant: Variant,
    pub seed: u64,
    pub repeats: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub test_fraction: f64,
    pub symmetric_loss: bool,
    pub label_masked_negatives: bool,
    pub augment_symbols: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        ConfigFile::from_toml_str(text)?.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        ConfigFile::load(path)?.resolve()
    }

    /// The config in file form, with every value written out explicitly.
    pub fn to_config_file(&self) -> ConfigFile {
        ConfigFile {
            name: Some(self.name.clone()),
            variant: Some(self.variant.name().to_string()),
            seed: Some(self.seed),
            repeats: Some(self.repeats),
            stage1_epochs: Some(self.stage1_epochs),
            stage2_epochs: Some(self.stage2_epochs),
            batch_size: Some(self.batch_size),
            test_fraction: Some(self.test_fraction),
            symmetric_loss: Some(self.symmetric_loss),
            label_masked_negatives: Some(self.label_masked_negatives),
            augment_symbols: Some(self.augment_symbols),
            optimizer: Some(OptimizerSection {
                name: Some("adam".to_string()),
                lr: Some(self.learning_rate),
                weight_decay: Some(self.weight_decay),
            }),
            dataset: Some(self.dataset.clone()),
            encoder: Some(self.encoder.clone()),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&self.to_config_file())
            .expect("resolved config serializes to TOML")
    }

    /// SHA-256 over the canonical JSON form, used to stamp checkpoints so a
    /// checkpoint can be traced back to the exact configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes to JSON");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        let mut hex = String::with_capacity(out.len() * 2);
        for b in out {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

/// One step of a resolved training schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum Phase {
    Stage1 { epochs: usize },
    Transfer,
    Stage2 { epochs: usize },
}

/// Expands a variant into its ordered phase list. The v2 plan contains no
/// explicit transfer phase: its symbol tower is split off from the base
/// initialization when stage 2 starts, not from warmed-up weights. The
/// bimodal plan also skips the transfer because no symbol tower ever
/// exists.
pub fn resolve_variant(config: &ExperimentConfig) -> Vec<Phase> {
    let s1 = Phase::Stage1 {
        epochs: config.stage1_epochs,
    };
    let s2 = Phase::Stage2 {
        epochs: config.stage2_epochs,
    };
    match config.variant {
        Variant::Full | Variant::Scratch => vec![s1, Phase::Transfer, s2],
        Variant::V1 | Variant::V3 => vec![s1],
        Variant::V2 => vec![s2],
        Variant::Bimodal => vec![s1, s2],
    }
}

/// Materializes the dataset a config names.
pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    match cfg {
        DatasetConfig::Synthetic {
            n_classes,
            per_class,
            image_size,
            noise,
            seed,
        } => generate_synthetic(&SyntheticSpec {
            n_classes: *n_classes,
            per_class: *per_class,
            image_size: *image_size,
            noise: *noise,
            seed: *seed,
        }),
        DatasetConfig::Exported { path } => load_exported(path),
        DatasetConfig::Galaxy10 { path, target_size } => load_galaxy10(path, *target_size),
        DatasetConfig::Galaxymnist { path, target_size } => load_galaxymnist(path, *target_size),
    }
}
