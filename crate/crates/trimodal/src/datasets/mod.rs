//! Dataset types, class taxonomies, prompt rendering, loaders, and the
//! synthetic generator.
//!
//! A dataset couples three views of every sample: a photographic image, the
//! schematic symbol of its class, and a natural-language prompt derived from
//! the class name. Symbols are canonical per class, so samples hold them
//! behind shared `Arc`s.

mod export;
mod hdf5;
mod split;
mod symbols;
mod synthetic;

pub use export::{export_dataset, load_exported};
pub use hdf5::{load_galaxy10, load_galaxymnist};
pub use split::{
    augment_symbol, epoch_batches, gather_batch, split_dataset, ModalBatch, Split, SplitMode,
};
pub use symbols::{render_image, render_symbol, Family, Placement};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::io_err;
use crate::raster::ImageArray;
use crate::{Error, Result};

/// Builds the fixed prompt template for a class.
pub fn render_prompt(article: &str, class_name: &str) -> String {
    format!("A picture of {article} {class_name}.")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub article: String,
    /// Relative path of the class symbol image, present when the taxonomy
    /// lives on disk next to exported symbol files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol_path: Option<String>,
}

impl ClassEntry {
    pub fn prompt(&self) -> String {
        render_prompt(&self.article, &self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub classes: Vec<ClassEntry>,
}

impl ClassTaxonomy {
    pub fn new(classes: Vec<ClassEntry>) -> Result<Self> {
        let tax = ClassTaxonomy { classes };
        tax.validate()?;
        Ok(tax)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes.is_empty() {
            problems.push("taxonomy has no classes".to_string());
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                problems.push(format!(
                    "class ids must be contiguous from 0; position {i} holds id {}",
                    c.id
                ));
            }
            if c.name.trim().is_empty() {
                problems.push(format!("class {i} has an empty name"));
            }
            if c.article != "a" && c.article != "an" {
                problems.push(format!(
                    "class {i} has article {:?}, expected \"a\" or \"an\"",
                    c.article
                ));
            }
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.classes.len() {
            problems.push("class names must be unique".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid { problems })
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// One prompt per class, in class-id order.
    pub fn prompts(&self) -> Vec<String> {
        self.classes.iter().map(ClassEntry::prompt).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: format!("taxonomy encoding failed: {e}"),
            })?;
        std::fs::write(path, body).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let body = std::fs::read_to_string(path).map_err(io_err(path))?;
        let tax: ClassTaxonomy = serde_json::from_str(&body).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: format!("taxonomy decoding failed: {e}"),
        })?;
        tax.validate()?;
        Ok(tax)
    }
}

/// One record: image, class symbol, class id, and a stable zero-padded id
/// whose lexicographic order matches numeric order.
#[derive(Clone, Debug)]
pub struct Sample {
    pub sample_id: String,
    pub class_id: usize,
    pub image: Arc<ImageArray>,
    pub symbol: Arc<ImageArray>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub taxonomy: ClassTaxonomy,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.taxonomy.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.taxonomy.prompts()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes()];
        for s in &self.samples {
            if s.class_id < counts.len() {
                counts[s.class_id] += 1;
            }
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        if self.samples.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        for s in &self.samples {
            if s.class_id >= self.n_classes() {
                return Err(Error::UnknownClass {
                    class_id: s.class_id,
                    n_classes: self.n_classes(),
                });
            }
        }
        Ok(())
    }
}

fn entry(id: usize, name: &str, article: &str) -> ClassEntry {
    ClassEntry {
        id,
        name: name.to_string(),
        article: article.to_string(),
        symbol_path: None,
    }
}

/// Class table of the 10-class galaxy morphology dataset, in its published
/// label order.
pub fn galaxy10_taxonomy() -> ClassTaxonomy {
    ClassTaxonomy {
        classes: vec![
            entry(0, "disturbed galaxy", "a"),
            entry(1, "merging galaxy", "a"),
            entry(2, "round smooth galaxy", "a"),
            entry(3, "in-between round smooth galaxy", "an"),
            entry(4, "cigar shaped smooth galaxy", "a"),
            entry(5, "barred spiral galaxy", "a"),
            entry(6, "unbarred tight spiral galaxy", "an"),
            entry(7, "unbarred loose spiral galaxy", "an"),
            entry(8, "edge-on galaxy without bulge", "an"),
            entry(9, "edge-on galaxy with bulge", "an"),
        ],
    }
}

/// Symbol recipes for the 10-class taxonomy, index-aligned with
/// [`galaxy10_taxonomy`].
pub fn galaxy10_families() -> [Family; 10] {
    [
        Family::Disturbed,
        Family::MergingPair,
        Family::RoundSmooth,
        Family::InBetweenSmooth,
        Family::CigarShaped,
        Family::BarredSpiral,
        Family::TightSpiral,
        Family::LooseSpiral,
        Family::EdgeOnDisk,
        Family::EdgeOnBulge,
    ]
}

/// Class table of the small 4-class galaxy dataset, in its published label
/// order.
pub fn galaxymnist_taxonomy() -> ClassTaxonomy {
    ClassTaxonomy {
        classes: vec![
            entry(0, "smooth round galaxy", "a"),
            entry(1, "smooth cigar galaxy", "a"),
            entry(2, "edge-on disk galaxy", "an"),
            entry(3, "unbarred spiral galaxy", "an"),
        ],
    }
}

/// Symbol recipes index-aligned with [`galaxymnist_taxonomy`].
pub fn galaxymnist_families() -> [Family; 4] {
    [
        Family::RoundSmooth,
        Family::CigarShaped,
        Family::EdgeOnDisk,
        Family::TwoArmSpiral,
    ]
}

/// Fixed family order of the synthetic dataset; `n_classes` takes a prefix.
pub fn synthetic_families() -> [Family; 10] {
    [
        Family::Ringed,
        Family::RoundSmooth,
        Family::CigarShaped,
        Family::TwoArmSpiral,
        Family::LooseSpiral,
        Family::BarredSpiral,
        Family::EdgeOnDisk,
        Family::EdgeOnBulge,
        Family::MergingPair,
        Family::Disturbed,
    ]
}

/// Taxonomy for the first `n_classes` synthetic families.
pub fn synthetic_taxonomy(n_classes: usize) -> Result<ClassTaxonomy> {
    let all = [
        entry(0, "ringed galaxy", "a"),
        entry(1, "round smooth galaxy", "a"),
        entry(2, "cigar shaped galaxy", "a"),
        entry(3, "two armed spiral galaxy", "a"),
        entry(4, "loose spiral galaxy", "a"),
        entry(5, "barred spiral galaxy", "a"),
        entry(6, "edge-on disk galaxy", "an"),
        entry(7, "edge-on bulge galaxy", "an"),
        entry(8, "merging galaxy pair", "a"),
        entry(9, "disturbed galaxy", "a"),
    ];
    if n_classes == 0 || n_classes > all.len() {
        return Err(Error::ConfigInvalid {
            problems: vec![format!(
                "synthetic n_classes must be between 1 and {}, got {n_classes}",
                all.len()
            )],
        });
    }
    ClassTaxonomy::new(all[..n_classes].to_vec())
}
