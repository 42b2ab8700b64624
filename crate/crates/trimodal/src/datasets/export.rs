//! On-disk dataset directories: PNG images and symbols plus JSON metadata.
//!
//! Layout:
//! ```text
//! dir/
//!   taxonomy.json          class table, symbol_path filled in
//!   manifest.json          [{sample_id, class_id, text}], sorted by id
//!   images/<sample_id>.png one per sample
//!   symbols/<class_id>.png one per class
//! ```
//! Pixels pass through 8-bit PNG quantization, so a reloaded dataset matches
//! the original to within half a quantization step rather than bit-exactly.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ClassTaxonomy, Dataset, Sample};
use crate::error::io_err;
use crate::raster::ImageArray;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestRow {
    sample_id: String,
    class_id: usize,
    text: String,
}

pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    let images_dir = dir.join("images");
    let symbols_dir = dir.join("symbols");
    std::fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    std::fs::create_dir_all(&symbols_dir).map_err(io_err(&symbols_dir))?;

    // One symbol file per class, taken from the first sample of the class.
    let mut taxonomy = ds.taxonomy.clone();
    for entry in &mut taxonomy.classes {
        let sample = ds
            .samples
            .iter()
            .find(|s| s.class_id == entry.id)
            .ok_or_else(|| Error::ClassTooSmall {
                class_id: entry.id,
                count: 0,
            })?;
        let rel = format!("symbols/{}.png", entry.id);
        sample.symbol.save_png(&dir.join(&rel))?;
        entry.symbol_path = Some(rel);
    }
    taxonomy.save(&dir.join("taxonomy.json"))?;

    let prompts = ds.prompts();
    let mut rows: Vec<ManifestRow> = ds
        .samples
        .iter()
        .map(|s| ManifestRow {
            sample_id: s.sample_id.clone(),
            class_id: s.class_id,
            text: prompts[s.class_id].clone(),
        })
        .collect();
    rows.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let manifest_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&rows).map_err(|e| Error::Load {
        path: manifest_path.clone(),
        reason: format!("manifest encoding failed: {e}"),
    })?;
    std::fs::write(&manifest_path, body).map_err(io_err(&manifest_path))?;

    for s in &ds.samples {
        s.image
            .save_png(&images_dir.join(format!("{}.png", s.sample_id)))?;
    }
    Ok(())
}

pub fn load_exported(dir: &Path) -> Result<Dataset> {
    let taxonomy = ClassTaxonomy::load(&dir.join("taxonomy.json"))?;
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingFile {
            path: manifest_path,
        });
    }
    let body = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let rows: Vec<ManifestRow> = serde_json::from_str(&body).map_err(|e| Error::Load {
        path: manifest_path.clone(),
        reason: format!("manifest decoding failed: {e}"),
    })?;
    if rows.is_empty() {
        return Err(Error::EmptyInput("dataset manifest"));
    }

    let mut symbols: Vec<Arc<ImageArray>> = Vec::with_capacity(taxonomy.len());
    for entry in &taxonomy.classes {
        let rel = entry.symbol_path.as_ref().ok_or_else(|| Error::Load {
            path: dir.join("taxonomy.json"),
            reason: format!("class {} has no symbol_path", entry.id),
        })?;
        symbols.push(Arc::new(ImageArray::load_png(&dir.join(rel))?));
    }

    let prompts = taxonomy.prompts();
    let mut samples = Vec::with_capacity(rows.len());
    for (index, row) in rows.iter().enumerate() {
        if row.class_id >= taxonomy.len() {
            return Err(Error::BadRecord {
                index,
                reason: format!(
                    "sample {} names class {} outside 0..{}",
                    row.sample_id,
                    row.class_id,
                    taxonomy.len()
                ),
            });
        }
        if row.text != prompts[row.class_id] {
            return Err(Error::BadRecord {
                index,
                reason: format!(
                    "sample {} text {:?} does not match the class prompt {:?}",
                    row.sample_id, row.text, prompts[row.class_id]
                ),
            });
        }
        let image_path = dir.join("images").join(format!("{}.png", row.sample_id));
        samples.push(Sample {
            sample_id: row.sample_id.clone(),
            class_id: row.class_id,
            image: Arc::new(ImageArray::load_png(&image_path)?),
            symbol: Arc::clone(&symbols[row.class_id]),
        });
    }
    let ds = Dataset {
        name: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "exported".to_string()),
        taxonomy,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}
