//! Embedding export and re-import.
//!
//! The binary container holds one modality per file: a fixed header
//! (magic "TME1", a format version, the modality code, row count N, and
//! dimension D) followed by N records of sample id, class id, and D
//! little-endian f32 values. An optional CSV mirror carries the same rows for
//! tools that cannot read the binary form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::contrastive::{normalize, EmbeddingBatch, Modality};
use crate::datasets::{ClassTaxonomy, Sample};
use crate::encoders::EncoderSet;
use crate::error::io_err;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TME1";
const VERSION: u8 = 1;

/// One exported embedding row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub class_id: usize,
    pub vector: Vec<f32>,
}

/// A full embedding export for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub modality: Modality,
    pub dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

fn modality_code(modality: Modality) -> u8 {
    match modality {
        Modality::Image => 0,
        Modality::Symbol => 1,
        Modality::Text => 2,
    }
}

fn modality_from_code(code: u8) -> Option<Modality> {
    match code {
        0 => Some(Modality::Image),
        1 => Some(Modality::Symbol),
        2 => Some(Modality::Text),
        _ => None,
    }
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl EmbeddingFile {
    /// Quantizes a normalized batch to f32 rows tagged with ids and labels.
    pub fn from_batch(
        batch: &EmbeddingBatch,
        sample_ids: &[String],
        labels: &[usize],
    ) -> Result<Self> {
        if !batch.normalized {
            return Err(Error::UnnormalizedInput {
                modality: batch.modality.name(),
            });
        }
        if sample_ids.len() != batch.n {
            return Err(Error::BatchSizeMismatch {
                left: batch.n,
                right: sample_ids.len(),
            });
        }
        if labels.len() != batch.n {
            return Err(Error::BatchSizeMismatch {
                left: batch.n,
                right: labels.len(),
            });
        }
        let records = (0..batch.n)
            .map(|i| EmbeddingRecord {
                sample_id: sample_ids[i].clone(),
                class_id: labels[i],
                vector: batch.row(i).iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Ok(EmbeddingFile {
            modality: batch.modality,
            dim: batch.dim,
            records,
        })
    }

    /// Rebuilds an f64 batch. The rows are re-normalized because f32
    /// quantization nudges unit norms by a few ulps, and downstream retrieval
    /// insists on exact normalization.
    pub fn to_batch(&self) -> Result<EmbeddingBatch> {
        let mut vectors = Vec::with_capacity(self.records.len() * self.dim);
        for r in &self.records {
            vectors.extend(r.vector.iter().map(|&v| v as f64));
        }
        let raw = EmbeddingBatch::new(self.modality, self.records.len(), self.dim, vectors)?;
        normalize(&raw)
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.sample_id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class_id).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
        }
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
            w.write_all(bytes).map_err(io_err(path))
        };
        write(&mut w, MAGIC)?;
        write(&mut w, &[VERSION, modality_code(self.modality)])?;
        write(&mut w, &(self.records.len() as u32).to_le_bytes())?;
        write(&mut w, &(self.dim as u32).to_le_bytes())?;
        for r in &self.records {
            if r.vector.len() != self.dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} values", self.dim),
                    got: format!("{} values", r.vector.len()),
                });
            }
            let id = r.sample_id.as_bytes();
            write(&mut w, &(id.len() as u32).to_le_bytes())?;
            write(&mut w, id)?;
            write(&mut w, &(r.class_id as u32).to_le_bytes())?;
            for &v in &r.vector {
                write(&mut w, &v.to_le_bytes())?;
            }
        }
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let file = File::open(path).map_err(io_err(path))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| load_err(path, "file too short for header"))?;
        if &magic != MAGIC {
            return Err(load_err(path, format!("bad magic {magic:?}")));
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head)
            .map_err(|_| load_err(path, "file too short for header"))?;
        if head[0] != VERSION {
            return Err(load_err(
                path,
                format!("unsupported version {}, expected {VERSION}", head[0]),
            ));
        }
        let modality = modality_from_code(head[1])
            .ok_or_else(|| load_err(path, format!("unknown modality code {}", head[1])))?;
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)
            .map_err(|_| load_err(path, "file too short for row count"))?;
        let n = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)
            .map_err(|_| load_err(path, "file too short for dimension"))?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut records = Vec::with_capacity(n);
        for row in 0..n {
            r.read_exact(&mut u32buf)
                .map_err(|_| load_err(path, format!("row {row}: truncated id length")))?;
            let id_len = u32::from_le_bytes(u32buf) as usize;
            let mut id_bytes = vec![0u8; id_len];
            r.read_exact(&mut id_bytes)
                .map_err(|_| load_err(path, format!("row {row}: truncated id")))?;
            let sample_id = String::from_utf8(id_bytes)
                .map_err(|_| load_err(path, format!("row {row}: id is not UTF-8")))?;
            r.read_exact(&mut u32buf)
                .map_err(|_| load_err(path, format!("row {row}: truncated class id")))?;
            let class_id = u32::from_le_bytes(u32buf) as usize;
            let mut vector = Vec::with_capacity(dim);
            let mut f32buf = [0u8; 4];
            for _ in 0..dim {
                r.read_exact(&mut f32buf)
                    .map_err(|_| load_err(path, format!("row {row}: truncated vector")))?;
                vector.push(f32::from_le_bytes(f32buf));
            }
            records.push(EmbeddingRecord {
                sample_id,
                class_id,
                vector,
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io_err(path))? != 0 {
            return Err(load_err(path, "trailing bytes after final record"));
        }
        Ok(EmbeddingFile {
            modality,
            dim,
            records,
        })
    }

    /// Plain-text mirror of the binary file. Values are printed with Rust's
    /// shortest round-trip float formatting, so a reload is exact, well
    /// inside the documented 1e-6 tolerance.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let mut header = String::from("sample_id,class_id");
        for i in 0..self.dim {
            header.push_str(&format!(",e{i}"));
        }
        writeln!(w, "{header}").map_err(io_err(path))?;
        for r in &self.records {
            let mut line = format!("{},{}", r.sample_id, r.class_id);
            for &v in &r.vector {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn load_csv(path: &Path, modality: Modality) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| load_err(path, "empty file"))?;
        let dim = header.split(',').count().saturating_sub(2);
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let sample_id = fields
                .next()
                .ok_or_else(|| load_err(path, format!("line {}: missing id", i + 2)))?
                .to_string();
            let class_id: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| load_err(path, format!("line {}: bad class id", i + 2)))?;
            let vector: Vec<f32> = fields
                .map(|f| {
                    f.parse::<f32>()
                        .map_err(|_| load_err(path, format!("line {}: bad float {f:?}", i + 2)))
                })
                .collect::<Result<_>>()?;
            if vector.len() != dim {
                return Err(load_err(
                    path,
                    format!("line {}: expected {dim} values, got {}", i + 2, vector.len()),
                ));
            }
            records.push(EmbeddingRecord {
                sample_id,
                class_id,
                vector,
            });
        }
        Ok(EmbeddingFile {
            modality,
            dim,
            records,
        })
    }
}

/// Encodes one modality for the given samples and packages the rows.
pub fn compute_embeddings(
    set: &EncoderSet,
    samples: &[Sample],
    taxonomy: &ClassTaxonomy,
    modality: Modality,
) -> Result<EmbeddingFile> {
    let batch = super::encode_all(set, samples, taxonomy, modality)?;
    let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    EmbeddingFile::from_batch(&batch, &ids, &labels)
}

/// Encodes and writes one modality. When `csv_mirror` is set, a sibling file
/// with the extension swapped to `.csv` is written alongside the binary.
pub fn export_embeddings(
    set: &EncoderSet,
    samples: &[Sample],
    taxonomy: &ClassTaxonomy,
    modality: Modality,
    path: &Path,
    csv_mirror: bool,
) -> Result<EmbeddingFile> {
    let file = compute_embeddings(set, samples, taxonomy, modality)?;
    file.save(path)?;
    if csv_mirror {
        file.save_csv(&path.with_extension("csv"))?;
    }
    Ok(file)
}
