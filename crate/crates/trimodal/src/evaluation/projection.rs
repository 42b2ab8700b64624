//! 2-D views of the embedding space: PCA computed in-house, a thumbnail grid
//! laid out on the first two principal components, and a coordinate export
//! that can also delegate to an external t-SNE tool.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use crate::contrastive::EmbeddingBatch;
use crate::error::io_err;
use crate::raster::ImageArray;
use crate::{Error, Result};

use super::embedfile::EmbeddingFile;

/// Environment variable naming the external t-SNE executable. The tool is
/// called as `<tool> <embeddings.tme1> <output.csv>` and must write a CSV
/// with a `sample_id,x,y` header.
pub const TSNE_TOOL_ENV: &str = "TMA_TSNE_TOOL";

/// Eigendecomposition of a symmetric d×d matrix (row-major) by the cyclic
/// Jacobi method: repeatedly rotate away the largest class of off-diagonal
/// mass until it vanishes. Returns eigenvalues in descending order paired
/// with orthonormal eigenvectors.
fn jacobi_eigh(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), d * d);
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let fro_sq: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let off_sq: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        if off_sq <= fro_sq * 1e-28 + 1e-300 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                a[p * d + p] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                a[q * d + q] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for k in 0..d {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[p * d + k] = a[k * d + p];
                    a[k * d + q] = s * akp + c * akq;
                    a[q * d + k] = a[k * d + q];
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        a[j * d + j]
            .partial_cmp(&a[i * d + i])
            .expect("eigenvalues of a finite matrix are finite")
    });
    let values = order.iter().map(|&i| a[i * d + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..d).map(|k| v[k * d + i]).collect())
        .collect();
    (values, vectors)
}

/// First two principal components of an embedding batch.
#[derive(Clone, Debug)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
}

impl Pca2 {
    /// Fits on mean-centered rows via the covariance eigendecomposition.
    /// Each component's sign is canonicalized so its largest-magnitude
    /// loading is positive, making the output independent of the
    /// eigensolver's arbitrary sign choices.
    pub fn fit(batch: &EmbeddingBatch) -> Result<Self> {
        if batch.n < 2 {
            return Err(Error::InvalidArgument(format!(
                "PCA needs at least 2 rows, got {}",
                batch.n
            )));
        }
        if batch.dim < 2 {
            return Err(Error::InvalidArgument(
                "PCA needs at least 2 dimensions".to_string(),
            ));
        }
        let d = batch.dim;
        let mut mean = vec![0.0; d];
        for i in 0..batch.n {
            for (m, &x) in mean.iter_mut().zip(batch.row(i)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= batch.n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for i in 0..batch.n {
            let row = batch.row(i);
            for a in 0..d {
                let ca = row[a] - mean[a];
                for b in a..d {
                    cov[a * d + b] += ca * (row[b] - mean[b]);
                }
            }
        }
        let denom = (batch.n - 1) as f64;
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] /= denom;
                cov[b * d + a] = cov[a * d + b];
            }
        }
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        if trace <= 0.0 {
            return Err(Error::ZeroVariance);
        }
        let (values, mut vectors) = jacobi_eigh(cov, d);
        for vec in vectors.iter_mut().take(2) {
            let mut lead = 0usize;
            for (i, x) in vec.iter().enumerate() {
                if x.abs() > vec[lead].abs() {
                    lead = i;
                }
            }
            if vec[lead] < 0.0 {
                for x in vec.iter_mut() {
                    *x = -*x;
                }
            }
        }
        let mut it = vectors.into_iter();
        let first = it.next().expect("d >= 2 components");
        let second = it.next().expect("d >= 2 components");
        Ok(Pca2 {
            mean,
            components: [first, second],
            eigenvalues: [values[0], values[1]],
        })
    }

    /// Projects rows onto (PC1, PC2).
    pub fn project(&self, batch: &EmbeddingBatch) -> Result<Vec<(f64, f64)>> {
        if batch.dim != self.mean.len() {
            return Err(Error::DimMismatch {
                left: self.mean.len(),
                right: batch.dim,
            });
        }
        Ok((0..batch.n)
            .map(|i| {
                let row = batch.row(i);
                let mut x = 0.0;
                let mut y = 0.0;
                for k in 0..batch.dim {
                    let centered = row[k] - self.mean[k];
                    x += centered * self.components[0][k];
                    y += centered * self.components[1][k];
                }
                (x, y)
            })
            .collect())
    }
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Min-max scales one coordinate axis onto [0, G−1]; a degenerate axis (all
/// values equal) collapses to the midpoint.
fn scale_axis(values: &[f64], grid: usize) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let top = (grid - 1) as f64;
    values
        .iter()
        .map(|&v| {
            if span == 0.0 {
                top / 2.0
            } else {
                (v - lo) / span * top
            }
        })
        .collect()
}

/// Nearest free cell to a continuous (row, col) coordinate, found by
/// expanding Chebyshev rings around the rounded cell. The search keeps
/// expanding until no unexplored ring can beat the best candidate, so the
/// result is the true Euclidean nearest; ties prefer the lexicographically
/// smallest (row, col).
fn nearest_free_cell(row: f64, col: f64, occupied: &[bool], grid: usize) -> Option<(usize, usize)> {
    let clamp = |x: f64| (round_half_up(x) as isize).clamp(0, grid as isize - 1);
    let (r0, c0) = (clamp(row), clamp(col));
    let mut best: Option<(f64, usize, usize)> = None;
    let mut radius = 0isize;
    loop {
        let mut any_in_bounds = false;
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                if dr.abs().max(dc.abs()) != radius {
                    continue;
                }
                let (r, c) = (r0 + dr, c0 + dc);
                if r < 0 || c < 0 || r >= grid as isize || c >= grid as isize {
                    continue;
                }
                any_in_bounds = true;
                let (r, c) = (r as usize, c as usize);
                if occupied[r * grid + c] {
                    continue;
                }
                let d2 = (r as f64 - row).powi(2) + (c as f64 - col).powi(2);
                let candidate = (d2, r, c);
                if best.map_or(true, |b| candidate < b) {
                    best = Some(candidate);
                }
            }
        }
        if let Some((d2, _, _)) = best {
            // A cell in a farther ring is at least (radius − 0.5) away from
            // the query, so once that bound exceeds the best distance the
            // search is complete.
            let bound = radius as f64 - 0.5;
            if bound > 0.0 && bound * bound > d2 {
                break;
            }
        }
        if !any_in_bounds && radius as usize > 2 * grid {
            break;
        }
        radius += 1;
    }
    best.map(|(_, r, c)| (r, c))
}

/// A PCA grid layout: every sample pinned to a distinct cell, plus the
/// rendered contact sheet.
#[derive(Clone, Debug)]
pub struct GridAssignment {
    pub grid: usize,
    /// (sample_id, row, col), sorted by sample id.
    pub cells: Vec<(String, usize, usize)>,
    pub composite: ImageArray,
}

impl GridAssignment {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample_id,row,col\n");
        for (id, row, col) in &self.cells {
            out.push_str(&format!("{id},{row},{col}\n"));
        }
        std::fs::write(path, out).map_err(io_err(path))
    }
}

/// Projects embeddings to the first two principal components, scales them
/// onto a G×G lattice, and assigns every sample a distinct cell. Samples are
/// placed outside-in (descending distance from the grid center, ties by
/// ascending sample id), each taking the nearest free cell, so the crowded
/// center degrades gracefully instead of overwriting.
pub fn pca_grid(
    embeddings: &EmbeddingBatch,
    thumbnails: &[&ImageArray],
    sample_ids: &[String],
    grid: usize,
) -> Result<GridAssignment> {
    let n = embeddings.n;
    if n == 0 {
        return Err(Error::EmptyInput("embeddings"));
    }
    if grid == 0 {
        return Err(Error::InvalidArgument("grid size must be positive".to_string()));
    }
    if thumbnails.len() != n {
        return Err(Error::BatchSizeMismatch {
            left: n,
            right: thumbnails.len(),
        });
    }
    if sample_ids.len() != n {
        return Err(Error::BatchSizeMismatch {
            left: n,
            right: sample_ids.len(),
        });
    }
    if n > grid * grid {
        return Err(Error::GridOverflow {
            n,
            capacity: grid * grid,
        });
    }
    let (cell_h, cell_w) = (thumbnails[0].height, thumbnails[0].width);
    if cell_h == 0 || cell_w == 0 {
        return Err(Error::InvalidArgument("empty thumbnail".to_string()));
    }
    for t in thumbnails {
        if t.height != cell_h || t.width != cell_w {
            return Err(Error::InvalidArgument(format!(
                "thumbnails must share one size; saw {}x{} and {}x{}",
                cell_h, cell_w, t.height, t.width
            )));
        }
    }

    let mid = (grid - 1) as f64 / 2.0;
    let (rows, cols) = if n == 1 {
        (vec![mid], vec![mid])
    } else {
        let pca = Pca2::fit(embeddings)?;
        let coords = pca.project(embeddings)?;
        let xs: Vec<f64> = coords.iter().map(|&(x, _)| x).collect();
        let ys: Vec<f64> = coords.iter().map(|&(_, y)| y).collect();
        (scale_axis(&ys, grid), scale_axis(&xs, grid))
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let di = (rows[i] - mid).powi(2) + (cols[i] - mid).powi(2);
        let dj = (rows[j] - mid).powi(2) + (cols[j] - mid).powi(2);
        dj.partial_cmp(&di)
            .expect("grid coordinates are finite")
            .then_with(|| sample_ids[i].cmp(&sample_ids[j]))
    });

    let mut occupied = vec![false; grid * grid];
    let mut cells = Vec::with_capacity(n);
    for &i in &order {
        let (r, c) = nearest_free_cell(rows[i], cols[i], &occupied, grid)
            .expect("n <= grid capacity leaves a free cell");
        occupied[r * grid + c] = true;
        cells.push((sample_ids[i].clone(), r, c));
    }
    cells.sort();

    let mut composite = ImageArray::zeros(grid * cell_h, grid * cell_w, 3);
    let index_of: std::collections::BTreeMap<&str, usize> = sample_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    for (id, row, col) in &cells {
        let thumb = thumbnails[index_of[id.as_str()]];
        for y in 0..cell_h {
            for x in 0..cell_w {
                for ch in 0..3 {
                    let v = thumb.get(y, x, ch.min(thumb.channels - 1));
                    composite.set(row * cell_h + y, col * cell_w + x, ch, v);
                }
            }
        }
    }
    Ok(GridAssignment {
        grid,
        cells,
        composite,
    })
}

/// How to flatten embeddings to two dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Projection2DMethod {
    Pca,
    /// Delegates to an external executable. `tool` overrides the
    /// `TMA_TSNE_TOOL` environment variable when set.
    ExternalTsne { tool: Option<PathBuf> },
}

impl FromStr for Projection2DMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Projection2DMethod::Pca),
            "external-tsne" => Ok(Projection2DMethod::ExternalTsne { tool: None }),
            other => Err(Error::InvalidArgument(format!(
                "unknown projection method {other:?}; expected \"pca\" or \"external-tsne\""
            ))),
        }
    }
}

/// Writes per-sample 2-D coordinates as a `sample_id,x,y,class_id` CSV.
///
/// The PCA path is fully in-house. The external path exports the embeddings
/// next to the output file, invokes the configured tool on them, joins the
/// returned coordinates with class labels, and records the invocation in a
/// JSON sidecar so the projection's provenance stays with the artifact.
pub fn project_2d_export(
    embeddings: &EmbeddingBatch,
    sample_ids: &[String],
    labels: &[usize],
    method: &Projection2DMethod,
    out_csv: &Path,
) -> Result<()> {
    if embeddings.n < 2 {
        return Err(Error::InvalidArgument(format!(
            "2-D projection needs at least 2 samples, got {}",
            embeddings.n
        )));
    }
    if sample_ids.len() != embeddings.n || labels.len() != embeddings.n {
        return Err(Error::BatchSizeMismatch {
            left: embeddings.n,
            right: sample_ids.len().min(labels.len()),
        });
    }
    let coords: Vec<(f64, f64)> = match method {
        Projection2DMethod::Pca => {
            let pca = Pca2::fit(embeddings)?;
            pca.project(embeddings)?
        }
        Projection2DMethod::ExternalTsne { tool } => {
            let tool: PathBuf = match tool {
                Some(t) => t.clone(),
                None => std::env::var_os(TSNE_TOOL_ENV)
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::ExternalTool {
                        tool: TSNE_TOOL_ENV.to_string(),
                        reason: "environment variable not set".to_string(),
                    })?,
            };
            run_external_tsne(embeddings, sample_ids, labels, &tool, out_csv)?
        }
    };
    let mut out = String::from("sample_id,x,y,class_id\n");
    for (i, (x, y)) in coords.iter().enumerate() {
        out.push_str(&format!("{},{x},{y},{}\n", sample_ids[i], labels[i]));
    }
    std::fs::write(out_csv, out).map_err(io_err(out_csv))
}

fn run_external_tsne(
    embeddings: &EmbeddingBatch,
    sample_ids: &[String],
    labels: &[usize],
    tool: &Path,
    out_csv: &Path,
) -> Result<Vec<(f64, f64)>> {
    let tool_err = |reason: String| Error::ExternalTool {
        tool: tool.display().to_string(),
        reason,
    };
    let embed_path = out_csv.with_extension("tme1");
    EmbeddingFile::from_batch(embeddings, sample_ids, labels)?.save(&embed_path)?;
    let raw_path = out_csv.with_extension("tool.csv");
    let status = Command::new(tool)
        .arg(&embed_path)
        .arg(&raw_path)
        .status()
        .map_err(|e| tool_err(e.to_string()))?;
    if !status.success() {
        return Err(tool_err(format!("exited with {status}")));
    }
    let text = std::fs::read_to_string(&raw_path)
        .map_err(|e| tool_err(format!("reading its output failed: {e}")))?;
    let mut by_id = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(tool_err(format!("malformed output line {line:?}")));
        }
        let x: f64 = fields[1]
            .parse()
            .map_err(|_| tool_err(format!("bad x value {:?}", fields[1])))?;
        let y: f64 = fields[2]
            .parse()
            .map_err(|_| tool_err(format!("bad y value {:?}", fields[2])))?;
        by_id.insert(fields[0].to_string(), (x, y));
    }
    let coords = sample_ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| tool_err(format!("output is missing sample {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let sidecar = serde_json::json!({
        "method": "external-tsne",
        "tool": tool.display().to_string(),
        "embeddings": embed_path.display().to_string(),
        "raw_output": raw_path.display().to_string(),
    });
    let sidecar_path = out_csv.with_extension("json");
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("static JSON serializes"),
    )
    .map_err(io_err(&sidecar_path))?;
    Ok(coords)
}
