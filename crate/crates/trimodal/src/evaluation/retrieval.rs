//! Exact nearest-neighbor retrieval over one embedding batch, and mean
//! average precision over the ranked lists.
//!
//! Retrieval is deliberately brute force: the datasets evaluated here top out
//! around 18k samples, where the full N×N similarity matrix is cheaper and
//! easier to trust than an approximate index.

use crate::contrastive::{similarity_matrix, EmbeddingBatch};
use crate::{Error, Result};

/// One ranked neighbor of a query.
#[derive(Clone, Debug)]
pub struct Neighbor {
    pub sample_id: String,
    pub similarity: f64,
    /// True when the neighbor shares the query's class.
    pub relevant: bool,
}

/// Ranked neighbor list for a single query, self excluded.
#[derive(Clone, Debug)]
pub struct RetrievalResult {
    pub query_id: String,
    pub query_class: usize,
    /// Sorted by similarity descending; equal similarities are ordered by
    /// ascending sample id so runs are reproducible across platforms.
    pub neighbors: Vec<Neighbor>,
    /// Number of same-class items in the whole corpus, excluding the query
    /// itself. Kept here because a truncated neighbor list can no longer
    /// answer it, and average precision needs it as the denominator.
    pub relevant_total: usize,
}

/// Ranks every sample's neighbors by cosine similarity. `k` limits each list
/// to the top k entries; `None` keeps all N−1. Relevance is class equality.
pub fn retrieve(
    embeddings: &EmbeddingBatch,
    labels: &[usize],
    sample_ids: &[String],
    k: Option<usize>,
) -> Result<Vec<RetrievalResult>> {
    if embeddings.n < 2 {
        return Err(Error::InvalidArgument(format!(
            "retrieval needs at least 2 samples, got {}",
            embeddings.n
        )));
    }
    if labels.len() != embeddings.n {
        return Err(Error::BatchSizeMismatch {
            left: embeddings.n,
            right: labels.len(),
        });
    }
    if sample_ids.len() != embeddings.n {
        return Err(Error::BatchSizeMismatch {
            left: embeddings.n,
            right: sample_ids.len(),
        });
    }
    if k == Some(0) {
        return Err(Error::InvalidArgument("k must be at least 1".to_string()));
    }
    let sim = similarity_matrix(embeddings, embeddings)?;
    let n = embeddings.n;
    let keep = k.unwrap_or(n - 1).min(n - 1);
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            sim.at(i, b)
                .partial_cmp(&sim.at(i, a))
                .expect("similarities of normalized embeddings are finite")
                .then_with(|| sample_ids[a].cmp(&sample_ids[b]))
        });
        order.truncate(keep);
        let relevant_total = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        let neighbors = order
            .into_iter()
            .map(|j| Neighbor {
                sample_id: sample_ids[j].clone(),
                similarity: sim.at(i, j),
                relevant: labels[j] == labels[i],
            })
            .collect();
        results.push(RetrievalResult {
            query_id: sample_ids[i].clone(),
            query_class: labels[i],
            neighbors,
            relevant_total,
        });
    }
    Ok(results)
}

/// Mean average precision over ranked lists, summarizing both the score and
/// how many queries could not be scored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapReport {
    pub value: f64,
    /// Queries that contributed to the mean.
    pub included: usize,
    /// Queries skipped because nothing else in the corpus shares their class.
    pub excluded: usize,
}

/// Average precision truncated at `k` (`None` scores the whole list):
/// AP@k = (1/min(R, k)) Σ_{i ≤ k, neighbor i relevant} precision@i, with R
/// the query's corpus-wide relevant count. Queries with R = 0 are excluded
/// from the mean and tallied in the report.
///
/// The neighbor lists must reach depth k; compute them with
/// [`retrieve`] at the same (or larger) k.
pub fn mean_average_precision(
    results: &[RetrievalResult],
    k: Option<usize>,
) -> Result<MapReport> {
    if results.is_empty() {
        return Err(Error::EmptyInput("retrieval results"));
    }
    if k == Some(0) {
        return Err(Error::InvalidArgument("k must be at least 1".to_string()));
    }
    let mut sum = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    for result in results {
        if result.relevant_total == 0 {
            excluded += 1;
            continue;
        }
        let k_eff = k.unwrap_or(result.neighbors.len());
        let depth = k_eff.min(result.neighbors.len());
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, neighbor) in result.neighbors[..depth].iter().enumerate() {
            if neighbor.relevant {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
            }
        }
        sum += precision_sum / result.relevant_total.min(k_eff) as f64;
        included += 1;
    }
    if included == 0 {
        return Err(Error::InvalidArgument(
            "every query has zero relevant items; mean average precision is undefined".to_string(),
        ));
    }
    Ok(MapReport {
        value: sum / included as f64,
        included,
        excluded,
    })
}
