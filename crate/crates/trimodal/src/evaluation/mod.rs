//! Classification metrics, retrieval, embedding export, and 2-D projections.
//!
//! Two classification protocols are provided. Prompt matching embeds every
//! class prompt once and predicts the class whose prompt is most cosine-similar
//! to the image embedding; it needs no extra training and is the default.
//! The linear probe fits a softmax classifier on frozen image embeddings and
//! answers the question "how linearly separable is this space" independently
//! of the text tower.

mod embedfile;
mod projection;
mod retrieval;

pub use embedfile::{compute_embeddings, export_embeddings, EmbeddingFile, EmbeddingRecord};
pub use projection::{
    pca_grid, project_2d_export, GridAssignment, Pca2, Projection2DMethod, TSNE_TOOL_ENV,
};
pub use retrieval::{mean_average_precision, retrieve, MapReport, Neighbor, RetrievalResult};

use crate::contrastive::{normalize, EmbeddingBatch, Modality};
use crate::datasets::{ClassTaxonomy, Sample};
use crate::encoders::{EncoderSet, ImageTensor};
use crate::raster::ImageArray;
use crate::{Error, Result};

/// Images and symbols are encoded in chunks of this many samples so that the
/// intermediate activation tensors stay small even on full-resolution data.
pub(crate) const ENCODE_CHUNK: usize = 64;

/// Confusion counts with rows indexed by true class and columns by predicted
/// class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    /// Builds the matrix from aligned truth/prediction slices, validating
    /// that every label is inside the taxonomy.
    pub fn from_predictions(
        n_classes: usize,
        truths: &[usize],
        predictions: &[usize],
    ) -> Result<Self> {
        if truths.len() != predictions.len() {
            return Err(Error::BatchSizeMismatch {
                left: truths.len(),
                right: predictions.len(),
            });
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in truths.iter().zip(predictions) {
            for label in [t, p] {
                if label >= n_classes {
                    return Err(Error::UnknownClass {
                        class_id: label,
                        n_classes,
                    });
                }
            }
            cm.record(t, p);
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.n_classes + predicted] += 1;
    }

    pub fn at(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.n_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.at(class, p)).sum()
    }

    fn col_sum(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|t| self.at(t, class)).sum()
    }

    /// Fraction of samples on the diagonal.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyInput("confusion matrix"));
        }
        let trace: u64 = (0..self.n_classes).map(|c| self.at(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Unweighted mean of per-class F1 scores.
    ///
    /// A class with no true samples (its row sums to zero) is absent from the
    /// test split and is excluded from the mean, even if the classifier
    /// predicted it. For classes that are present, an undefined precision
    /// (no predictions at all) and the resulting 0/0 both count as an F1 of
    /// zero rather than being skipped.
    pub fn macro_f1(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::EmptyInput("confusion matrix"));
        }
        let mut sum = 0.0;
        let mut included = 0usize;
        for c in 0..self.n_classes {
            let truth = self.row_sum(c);
            if truth == 0 {
                continue;
            }
            included += 1;
            let tp = self.at(c, c) as f64;
            let predicted = self.col_sum(c) as f64;
            let precision = if predicted == 0.0 { 0.0 } else { tp / predicted };
            let recall = tp / truth as f64;
            if precision + recall > 0.0 {
                sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        Ok(sum / included as f64)
    }
}

/// Predicts, for every image row, the index of the most cosine-similar prompt
/// row. Both batches must be normalized and share the embedding dimension.
/// Ties go to the lowest class index.
pub fn nearest_prompt(images: &EmbeddingBatch, prompts: &EmbeddingBatch) -> Result<Vec<usize>> {
    if !images.normalized {
        return Err(Error::UnnormalizedInput {
            modality: images.modality.name(),
        });
    }
    if !prompts.normalized {
        return Err(Error::UnnormalizedInput {
            modality: prompts.modality.name(),
        });
    }
    if images.dim != prompts.dim {
        return Err(Error::DimMismatch {
            left: images.dim,
            right: prompts.dim,
        });
    }
    if prompts.n == 0 {
        return Err(Error::EmptyInput("prompts"));
    }
    let mut out = Vec::with_capacity(images.n);
    for i in 0..images.n {
        let row = images.row(i);
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for k in 0..prompts.n {
            let sim: f64 = row.iter().zip(prompts.row(k)).map(|(a, b)| a * b).sum();
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Zero-shot style classification: embeds all class prompts once, then labels
/// each image with the class of its nearest prompt.
pub fn classify_by_prompt(
    set: &EncoderSet,
    taxonomy: &ClassTaxonomy,
    images: &[&ImageArray],
) -> Result<Vec<usize>> {
    let prompts = taxonomy.prompts();
    let prompt_emb = normalize(&set.encode_texts(&prompts)?)?;
    let mut predictions = Vec::with_capacity(images.len());
    for chunk in images.chunks(ENCODE_CHUNK) {
        let tensor = ImageTensor::from_arrays(chunk)?;
        let emb = normalize(&set.encode_images(&tensor)?)?;
        predictions.extend(nearest_prompt(&emb, &prompt_emb)?);
    }
    Ok(predictions)
}

/// Runs prompt classification over a sample list and tallies the confusion
/// matrix against the stored class ids.
pub fn prompt_confusion(
    set: &EncoderSet,
    taxonomy: &ClassTaxonomy,
    samples: &[Sample],
) -> Result<ConfusionMatrix> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("samples"));
    }
    let images: Vec<&ImageArray> = samples.iter().map(|s| s.image.as_ref()).collect();
    let predictions = classify_by_prompt(set, taxonomy, &images)?;
    let truths: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    ConfusionMatrix::from_predictions(taxonomy.classes.len(), &truths, &predictions)
}

/// Encodes one modality for a whole sample list, chunked, returning
/// normalized embeddings. Text rows use each sample's class prompt, so two
/// samples of the same class share a text embedding.
pub fn encode_all(
    set: &EncoderSet,
    samples: &[Sample],
    taxonomy: &ClassTaxonomy,
    modality: Modality,
) -> Result<EmbeddingBatch> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("samples"));
    }
    let raw = match modality {
        Modality::Text => {
            let prompts: Vec<String> = samples
                .iter()
                .map(|s| taxonomy.classes[s.class_id].prompt())
                .collect();
            set.encode_texts(&prompts)?
        }
        Modality::Image | Modality::Symbol => {
            let mut vectors = Vec::new();
            let mut dim = 0;
            for chunk in samples.chunks(ENCODE_CHUNK) {
                let arrays: Vec<&ImageArray> = chunk
                    .iter()
                    .map(|s| match modality {
                        Modality::Image => s.image.as_ref(),
                        _ => s.symbol.as_ref(),
                    })
                    .collect();
                let tensor = ImageTensor::from_arrays(&arrays)?;
                let emb = match modality {
                    Modality::Image => set.encode_images(&tensor)?,
                    _ => set.encode_symbols(&tensor)?,
                };
                dim = emb.dim;
                vectors.extend_from_slice(&emb.vectors);
            }
            EmbeddingBatch::new(modality, samples.len(), dim, vectors)?
        }
    };
    normalize(&raw)
}

/// Options for the linear probe trained on frozen embeddings.
#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            epochs: 300,
            learning_rate: 0.5,
        }
    }
}

/// Trains a multinomial logistic-regression head on frozen train embeddings
/// (full-batch gradient descent from a zero init, so the fit is
/// deterministic) and returns the confusion matrix on the test embeddings.
pub fn linear_probe(
    train: &EmbeddingBatch,
    train_labels: &[usize],
    test: &EmbeddingBatch,
    test_labels: &[usize],
    n_classes: usize,
    opts: &ProbeOptions,
) -> Result<ConfusionMatrix> {
    if train.n == 0 || test.n == 0 {
        return Err(Error::EmptyInput("probe embeddings"));
    }
    if train.n != train_labels.len() {
        return Err(Error::BatchSizeMismatch {
            left: train.n,
            right: train_labels.len(),
        });
    }
    if test.n != test_labels.len() {
        return Err(Error::BatchSizeMismatch {
            left: test.n,
            right: test_labels.len(),
        });
    }
    if train.dim != test.dim {
        return Err(Error::DimMismatch {
            left: train.dim,
            right: test.dim,
        });
    }
    for &l in train_labels.iter().chain(test_labels) {
        if l >= n_classes {
            return Err(Error::UnknownClass {
                class_id: l,
                n_classes,
            });
        }
    }
    let d = train.dim;
    let mut weight = vec![0.0f64; n_classes * d];
    let mut bias = vec![0.0f64; n_classes];
    let inv_n = 1.0 / train.n as f64;
    let mut probs = vec![0.0f64; n_classes];
    for _ in 0..opts.epochs {
        let mut d_weight = vec![0.0f64; n_classes * d];
        let mut d_bias = vec![0.0f64; n_classes];
        for (i, &label) in train_labels.iter().enumerate() {
            let x = train.row(i);
            softmax_logits(&weight, &bias, x, &mut probs);
            for (k, &p) in probs.iter().enumerate() {
                let delta = p - if k == label { 1.0 } else { 0.0 };
                d_bias[k] += delta * inv_n;
                for (dw, &xv) in d_weight[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *dw += delta * xv * inv_n;
                }
            }
        }
        for (w, g) in weight.iter_mut().zip(&d_weight) {
            *w -= opts.learning_rate * g;
        }
        for (b, g) in bias.iter_mut().zip(&d_bias) {
            *b -= opts.learning_rate * g;
        }
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (i, &label) in test_labels.iter().enumerate() {
        softmax_logits(&weight, &bias, test.row(i), &mut probs);
        let mut best = 0usize;
        for k in 1..n_classes {
            if probs[k] > probs[best] {
                best = k;
            }
        }
        cm.record(label, best);
    }
    Ok(cm)
}

fn softmax_logits(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = bias[k] + weight[k * d..(k + 1) * d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
