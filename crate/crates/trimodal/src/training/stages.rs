//! The two stage loops: batched forward, analytic backward, Adam updates.
//!
//! Stage 1 pushes both image and symbol batches through the one shared
//! visual tower, so its gradients arrive as the sum of both contributions.
//! Stage 2 runs three separate towers and carves a small validation slice
//! out of its training indices to pick a best checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::contrastive::{
    normalize, normalize_backward, stage1_loss_grad, stage2_loss_grad, stage2_loss_with,
    EmbeddingBatch, LossBreakdown, LossOptions, Modality,
};
use crate::datasets::{epoch_batches, gather_batch, Dataset, ModalBatch};
use crate::encoders::{save_checkpoint, EncoderSet};
use crate::rng::stream;
use crate::{Error, Result};

use super::{Adam, ExperimentConfig, Variant};

/// Offset added to stage-2 epoch indices when deriving shuffle streams, so
/// the two stages never reuse an epoch's batch order even under the same
/// seed.
const STAGE2_SHUFFLE_BASE: u64 = 1 << 32;

/// Fraction of the training indices stage 2 holds out for checkpoint
/// selection.
const VALIDATION_FRACTION: f64 = 0.1;

/// Where stage loops may write checkpoints: the best-by-validation file
/// during stage 2 and the last finite state when a loss turns non-finite.
#[derive(Clone, Copy, Debug)]
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub config_digest: &'a str,
}

/// Loss summary of one epoch. Means are per sample, not per batch, so a
/// short tail batch does not skew the value.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    /// Zero-based index within its stage.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Per-pair means, keyed like `LossBreakdown::per_pair`.
    pub per_pair: BTreeMap<String, f64>,
    /// Temperature value (tau) after the epoch's last update.
    pub temperature: f64,
    /// Stage-2 validation loss, when a validation slice exists.
    pub val_loss: Option<f64>,
}

struct EpochTally {
    loss_sum: f64,
    pair_sums: BTreeMap<String, f64>,
    samples: usize,
}

impl EpochTally {
    fn new() -> Self {
        EpochTally {
            loss_sum: 0.0,
            pair_sums: BTreeMap::new(),
            samples: 0,
        }
    }

    fn add(&mut self, breakdown: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.loss_sum += breakdown.total * w;
        for (k, v) in &breakdown.per_pair {
            *self.pair_sums.entry(k.clone()).or_insert(0.0) += v * w;
        }
        self.samples += n;
    }

    fn finish(self, stage: u8, epoch: usize, temperature: f64, val_loss: Option<f64>) -> EpochRecord {
        let w = self.samples as f64;
        EpochRecord {
            stage,
            epoch,
            mean_loss: self.loss_sum / w,
            per_pair: self
                .pair_sums
                .into_iter()
                .map(|(k, v)| (k, v / w))
                .collect(),
            temperature,
            val_loss,
        }
    }
}

/// Forward and backward for one batch. Gradients accumulate into the
/// encoder parameters; the temperature gradient is returned for the
/// optimizer. The caller checks the loss for finiteness before stepping, so
/// parameters are still untouched if this batch diverged.
fn train_step(
    set: &mut EncoderSet,
    batch: &ModalBatch,
    stage: u8,
    bimodal: bool,
    opts: LossOptions,
) -> Result<(LossBreakdown, f64)> {
    let n = batch.images.n;
    let d = set.image.spec.embed_dim;

    let (img_vec, img_cache) = set.image.forward_train(&batch.images)?;
    let img_raw = EmbeddingBatch::new(Modality::Image, n, d, img_vec)?;
    let z_img = normalize(&img_raw)?;

    let sym = if bimodal {
        None
    } else {
        let tower = match &set.symbol {
            Some(s) if stage == 2 => s,
            _ => &set.image,
        };
        let (sym_vec, sym_cache) = tower.forward_train(&batch.symbols)?;
        let sym_raw = EmbeddingBatch::new(Modality::Symbol, n, d, sym_vec)?;
        let z_sym = normalize(&sym_raw)?;
        Some((sym_raw, z_sym, sym_cache))
    };

    let (txt_vec, txt_cache) = set.text.forward_train(&batch.prompts)?;
    let txt_raw = EmbeddingBatch::new(Modality::Text, n, set.text.embed_dim, txt_vec)?;
    let z_txt = normalize(&txt_raw)?;

    let labels = if opts.label_masked_negatives {
        Some(batch.labels.as_slice())
    } else {
        None
    };
    let z_sym_ref = sym.as_ref().map(|(_, z, _)| z);
    let (breakdown, grads) = if stage == 1 {
        stage1_loss_grad(&z_img, z_sym_ref, &z_txt, &set.temperature, opts, labels)?
    } else {
        stage2_loss_grad(&z_img, z_sym_ref, &z_txt, &set.temperature, opts, labels)?
    };

    let d_img = normalize_backward(&img_raw, &grads.d_img);
    set.image.backward(&img_cache, &d_img);
    if let (Some((sym_raw, _, sym_cache)), Some(d_sym_norm)) = (&sym, &grads.d_sym) {
        let d_sym = normalize_backward(sym_raw, d_sym_norm);
        match (&mut set.symbol, stage) {
            (Some(tower), 2) => tower.backward(sym_cache, &d_sym),
            // Stage 1 shares the image tower, so symbol gradients land on
            // top of the image gradients.
            _ => set.image.backward(sym_cache, &d_sym),
        }
    }
    let d_txt = normalize_backward(&txt_raw, &grads.d_txt);
    set.text.backward(&txt_cache, &d_txt);

    Ok((breakdown, grads.d_log_inverse_tau))
}

fn abort_non_finite(
    set: &EncoderSet,
    stage: u8,
    epoch: usize,
    batch: usize,
    sink: Option<CheckpointSink<'_>>,
) -> Error {
    // The optimizer never stepped on this batch, so the set still holds the
    // last finite parameters. A failure to write the rescue checkpoint is
    // swallowed: the non-finite abort is the diagnosis that matters.
    let checkpoint = sink.and_then(|s| {
        let path = s.dir.join("last-finite.tma1");
        save_checkpoint(set, epoch as u64, s.config_digest, &path)
            .ok()
            .map(|_| path)
    });
    Error::NonFiniteLoss {
        stage,
        epoch,
        batch,
        checkpoint,
    }
}

/// Warm-up: images and symbols share one visual tower, aligned against the
/// text tower for `epochs` epochs. Returns the updated set, still in stage
/// 1, and one record per epoch.
///
/// `optimizer` is supplied by the caller so stage boundaries can be
/// verified through its step counter; pass a fresh or freshly reset one.
#[allow(clippy::too_many_arguments)]
pub fn run_stage1(
    mut set: EncoderSet,
    ds: &Dataset,
    train_idxs: &[usize],
    config: &ExperimentConfig,
    epochs: usize,
    seed: u64,
    optimizer: &mut Adam,
    sink: Option<CheckpointSink<'_>>,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<(EncoderSet, Vec<EpochRecord>)> {
    if set.stage() != 1 {
        return Err(Error::StageMismatch {
            expected: 1,
            got: set.stage(),
        });
    }
    let bimodal = config.variant == Variant::Bimodal;
    let opts = LossOptions {
        symmetric: config.symmetric_loss,
        label_masked_negatives: config.label_masked_negatives,
    };
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches = epoch_batches(train_idxs, config.batch_size, seed, epoch as u64)?;
        let mut aug = config
            .augment_symbols
            .then(|| stream(seed, &format!("augment/1/{epoch}")));
        let mut tally = EpochTally::new();
        for (b, idxs) in batches.iter().enumerate() {
            let batch = gather_batch(ds, idxs, aug.as_mut())?;
            let (breakdown, d_theta) = train_step(&mut set, &batch, 1, bimodal, opts)?;
            if !breakdown.total.is_finite() {
                return Err(abort_non_finite(&set, 1, epoch, b, sink));
            }
            optimizer.step(&mut set, d_theta)?;
            set.zero_grads();
            tally.add(&breakdown, idxs.len());
        }
        let record = tally.finish(1, epoch, set.temperature.tau(), None);
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&record);
        }
        history.push(record);
    }
    Ok((set, history))
}

/// Splits `idxs` into (train, validation) per class. Classes keep at least
/// one training member; singleton classes contribute nothing to validation.
fn carve_validation(ds: &Dataset, idxs: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in idxs {
        by_class.entry(ds.samples[i].class_id).or_default().push(i);
    }
    let mut rng = stream(seed, "stage2/validation");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut members) in by_class {
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64 * VALIDATION_FRACTION) + 0.5).floor() as usize;
        let n_val = n_val.min(members.len().saturating_sub(1));
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Stage-2 loss over a fixed index list, without gradients. Used for the
/// validation curve.
fn evaluation_loss(
    set: &EncoderSet,
    ds: &Dataset,
    idxs: &[usize],
    config: &ExperimentConfig,
    bimodal: bool,
    opts: LossOptions,
) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut samples = 0usize;
    for chunk in idxs.chunks(config.batch_size) {
        let batch = gather_batch(ds, chunk, None)?;
        let z_img = normalize(&set.encode_images(&batch.images)?)?;
        let z_sym = if bimodal {
            None
        } else {
            Some(normalize(&set.encode_symbols(&batch.symbols)?)?)
        };
        let z_txt = normalize(&set.encode_texts(&batch.prompts)?)?;
        let labels = if opts.label_masked_negatives {
            Some(batch.labels.as_slice())
        } else {
            None
        };
        let breakdown = stage2_loss_with(
            &z_img,
            z_sym.as_ref(),
            &z_txt,
            &set.temperature,
            opts,
            labels,
        )?;
        loss_sum += breakdown.total * chunk.len() as f64;
        samples += chunk.len();
    }
    Ok(loss_sum / samples as f64)
}

/// Joint fine-tuning: all towers and the temperature train against the
/// three-pair loss. A tenth of the given indices is held out per class; the
/// epoch with the lowest held-out loss is saved to `stage2-best.tma1` when
/// a sink is present.
///
/// The set must already be in stage 2 unless the variant is bimodal, in
/// which case no symbol tower exists at any point.
#[allow(clippy::too_many_arguments)]
pub fn run_stage2(
    mut set: EncoderSet,
    ds: &Dataset,
    train_idxs: &[usize],
    config: &ExperimentConfig,
    epochs: usize,
    seed: u64,
    optimizer: &mut Adam,
    sink: Option<CheckpointSink<'_>>,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<(EncoderSet, Vec<EpochRecord>)> {
    let bimodal = config.variant == Variant::Bimodal;
    if !bimodal && set.stage() != 2 {
        return Err(Error::StageMismatch {
            expected: 2,
            got: set.stage(),
        });
    }
    let opts = LossOptions {
        symmetric: config.symmetric_loss,
        label_masked_negatives: config.label_masked_negatives,
    };
    let mut history = Vec::with_capacity(epochs);
    if epochs == 0 {
        return Ok((set, history));
    }

    let (fit_idxs, val_idxs) = carve_validation(ds, train_idxs, seed);
    let mut best_val = f64::INFINITY;
    for epoch in 0..epochs {
        let batches = epoch_batches(
            &fit_idxs,
            config.batch_size,
            seed,
            STAGE2_SHUFFLE_BASE + epoch as u64,
        )?;
        let mut aug = config
            .augment_symbols
            .then(|| stream(seed, &format!("augment/2/{epoch}")));
        let mut tally = EpochTally::new();
        for (b, idxs) in batches.iter().enumerate() {
            let batch = gather_batch(ds, idxs, aug.as_mut())?;
            let (breakdown, d_theta) = train_step(&mut set, &batch, 2, bimodal, opts)?;
            if !breakdown.total.is_finite() {
                return Err(abort_non_finite(&set, 2, epoch, b, sink));
            }
            optimizer.step(&mut set, d_theta)?;
            set.zero_grads();
            tally.add(&breakdown, idxs.len());
        }
        let val_loss = if val_idxs.is_empty() {
            None
        } else {
            Some(evaluation_loss(&set, ds, &val_idxs, config, bimodal, opts)?)
        };
        if let (Some(s), Some(vl)) = (sink, val_loss) {
            // Strictly lower keeps the earliest epoch on ties, so the saved
            // file is deterministic.
            if vl < best_val {
                best_val = vl;
                save_checkpoint(
                    &set,
                    epoch as u64,
                    s.config_digest,
                    &s.dir.join("stage2-best.tma1"),
                )?;
            }
        }
        let record = tally.finish(2, epoch, set.temperature.tau(), val_loss);
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&record);
        }
        history.push(record);
    }
    Ok((set, history))
}
