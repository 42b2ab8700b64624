//! Train/test splitting, epoch batching, and batch assembly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::Dataset;
use crate::encoders::ImageTensor;
use crate::raster::ImageArray;
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Per-class test counts: round-half-up of the fraction, clamped so
    /// every class keeps at least one sample on each side.
    Stratified,
    /// One global shuffle, fraction applied to the whole set.
    Uniform,
}

/// Index lists into `Dataset::samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

pub fn split_dataset(
    ds: &Dataset,
    test_fraction: f64,
    mode: SplitMode,
    seed: u64,
) -> Result<Split> {
    ds.validate()?;
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must be strictly between 0 and 1, got {test_fraction}"
        )));
    }
    match mode {
        SplitMode::Stratified => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
            for (i, s) in ds.samples.iter().enumerate() {
                by_class[s.class_id].push(i);
            }
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (class_id, mut members) in by_class.into_iter().enumerate() {
                if members.len() < 2 {
                    return Err(Error::ClassTooSmall {
                        class_id,
                        count: members.len(),
                    });
                }
                let n_test = round_half_up(members.len() as f64 * test_fraction)
                    .clamp(1, members.len() - 1);
                members.shuffle(&mut stream(seed, &format!("split/{class_id}")));
                test.extend_from_slice(&members[..n_test]);
                train.extend_from_slice(&members[n_test..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            Ok(Split { train, test })
        }
        SplitMode::Uniform => {
            if ds.len() < 2 {
                return Err(Error::EmptyInput("dataset with fewer than 2 samples"));
            }
            let mut all: Vec<usize> = (0..ds.len()).collect();
            all.shuffle(&mut stream(seed, "split"));
            let n_test = round_half_up(ds.len() as f64 * test_fraction).clamp(1, ds.len() - 1);
            let mut test = all[..n_test].to_vec();
            let mut train = all[n_test..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            Ok(Split { train, test })
        }
    }
}

/// Shuffles `indices` for one epoch and chops them into batches. The last
/// batch keeps whatever remains, so no sample is dropped.
pub fn epoch_batches(
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".to_string()));
    }
    if indices.is_empty() {
        return Err(Error::EmptyInput("batch indices"));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut stream(seed, &format!("shuffle/{epoch}")));
    Ok(shuffled.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// One assembled training batch: image and symbol tensors plus the per-
/// sample prompts and labels.
#[derive(Debug)]
pub struct ModalBatch {
    pub images: ImageTensor,
    pub symbols: ImageTensor,
    pub prompts: Vec<String>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<String>,
}

/// Random symbol augmentation: quarter turns, horizontal flip, and a small
/// scale jitter. Off by default in training; callers opt in.
pub fn augment_symbol(img: &ImageArray, rng: &mut ChaCha12Rng) -> ImageArray {
    let turns = rng.random_range(0..4usize);
    let flip = rng.random_range(0..2) == 1;
    let scale = rng.random_range(0.9..1.1);
    let mut out = img.rotate90(turns);
    if flip {
        out = out.hflip();
    }
    out.scale_about_center(scale)
}

/// Gathers samples into tensors. When `augment` carries an RNG, each symbol
/// goes through `augment_symbol` first.
pub fn gather_batch(
    ds: &Dataset,
    idxs: &[usize],
    mut augment: Option<&mut ChaCha12Rng>,
) -> Result<ModalBatch> {
    if idxs.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let prompts_by_class = ds.prompts();
    let mut images = Vec::with_capacity(idxs.len());
    let mut symbols_owned: Vec<ImageArray> = Vec::new();
    let mut symbol_refs_shared: Vec<&ImageArray> = Vec::with_capacity(idxs.len());
    let mut prompts = Vec::with_capacity(idxs.len());
    let mut labels = Vec::with_capacity(idxs.len());
    let mut sample_ids = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let s = ds.samples.get(i).ok_or(Error::BadRecord {
            index: i,
            reason: "batch index out of range".to_string(),
        })?;
        images.push(s.image.as_ref());
        match augment.as_deref_mut() {
            Some(rng) => symbols_owned.push(augment_symbol(&s.symbol, rng)),
            None => symbol_refs_shared.push(s.symbol.as_ref()),
        }
        prompts.push(prompts_by_class[s.class_id].clone());
        labels.push(s.class_id);
        sample_ids.push(s.sample_id.clone());
    }
    let image_tensor = ImageTensor::from_arrays(&images)?;
    let symbol_tensor = if symbols_owned.is_empty() {
        ImageTensor::from_arrays(&symbol_refs_shared)?
    } else {
        let refs: Vec<&ImageArray> = symbols_owned.iter().collect();
        ImageTensor::from_arrays(&refs)?
    };
    Ok(ModalBatch {
        images: image_tensor,
        symbols: symbol_tensor,
        prompts,
        labels,
        sample_ids,
    })
}
