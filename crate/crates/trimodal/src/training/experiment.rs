//! Repeated-run orchestration: builds encoders, walks the variant's phase
//! plan, evaluates the final model, and persists everything under
//! `runs/<name>/<seed>/`.
//!
//! Each run directory is written incrementally (config snapshot first, then
//! history, metrics, checkpoints), so when a later repeat fails the earlier
//! results survive on disk. Wall-clock time goes into a separate
//! timing.json so metrics.json stays byte-identical across repeated
//! invocations of the same config and seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::contrastive::Modality;
use crate::datasets::{split_dataset, Dataset, Sample, SplitMode};
use crate::encoders::{
    build_toy_encoders, load_pretrained, registry, save_checkpoint, transfer_symbol_encoder,
    ConvEncoder, ConvSpec, EncoderSet, TemperatureParam, TextEncoder, Vocab,
};
use crate::error::io_err;
use crate::evaluation::{encode_all, mean_average_precision, prompt_confusion, retrieve};
use crate::rng::stream;
use crate::{Error, Result};

use super::{
    load_dataset, resolve_variant, run_stage1, run_stage2, Adam, CheckpointSink, EncoderConfig,
    EpochRecord, ExperimentConfig, Phase, Variant,
};

/// Everything one seeded run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    /// Phases actually executed, in order.
    pub phases: Vec<Phase>,
    pub loss_history: Vec<EpochRecord>,
    /// Final held-out metrics plus the last training loss values.
    pub metrics: BTreeMap<String, f64>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_seconds: f64,
}

/// Aggregate over all repeats of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub runs: Vec<RunRecord>,
    pub metric_means: BTreeMap<String, f64>,
    /// Sample standard deviation (n-1 denominator); zero when repeats = 1.
    pub metric_stds: BTreeMap<String, f64>,
}

/// Progress notifications emitted while an experiment runs.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    RunStarted { seed: u64, run_dir: &'a Path },
    Epoch(&'a EpochRecord),
    RunFinished { seed: u64, metrics: &'a BTreeMap<String, f64> },
}

/// Builds the encoder set a config asks for. The scratch variant ignores
/// any pretrained weights and random-initializes the descriptor's topology
/// instead; the dataset's prompts always define the text vocabulary for
/// freshly initialized text towers.
fn build_encoders(config: &ExperimentConfig, ds: &Dataset, seed: u64) -> Result<EncoderSet> {
    let sample = ds.samples.first().ok_or(Error::EmptyInput("dataset"))?;
    let (h, w) = (sample.image.height, sample.image.width);
    if h != w {
        return Err(Error::ShapeMismatch {
            expected: "square training images".to_string(),
            got: format!("{h}x{w}"),
        });
    }
    match &config.encoder {
        EncoderConfig::Toy { embed_dim } => {
            let vocab = Vocab::from_prompts(&ds.prompts())?;
            build_toy_encoders(*embed_dim, h, vocab, seed)
        }
        EncoderConfig::Pretrained { name, weights } => {
            if config.variant == Variant::Scratch {
                let desc = registry().get(name.as_str()).ok_or_else(|| {
                    Error::UnknownDescriptor { name: name.clone() }
                })?;
                if desc.image_size != h {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{0}x{0} images for {name}", desc.image_size),
                        got: format!("{h}x{w}; resize the dataset at ingest"),
                    });
                }
                let spec = ConvSpec {
                    image_size: desc.image_size,
                    channels: desc.image_channels.clone(),
                    embed_dim: desc.embed_dim,
                    pixel_mean: desc.pixel_mean,
                    pixel_std: desc.pixel_std,
                };
                let image = ConvEncoder::new(spec, &mut stream(seed, "init/image"))?;
                let vocab = Vocab::from_prompts(&ds.prompts())?;
                let text = TextEncoder::new(
                    vocab,
                    desc.token_dim,
                    desc.embed_dim,
                    &mut stream(seed, "init/text"),
                )?;
                Ok(EncoderSet {
                    image,
                    symbol: None,
                    text,
                    temperature: TemperatureParam::default(),
                })
            } else {
                let set = load_pretrained(name, weights)?;
                if set.image.spec.image_size != h {
                    return Err(Error::ShapeMismatch {
                        expected: format!(
                            "{0}x{0} images for {name}",
                            set.image.spec.image_size
                        ),
                        got: format!("{h}x{w}; resize the dataset at ingest"),
                    });
                }
                Ok(set)
            }
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

fn pair_metric_key(pair: &str) -> String {
    format!("loss_{}", pair.replace('-', "_"))
}

fn loss_history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("stage,epoch,mean_loss,img_txt,img_sym,sym_txt,temperature,val_loss\n");
    for r in history {
        let pair = |k: &str| {
            r.per_pair
                .get(k)
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.stage,
            r.epoch,
            r.mean_loss,
            pair("img-txt"),
            pair("img-sym"),
            pair("sym-txt"),
            r.temperature,
            val
        ));
    }
    out
}

/// Held-out metrics of a trained set: prompt-classification accuracy and
/// macro F1, plus image-to-image retrieval mAP at 5 and over the full
/// ranking.
fn final_metrics(
    set: &EncoderSet,
    ds: &Dataset,
    test_idxs: &[usize],
) -> Result<BTreeMap<String, f64>> {
    let samples: Vec<Sample> = test_idxs.iter().map(|&i| ds.samples[i].clone()).collect();
    let cm = prompt_confusion(set, &ds.taxonomy, &samples)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".to_string(), cm.accuracy()?);
    metrics.insert("macro_f1".to_string(), cm.macro_f1()?);

    let embeddings = encode_all(set, &samples, &ds.taxonomy, Modality::Image)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
    let results = retrieve(&embeddings, &labels, &ids, None)?;
    metrics.insert(
        "map_at_5".to_string(),
        mean_average_precision(&results, Some(5))?.value,
    );
    metrics.insert(
        "map".to_string(),
        mean_average_precision(&results, None)?.value,
    );
    Ok(metrics)
}

fn run_single(
    config: &ExperimentConfig,
    ds: &Dataset,
    train_idxs: &[usize],
    test_idxs: &[usize],
    seed: u64,
    run_dir: &Path,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<RunRecord> {
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    // Snapshot before any work so a failed run still documents what it was.
    write_text(&run_dir.join("config.toml"), &config.to_toml_string())?;
    on_event(TrainEvent::RunStarted { seed, run_dir });

    let started = Instant::now();
    let digest = config.digest();
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let sink = CheckpointSink {
        dir: &ckpt_dir,
        config_digest: &digest,
    };

    let mut set = build_encoders(config, ds, seed)?;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut checkpoints = Vec::new();
    let mut optimizer = Adam::new(config.learning_rate, config.weight_decay);
    let phases = resolve_variant(config);

    for phase in &phases {
        match *phase {
            Phase::Stage1 { epochs } => {
                let mut forward = |r: &EpochRecord| on_event(TrainEvent::Epoch(r));
                let (next, mut records) = run_stage1(
                    set,
                    ds,
                    train_idxs,
                    config,
                    epochs,
                    seed,
                    &mut optimizer,
                    Some(sink),
                    Some(&mut forward as &mut dyn FnMut(&EpochRecord)),
                )?;
                set = next;
                history.append(&mut records);
                let path = ckpt_dir.join("stage1.tma1");
                save_checkpoint(&set, epochs as u64, &digest, &path)?;
                checkpoints.push(path);
            }
            Phase::Transfer => {
                set = transfer_symbol_encoder(set)?;
            }
            Phase::Stage2 { epochs } => {
                // v2 has no transfer phase: the symbol tower splits off from
                // the base initialization right here, unwarmed.
                if config.variant == Variant::V2 && set.stage() == 1 {
                    set = transfer_symbol_encoder(set)?;
                }
                // Fresh moments at the stage boundary: the parameter list
                // changes shape when the symbol tower appears, and stale
                // stage-1 moments would be misaligned anyway.
                optimizer.reset();
                let mut forward = |r: &EpochRecord| on_event(TrainEvent::Epoch(r));
                let (next, mut records) = run_stage2(
                    set,
                    ds,
                    train_idxs,
                    config,
                    epochs,
                    seed,
                    &mut optimizer,
                    Some(sink),
                    Some(&mut forward as &mut dyn FnMut(&EpochRecord)),
                )?;
                set = next;
                history.append(&mut records);
                let path = ckpt_dir.join("stage2.tma1");
                save_checkpoint(&set, epochs as u64, &digest, &path)?;
                checkpoints.push(path);
            }
        }
    }

    let best = ckpt_dir.join("stage2-best.tma1");
    if best.exists() {
        checkpoints.push(best);
    }

    let mut metrics = final_metrics(&set, ds, test_idxs)?;
    if let Some(last) = history.last() {
        metrics.insert("final_loss".to_string(), last.mean_loss);
        for (pair, v) in &last.per_pair {
            metrics.insert(pair_metric_key(pair), *v);
        }
    }

    write_text(&run_dir.join("loss_history.csv"), &loss_history_csv(&history))?;
    let metrics_json =
        serde_json::to_string_pretty(&metrics).expect("metrics serialize to JSON");
    write_text(&run_dir.join("metrics.json"), &format!("{metrics_json}\n"))?;

    let wall_seconds = started.elapsed().as_secs_f64();
    write_text(
        &run_dir.join("timing.json"),
        &format!("{{\n  \"wall_seconds\": {wall_seconds}\n}}\n"),
    )?;
    on_event(TrainEvent::RunFinished {
        seed,
        metrics: &metrics,
    });

    Ok(RunRecord {
        seed,
        phases,
        loss_history: history,
        metrics,
        checkpoints,
        wall_seconds,
    })
}

fn aggregate(runs: &[RunRecord]) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let mut means = BTreeMap::new();
    let mut stds = BTreeMap::new();
    if runs.is_empty() {
        return (means, stds);
    }
    let n = runs.len() as f64;
    for key in runs[0].metrics.keys() {
        let values: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(key)).copied().collect();
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1.0)).sqrt()
        };
        means.insert(key.clone(), mean);
        stds.insert(key.clone(), std);
    }
    (means, stds)
}

fn summary_json(report: &ExperimentReport) -> String {
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        name: &'a str,
        repeats: usize,
        seeds: Vec<u64>,
        means: &'a BTreeMap<String, f64>,
        stds: &'a BTreeMap<String, f64>,
    }
    let s = Summary {
        name: &report.name,
        repeats: report.runs.len(),
        seeds: report.runs.iter().map(|r| r.seed).collect(),
        means: &report.metric_means,
        stds: &report.metric_stds,
    };
    serde_json::to_string_pretty(&s).expect("summary serializes to JSON")
}

/// Runs the full experiment: `repeats` seeded runs of the variant's phase
/// plan, with per-run artifacts under `<runs_root>/<name>/<seed>/` and a
/// summary.json of metric means and sample standard deviations beside the
/// seed directories. Any single run failure aborts the experiment; runs
/// already completed stay on disk.
pub fn run_experiment(config: &ExperimentConfig, runs_root: &Path) -> Result<ExperimentReport> {
    run_experiment_with(config, runs_root, &mut |_| {})
}

/// [`run_experiment`] with a progress callback.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    runs_root: &Path,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<ExperimentReport> {
    let ds = load_dataset(&config.dataset)?;
    // The split is seeded by the base seed only, so every repeat trains and
    // tests on the same partition and the spread reflects training
    // stochasticity alone.
    let split = split_dataset(&ds, config.test_fraction, SplitMode::Stratified, config.seed)?;

    let exp_dir = runs_root.join(&config.name);
    let mut runs = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let seed = config.seed + r as u64;
        let run_dir = exp_dir.join(seed.to_string());
        runs.push(run_single(
            config,
            &ds,
            &split.train,
            &split.test,
            seed,
            &run_dir,
            on_event,
        )?);
    }

    let (metric_means, metric_stds) = aggregate(&runs);
    let report = ExperimentReport {
        name: config.name.clone(),
        runs,
        metric_means,
        metric_stds,
    };
    write_text(
        &exp_dir.join("summary.json"),
        &format!("{}\n", summary_json(&report)),
    )?;
    Ok(report)
}
