//! `eval`: score a checkpoint on a dataset split.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use trimodal::contrastive::Modality;
use trimodal::datasets::{Dataset, Sample};
use trimodal::encoders::{load_checkpoint, EncoderSet, Vocab};
use trimodal::evaluation::{
    encode_all, mean_average_precision, prompt_confusion, retrieve, ConfusionMatrix,
    RetrievalResult,
};
use trimodal::{Error, Result};

use crate::data::{select_indices, write_invocation, DataSource, SplitChoice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricChoice {
    /// Prompt-classification accuracy.
    Accuracy,
    /// Macro-averaged F1.
    F1,
    /// Mean average precision over image retrieval; honors --k.
    Map,
}

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint file to score.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub source: DataSource,

    /// Which side of the stratified split to score.
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    pub split: SplitChoice,

    /// Held-out fraction the training run used for its split.
    #[arg(long = "test-fraction", default_value_t = 0.2)]
    pub test_fraction: f64,

    /// Base seed of the training run; the split is derived from it.
    #[arg(long = "split-seed", default_value_t = 0)]
    pub split_seed: u64,

    /// Print one metric instead of the full set.
    #[arg(long, value_enum)]
    pub metric: Option<MetricChoice>,

    /// Retrieval depth for --metric map; omit to score full rankings.
    #[arg(long, requires = "metric")]
    pub k: Option<usize>,

    /// Directory the confusion matrix and invocation snapshot land in.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
}

pub fn run(args: &Args) -> Result<()> {
    if args.k.is_some() && args.metric != Some(MetricChoice::Map) {
        return Err(Error::InvalidArgument(
            "--k only applies to --metric map".to_string(),
        ));
    }
    let ds = args.source.load()?;
    let (set, _meta) = load_checkpoint(&args.checkpoint)?;
    check_taxonomy(&set, &ds)?;
    write_invocation(
        &args.out,
        "eval",
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "source": args.source.describe(),
            "split": args.split.name(),
            "test_fraction": args.test_fraction,
            "split_seed": args.split_seed,
            "metric": args.metric.map(|m| format!("{m:?}").to_lowercase()),
            "k": args.k,
        }),
    )?;
    let idxs = select_indices(&ds, args.split, args.test_fraction, args.split_seed)?;
    let samples: Vec<Sample> = idxs.iter().map(|&i| ds.samples[i].clone()).collect();

    match args.metric {
        Some(MetricChoice::Map) => {
            let results = retrieval_results(&set, &ds, &samples)?;
            let value = mean_average_precision(&results, args.k)?.value;
            match args.k {
                Some(k) => println!("mAP@{k} {value:.4}"),
                None => println!("mAP {value:.4}"),
            }
        }
        Some(MetricChoice::Accuracy) => {
            let cm = prompt_confusion(&set, &ds.taxonomy, &samples)?;
            write_confusion(&args.out.join("confusion.csv"), &cm, &ds)?;
            println!("accuracy {:.4}", cm.accuracy()?);
        }
        Some(MetricChoice::F1) => {
            let cm = prompt_confusion(&set, &ds.taxonomy, &samples)?;
            write_confusion(&args.out.join("confusion.csv"), &cm, &ds)?;
            println!("macro_f1 {:.4}", cm.macro_f1()?);
        }
        None => {
            let cm = prompt_confusion(&set, &ds.taxonomy, &samples)?;
            let csv = args.out.join("confusion.csv");
            write_confusion(&csv, &cm, &ds)?;
            let results = retrieval_results(&set, &ds, &samples)?;
            println!("{} samples, split {}", samples.len(), args.split.name());
            println!("accuracy {:.4}", cm.accuracy()?);
            println!("macro_f1 {:.4}", cm.macro_f1()?);
            println!(
                "mAP@5 {:.4}",
                mean_average_precision(&results, Some(5))?.value
            );
            println!("mAP {:.4}", mean_average_precision(&results, None)?.value);
            println!("confusion matrix -> {}", csv.display());
        }
    }
    Ok(())
}

/// The checkpoint's text tower was built for one prompt vocabulary; scoring a
/// dataset with a different taxonomy would silently misread every prompt, so
/// the mismatch is rejected up front.
fn check_taxonomy(set: &EncoderSet, ds: &Dataset) -> Result<()> {
    let expected = &set.text.vocab.tokens;
    let got = Vocab::from_prompts(&ds.prompts())?.tokens;
    if *expected == got {
        return Ok(());
    }
    let got_desc = if expected.len() != got.len() {
        format!(
            "{} prompt tokens from {} classes",
            got.len(),
            ds.n_classes()
        )
    } else {
        let first = expected
            .iter()
            .zip(&got)
            .position(|(a, b)| a != b)
            .unwrap_or(0);
        format!(
            "same token count, but {:?} where the checkpoint has {:?}",
            got[first], expected[first]
        )
    };
    Err(Error::TaxonomyMismatch {
        expected: format!("{} prompt tokens", expected.len()),
        got: got_desc,
    })
}

/// Image-tower retrieval over the selected samples, full-depth neighbor
/// lists so one pass serves both mAP@5 and full mAP.
fn retrieval_results(
    set: &EncoderSet,
    ds: &Dataset,
    samples: &[Sample],
) -> Result<Vec<RetrievalResult>> {
    let embeddings = encode_all(set, samples, &ds.taxonomy, Modality::Image)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    let ids: Vec<String> = samples.iter().map(|s| s.sample_id.clone()).collect();
    retrieve(&embeddings, &labels, &ids, None)
}

/// Rows are true classes, columns predicted classes, both labeled by name.
fn write_confusion(path: &Path, cm: &ConfusionMatrix, ds: &Dataset) -> Result<()> {
    let mut text = String::from("true_class");
    for class in &ds.taxonomy.classes {
        text.push(',');
        text.push_str(&class.name);
    }
    text.push('\n');
    for (row, class) in ds.taxonomy.classes.iter().enumerate() {
        text.push_str(&class.name);
        for col in 0..cm.n_classes() {
            text.push_str(&format!(",{}", cm.at(row, col)));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
