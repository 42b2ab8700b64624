//! `search`: rank the corpus by similarity to a query image.

use std::path::PathBuf;

use trimodal::contrastive::{normalize, Modality};
use trimodal::encoders::{load_checkpoint, ImageTensor};
use trimodal::evaluation::encode_all;
use trimodal::raster::ImageArray;
use trimodal::{Error, Result};

use crate::data::{write_invocation, DataSource};
use crate::render;

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint whose image tower embeds the query and the corpus.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub source: DataSource,

    /// Sample id from the dataset to use as the query.
    #[arg(
        long,
        value_name = "ID",
        required_unless_present = "image",
        conflicts_with = "image"
    )]
    pub query: Option<String>,

    /// Query with an on-disk PNG instead of a dataset sample; it is embedded
    /// on the fly and must match the dataset's image size.
    #[arg(long, value_name = "PNG")]
    pub image: Option<PathBuf>,

    /// How many neighbors to return.
    #[arg(long, default_value_t = 7)]
    pub k: usize,

    /// Render the query plus its neighbors into one contact sheet PNG.
    #[arg(long, value_name = "PNG")]
    pub sheet: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<()> {
    let ds = args.source.load()?;
    let (set, _meta) = load_checkpoint(&args.checkpoint)?;

    if args.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".to_string()));
    }
    if args.k + 1 > ds.len() {
        return Err(Error::KTooLarge {
            k: args.k,
            n: ds.len(),
        });
    }
    // Resolve the query before any heavy work so a typo fails fast.
    let loaded_query: Option<ImageArray> = match &args.image {
        Some(path) => Some(ImageArray::load_png(path)?),
        None => None,
    };
    let query_idx: Option<usize> = match &args.query {
        Some(id) => Some(
            ds.samples
                .iter()
                .position(|s| s.sample_id == *id)
                .ok_or_else(|| Error::UnknownQuery { id: id.clone() })?,
        ),
        None => None,
    };
    if let Some(sheet_path) = &args.sheet {
        let dir = match sheet_path.parent() {
            Some(parent) if !parent.as_os_str().is_empty() => parent.to_path_buf(),
            _ => PathBuf::from("."),
        };
        write_invocation(
            &dir,
            "search",
            serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "source": args.source.describe(),
                "query": args.query,
                "image": args.image.as_ref().map(|p| p.display().to_string()),
                "k": args.k,
                "sheet": sheet_path.display().to_string(),
            }),
        )?;
    }

    let corpus = encode_all(&set, &ds.samples, &ds.taxonomy, Modality::Image)?;
    let (query_vec, query_thumb): (Vec<f64>, &ImageArray) = match (&loaded_query, query_idx) {
        (Some(img), _) => {
            let tensor = ImageTensor::from_arrays(&[img])?;
            let embedded = normalize(&set.encode_images(&tensor)?)?;
            (embedded.row(0).to_vec(), img)
        }
        (None, Some(idx)) => (corpus.row(idx).to_vec(), ds.samples[idx].image.as_ref()),
        (None, None) => unreachable!("clap requires --query or --image"),
    };

    // Similarity descending, ties broken by ascending sample id, matching the
    // evaluation module's retrieval ordering.
    let mut scored: Vec<(usize, f64)> = (0..corpus.n)
        .filter(|&j| Some(j) != query_idx)
        .map(|j| {
            let sim: f64 = query_vec
                .iter()
                .zip(corpus.row(j))
                .map(|(a, b)| a * b)
                .sum();
            (j, sim)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ds.samples[a.0].sample_id.cmp(&ds.samples[b.0].sample_id))
    });
    scored.truncate(args.k);

    match (&args.query, &args.image) {
        (Some(id), _) => {
            let class = &ds.taxonomy.classes[ds.samples[query_idx.unwrap()].class_id].name;
            println!("query {id} ({class}), top {}:", args.k);
        }
        (None, Some(path)) => {
            println!("query image {}, top {}:", path.display(), args.k);
        }
        (None, None) => unreachable!(),
    }
    for (rank, (j, sim)) in scored.iter().enumerate() {
        let sample = &ds.samples[*j];
        println!(
            "{:>3}  {}  {:.4}  {}",
            rank + 1,
            sample.sample_id,
            sim,
            ds.taxonomy.classes[sample.class_id].name
        );
    }

    if let Some(sheet_path) = &args.sheet {
        let neighbors: Vec<&ImageArray> = scored
            .iter()
            .map(|(j, _)| ds.samples[*j].image.as_ref())
            .collect();
        let sheet = render::contact_sheet(query_thumb, &neighbors)?;
        sheet.save_png(sheet_path)?;
        println!("contact sheet -> {}", sheet_path.display());
    }
    Ok(())
}
