//! `report`: aggregate metrics across finished runs.
//!
//! Scans a runs root for `<experiment>/<seed>/metrics.json` files, the layout
//! the train subcommand writes, and prints per-experiment means with sample
//! standard deviations. Runs that crashed before writing metrics are simply
//! absent, so the report always reflects completed work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use trimodal::{Error, Result};

#[derive(clap::Args)]
pub struct Args {
    /// Runs root to scan.
    #[arg(long, value_name = "DIR", env = "TMA_RUNS_DIR", default_value = "runs")]
    pub runs: PathBuf,

    /// Report only this experiment.
    #[arg(long)]
    pub name: Option<String>,

    /// Emit machine-readable JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

struct Experiment {
    name: String,
    seeds: Vec<u64>,
    metrics: Vec<BTreeMap<String, f64>>,
}

pub fn run(args: &Args) -> Result<()> {
    if !args.runs.is_dir() {
        return Err(Error::MissingFile {
            path: args.runs.clone(),
        });
    }
    let mut experiments = scan(&args.runs, args.name.as_deref())?;
    experiments.sort_by(|a, b| a.name.cmp(&b.name));
    if experiments.is_empty() {
        if let Some(name) = &args.name {
            return Err(Error::InvalidArgument(format!(
                "no finished runs for experiment {name:?} under {}",
                args.runs.display()
            )));
        }
        println!("no finished runs under {}", args.runs.display());
        return Ok(());
    }

    if args.json {
        let entries: Vec<serde_json::Value> = experiments
            .iter()
            .map(|exp| {
                let (means, stds) = aggregate(&exp.metrics);
                serde_json::json!({
                    "name": exp.name,
                    "seeds": exp.seeds,
                    "means": means,
                    "stds": stds,
                })
            })
            .collect();
        let doc = serde_json::json!({ "experiments": entries });
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
        return Ok(());
    }

    for exp in &experiments {
        let seeds: Vec<String> = exp.seeds.iter().map(|s| s.to_string()).collect();
        println!("{} ({} run(s), seeds {})", exp.name, exp.seeds.len(), seeds.join(","));
        let (means, stds) = aggregate(&exp.metrics);
        for (key, mean) in &means {
            let std = stds.get(key).copied().unwrap_or(0.0);
            println!("  {key:<12} {mean:.4} +/- {std:.4}");
        }
    }
    Ok(())
}

fn scan(root: &Path, only: Option<&str>) -> Result<Vec<Experiment>> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |e: std::io::Error| Error::Io { path, source: e }
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io(root))? {
        let entry = entry.map_err(io(root))?;
        let exp_dir = entry.path();
        if !exp_dir.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if only.is_some_and(|wanted| wanted != name) {
            continue;
        }
        let mut rows: Vec<(u64, BTreeMap<String, f64>)> = Vec::new();
        for sub in std::fs::read_dir(&exp_dir).map_err(io(&exp_dir))? {
            let sub = sub.map_err(io(&exp_dir))?;
            // Run directories are named by seed; anything else (summary.json,
            // stray files) is skipped.
            let Ok(seed) = sub.file_name().to_string_lossy().parse::<u64>() else {
                continue;
            };
            let metrics_path = sub.path().join("metrics.json");
            if !metrics_path.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&metrics_path).map_err(io(&metrics_path))?;
            let metrics: BTreeMap<String, f64> =
                serde_json::from_str(&text).map_err(|e| Error::Load {
                    path: metrics_path.clone(),
                    reason: e.to_string(),
                })?;
            rows.push((seed, metrics));
        }
        if rows.is_empty() {
            continue;
        }
        rows.sort_by_key(|(seed, _)| *seed);
        let (seeds, metrics) = rows.into_iter().unzip();
        out.push(Experiment {
            name,
            seeds,
            metrics,
        });
    }
    Ok(out)
}

/// Per-key mean and sample standard deviation over the runs that report the
/// key. Variants differ in which loss keys they emit, so the union is taken
/// rather than demanding identical shapes.
fn aggregate(
    metrics: &[BTreeMap<String, f64>],
) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let mut keys: Vec<&String> = metrics.iter().flat_map(|m| m.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut means = BTreeMap::new();
    let mut stds = BTreeMap::new();
    for key in keys {
        let values: Vec<f64> = metrics.iter().filter_map(|m| m.get(key)).copied().collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        means.insert(key.clone(), mean);
        stds.insert(key.clone(), std);
    }
    (means, stds)
}
