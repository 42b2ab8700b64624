//! `train`: run an experiment from a TOML config with flag overrides.

use std::path::PathBuf;

use trimodal::training::{run_experiment_with, ConfigFile, OptimizerSection, TrainEvent};
use trimodal::Result;

#[derive(clap::Args)]
pub struct Args {
    /// Experiment config TOML; omitted fields fall back to defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Root directory that run directories are created under.
    #[arg(long, value_name = "DIR", env = "TMA_RUNS_DIR", default_value = "runs")]
    pub out: PathBuf,

    /// Override the experiment name.
    #[arg(long)]
    pub name: Option<String>,

    /// Override the variant (full, v1, v2, v3, scratch, bimodal).
    #[arg(long)]
    pub variant: Option<String>,

    /// Override the base seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Override how many seeds the experiment repeats over.
    #[arg(long)]
    pub repeats: Option<usize>,

    /// Override the warm-up epoch budget.
    #[arg(long = "stage1-epochs")]
    pub stage1_epochs: Option<usize>,

    /// Override the joint-stage epoch budget.
    #[arg(long = "stage2-epochs")]
    pub stage2_epochs: Option<usize>,

    /// Override the batch size.
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,

    /// Override the learning rate.
    #[arg(long)]
    pub lr: Option<f64>,

    /// Override the decoupled weight decay.
    #[arg(long = "weight-decay")]
    pub weight_decay: Option<f64>,
}

pub fn run(args: &Args) -> Result<()> {
    let mut file = match &args.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    if let Some(name) = &args.name {
        file.name = Some(name.clone());
    }
    if let Some(variant) = &args.variant {
        file.variant = Some(variant.clone());
    }
    if let Some(seed) = args.seed {
        file.seed = Some(seed);
    }
    if let Some(repeats) = args.repeats {
        file.repeats = Some(repeats);
    }
    if let Some(epochs) = args.stage1_epochs {
        file.stage1_epochs = Some(epochs);
    }
    if let Some(epochs) = args.stage2_epochs {
        file.stage2_epochs = Some(epochs);
    }
    if let Some(batch) = args.batch_size {
        file.batch_size = Some(batch);
    }
    if args.lr.is_some() || args.weight_decay.is_some() {
        let section = file.optimizer.get_or_insert_with(OptimizerSection::default);
        if let Some(lr) = args.lr {
            section.lr = Some(lr);
        }
        if let Some(wd) = args.weight_decay {
            section.weight_decay = Some(wd);
        }
    }
    let config = file.resolve()?;

    println!(
        "experiment {:?}: variant {}, {} run(s) starting at seed {}",
        config.name,
        config.variant.name(),
        config.repeats,
        config.seed
    );
    let report = run_experiment_with(&config, &args.out, &mut |event| match event {
        TrainEvent::RunStarted { seed, run_dir } => {
            println!("run seed {seed} -> {}", run_dir.display());
        }
        TrainEvent::Epoch(record) => {
            let pairs: String = record
                .per_pair
                .iter()
                .map(|(key, value)| format!("  {key} {value:.4}"))
                .collect();
            let val = record
                .val_loss
                .map(|v| format!("  val {v:.4}"))
                .unwrap_or_default();
            println!(
                "  stage {} epoch {:>3}  loss {:.4}{pairs}  tau {:.4}{val}",
                record.stage,
                record.epoch + 1,
                record.mean_loss,
                record.temperature
            );
        }
        TrainEvent::RunFinished { seed: _, metrics } => {
            let cells: Vec<String> = metrics
                .iter()
                .map(|(key, value)| format!("{key} {value:.4}"))
                .collect();
            println!("  metrics: {}", cells.join("  "));
        }
    })?;

    println!("summary over {} run(s):", report.runs.len());
    for (key, mean) in &report.metric_means {
        let std = report.metric_stds.get(key).copied().unwrap_or(0.0);
        println!("  {key:<12} {mean:.4} +/- {std:.4}");
    }
    println!("runs written to {}", args.out.join(&config.name).display());
    Ok(())
}
