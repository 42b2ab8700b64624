//! Flag groups and plumbing shared by the dataset-consuming subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use trimodal::datasets::{
    load_exported, load_galaxy10, load_galaxymnist, split_dataset, Dataset, SplitMode,
};
use trimodal::{Error, Result};

/// Where samples come from. Exactly one source must be given.
#[derive(Args, Debug)]
pub struct DataSource {
    /// Exported dataset directory (the manifest.json layout).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,

    /// Galaxy10 DECaLS HDF5 file.
    #[arg(long, value_name = "FILE", conflicts_with = "data")]
    pub galaxy10: Option<PathBuf>,

    /// GalaxyMNIST HDF5 file, or a directory holding the train/test pair.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["data", "galaxy10"])]
    pub galaxymnist: Option<PathBuf>,

    /// Resize images to this side length at ingest (HDF5 sources only).
    #[arg(long, value_name = "PX")]
    pub target_size: Option<usize>,
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match (&self.data, &self.galaxy10, &self.galaxymnist) {
            (Some(dir), None, None) => {
                if self.target_size.is_some() {
                    return Err(Error::InvalidArgument(
                        "--target-size only applies to HDF5 sources; exported datasets \
                         are already stored at their training resolution"
                            .to_string(),
                    ));
                }
                load_exported(dir)
            }
            (None, Some(file), None) => load_galaxy10(file, self.target_size),
            (None, None, Some(path)) => load_galaxymnist(path, self.target_size),
            _ => Err(Error::InvalidArgument(
                "pass exactly one of --data, --galaxy10, --galaxymnist".to_string(),
            )),
        }
    }

    /// The source flags as JSON, for invocation snapshots.
    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "data": self.data.as_ref().map(|p| p.display().to_string()),
            "galaxy10": self.galaxy10.as_ref().map(|p| p.display().to_string()),
            "galaxymnist": self.galaxymnist.as_ref().map(|p| p.display().to_string()),
            "target_size": self.target_size,
        })
    }
}

/// Which side of the stratified train/test split to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    /// Every sample in the dataset.
    All,
    /// The training side of the split.
    Train,
    /// The held-out side of the split.
    Test,
}

impl SplitChoice {
    pub fn name(&self) -> &'static str {
        match self {
            SplitChoice::All => "all",
            SplitChoice::Train => "train",
            SplitChoice::Test => "test",
        }
    }
}

/// Reconstructs the stratified split a training run used and returns the
/// selected sample indices. `All` skips splitting entirely.
pub fn select_indices(
    ds: &Dataset,
    split: SplitChoice,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if split == SplitChoice::All {
        return Ok((0..ds.len()).collect());
    }
    let parts = split_dataset(ds, test_fraction, SplitMode::Stratified, seed)?;
    Ok(match split {
        SplitChoice::Train => parts.train,
        SplitChoice::Test => parts.test,
        SplitChoice::All => unreachable!(),
    })
}

/// Writes the fully resolved invocation as JSON into `dir` before any real
/// work happens, so an output directory always records what produced it,
/// even when the command later fails. Keys are sorted and nothing
/// time-dependent is included, so reruns are byte-identical.
pub fn write_invocation(dir: &Path, subcommand: &str, detail: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut doc = serde_json::Map::new();
    doc.insert("subcommand".to_string(), subcommand.into());
    if let serde_json::Value::Object(extra) = detail {
        for (key, value) in extra {
            doc.insert(key, value);
        }
    }
    let path = dir.join(format!("{subcommand}-invocation.json"));
    let mut bytes = serde_json::to_string_pretty(&serde_json::Value::Object(doc))
        .expect("a string-keyed map serializes")
        .into_bytes();
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| Error::Io { path, source: e })
}
