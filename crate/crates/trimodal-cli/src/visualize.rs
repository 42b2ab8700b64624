//! `visualize`: render an embedding space as a figure plus CSV.

use std::path::PathBuf;
use std::str::FromStr;

use trimodal::contrastive::Modality;
use trimodal::encoders::load_checkpoint;
use trimodal::evaluation::{encode_all, pca_grid, project_2d_export, Projection2DMethod};
use trimodal::raster::ImageArray;
use trimodal::{Error, Result};

use crate::data::{write_invocation, DataSource};
use crate::render;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Place thumbnails on a G x G grid by their two principal components.
    Grid,
    /// Project embeddings to 2-D and render a class-colored scatter.
    Scatter,
}

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint whose image tower embeds the samples.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub source: DataSource,

    #[arg(long, value_enum, default_value_t = Mode::Grid)]
    pub mode: Mode,

    /// Grid side length G; capacity is G*G thumbnails.
    #[arg(long, default_value_t = 32)]
    pub grid: usize,

    /// Projection for scatter mode: pca or external-tsne.
    #[arg(long, default_value = "pca")]
    pub method: String,

    /// External projection executable; defaults to the TMA_TSNE_TOOL env var.
    #[arg(long = "tsne-tool", value_name = "BIN")]
    pub tsne_tool: Option<PathBuf>,

    /// Output directory for the figure and CSV.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
}

pub fn run(args: &Args) -> Result<()> {
    // Parse the method before touching the filesystem so a typo is a pure
    // usage error.
    let mut method = Projection2DMethod::from_str(&args.method)?;
    if let Projection2DMethod::ExternalTsne { tool } = &mut method {
        if tool.is_none() {
            *tool = args.tsne_tool.clone();
        }
    }
    let ds = args.source.load()?;
    let (set, _meta) = load_checkpoint(&args.checkpoint)?;
    write_invocation(
        &args.out,
        "visualize",
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "source": args.source.describe(),
            "mode": match args.mode { Mode::Grid => "grid", Mode::Scatter => "scatter" },
            "grid": args.grid,
            "method": args.method,
            "tsne_tool": args.tsne_tool.as_ref().map(|p| p.display().to_string()),
        }),
    )?;
    let embeddings = encode_all(&set, &ds.samples, &ds.taxonomy, Modality::Image)?;
    let ids: Vec<String> = ds.samples.iter().map(|s| s.sample_id.clone()).collect();

    match args.mode {
        Mode::Grid => {
            let thumbs: Vec<&ImageArray> = ds.samples.iter().map(|s| s.image.as_ref()).collect();
            let assignment = pca_grid(&embeddings, &thumbs, &ids, args.grid)?;
            let png = args.out.join("grid.png");
            let csv = args.out.join("grid.csv");
            assignment.composite.save_png(&png)?;
            assignment.write_csv(&csv)?;
            println!(
                "{} thumbnails on a {side} x {side} grid",
                ds.len(),
                side = args.grid
            );
            println!("grid -> {}", png.display());
            println!("cells -> {}", csv.display());
        }
        Mode::Scatter => {
            let labels: Vec<usize> = ds.samples.iter().map(|s| s.class_id).collect();
            let csv = args.out.join("scatter.csv");
            project_2d_export(&embeddings, &ids, &labels, &method, &csv)?;
            let (points, point_labels) = read_projection(&csv)?;
            let canvas = render::scatter_png(&points, &point_labels)?;
            let png = args.out.join("scatter.png");
            canvas.save_png(&png)?;
            println!("{} points projected with {}", points.len(), args.method);
            println!("coordinates -> {}", csv.display());
            println!("scatter -> {}", png.display());
        }
    }
    Ok(())
}

/// Reads back the `sample_id,x,y,class_id` CSV the projection wrote. Going
/// through the file means the rendered figure always matches the exported
/// coordinates, whichever method produced them.
fn read_projection(path: &std::path::Path) -> Result<(Vec<(f64, f64)>, Vec<usize>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (index, line) in text.lines().enumerate().skip(1) {
        let bad = |reason: String| Error::BadRecord { index, reason };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let x: f64 = fields[1]
            .parse()
            .map_err(|e| bad(format!("bad x coordinate: {e}")))?;
        let y: f64 = fields[2]
            .parse()
            .map_err(|e| bad(format!("bad y coordinate: {e}")))?;
        let label: usize = fields[3]
            .parse()
            .map_err(|e| bad(format!("bad class id: {e}")))?;
        points.push((x, y));
        labels.push(label);
    }
    Ok((points, labels))
}
