//! HDF5 loaders for the two published galaxy morphology datasets.
//!
//! Both store images as uint8 HWC arrays with an integer label vector. The
//! loaders validate shapes and dtypes before reading, convert pixels to
//! [0, 1] floats, optionally resize at ingest (the native 256px resolution
//! is rarely what a desk run wants), and attach the canonical class symbol
//! rendered at the final image size.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hdf5::types::{IntSize, TypeDescriptor};

use super::symbols::render_symbol;
use super::{
    galaxy10_families, galaxy10_taxonomy, galaxymnist_families, galaxymnist_taxonomy, Dataset,
    Family, Sample,
};
use crate::raster::ImageArray;
use crate::{Error, Result};

/// Loads the 10-class 256x256 dataset from one `.h5` file with `images` and
/// `ans` datasets. `target_size` resizes every image at ingest.
pub fn load_galaxy10(path: &Path, target_size: Option<usize>) -> Result<Dataset> {
    let (images, labels) = read_h5_pairs(path, "images", "ans", 256)?;
    assemble(
        "galaxy10",
        galaxy10_taxonomy(),
        &galaxy10_families(),
        images,
        labels,
        target_size,
    )
}

/// Loads the 4-class 64x64 dataset from a single `.h5` file, or from a
/// directory whose `.h5` files (in filename order) are concatenated.
pub fn load_galaxymnist(path: &Path, target_size: Option<usize>) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(crate::error::io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("h5") | Some("hdf5")
                )
            })
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::Load {
                path: path.to_path_buf(),
                reason: "directory contains no .h5 or .hdf5 files".to_string(),
            });
        }
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let (mut i, mut l) = read_h5_pairs(file, "images", "labels", 64)?;
        images.append(&mut i);
        labels.append(&mut l);
    }
    assemble(
        "galaxymnist",
        galaxymnist_taxonomy(),
        &galaxymnist_families(),
        images,
        labels,
        target_size,
    )
}

fn h5err(path: &Path) -> impl FnOnce(hdf5::Error) -> Error + '_ {
    move |e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn read_h5_pairs(
    path: &Path,
    images_name: &str,
    labels_name: &str,
    expect_side: usize,
) -> Result<(Vec<ImageArray>, Vec<i64>)> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
        });
    }
    let file = hdf5::File::open(path).map_err(h5err(path))?;
    let images_ds = file.dataset(images_name).map_err(|_| Error::Load {
        path: path.to_path_buf(),
        reason: format!("dataset {images_name:?} not found"),
    })?;
    let labels_ds = file.dataset(labels_name).map_err(|_| Error::Load {
        path: path.to_path_buf(),
        reason: format!("dataset {labels_name:?} not found"),
    })?;

    let shape = images_ds.shape();
    let ok_shape =
        shape.len() == 4 && shape[1] == expect_side && shape[2] == expect_side && shape[3] == 3;
    if !ok_shape {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!(
                "dataset {images_name:?} has shape {shape:?}, expected [n, {expect_side}, {expect_side}, 3]"
            ),
        });
    }
    let n = shape[0];
    let images_td = images_ds
        .dtype()
        .and_then(|d| d.to_descriptor())
        .map_err(h5err(path))?;
    if images_td != TypeDescriptor::Unsigned(IntSize::U1) {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("dataset {images_name:?} has dtype {images_td}, expected uint8"),
        });
    }
    let label_shape = labels_ds.shape();
    if label_shape != vec![n] {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!(
                "dataset {labels_name:?} has shape {label_shape:?}, expected [{n}]"
            ),
        });
    }
    let labels = read_integer_labels(&labels_ds, path, labels_name)?;

    let raw = images_ds.read_raw::<u8>().map_err(h5err(path))?;
    let plane = expect_side * expect_side * 3;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let src = &raw[i * plane..(i + 1) * plane];
        let mut img = ImageArray::zeros(expect_side, expect_side, 3);
        for (dst, &b) in img.pixels.iter_mut().zip(src) {
            *dst = b as f32 / 255.0;
        }
        images.push(img);
    }
    Ok((images, labels))
}

/// Reads an integer label vector regardless of its exact width.
fn read_integer_labels(ds: &hdf5::Dataset, path: &Path, name: &str) -> Result<Vec<i64>> {
    let td = ds
        .dtype()
        .and_then(|d| d.to_descriptor())
        .map_err(h5err(path))?;
    let err = |e: hdf5::Error| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    match td {
        TypeDescriptor::Unsigned(IntSize::U1) => Ok(ds
            .read_raw::<u8>()
            .map_err(err)?
            .into_iter()
            .map(i64::from)
            .collect()),
        TypeDescriptor::Unsigned(IntSize::U2) => Ok(ds
            .read_raw::<u16>()
            .map_err(err)?
            .into_iter()
            .map(i64::from)
            .collect()),
        TypeDescriptor::Unsigned(IntSize::U4) => Ok(ds
            .read_raw::<u32>()
            .map_err(err)?
            .into_iter()
            .map(i64::from)
            .collect()),
        TypeDescriptor::Integer(IntSize::U1) => Ok(ds
            .read_raw::<i8>()
            .map_err(err)?
            .into_iter()
            .map(i64::from)
            .collect()),
        TypeDescriptor::Integer(IntSize::U2) => Ok(ds
            .read_raw::<i16>()
            .map_err(err)?
            .into_iter()
            .map(i64::from)
            .collect()),
        TypeDescriptor::Integer(IntSize::U4) => Ok(ds
            .read_raw::<i32>()
            .map_err(err)?
            .into_iter()
            .map(i64::from)
            .collect()),
        TypeDescriptor::Integer(IntSize::U8) => ds.read_raw::<i64>().map_err(err),
        other => Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("dataset {name:?} has dtype {other}, expected an integer type"),
        }),
    }
}

fn assemble(
    name: &str,
    taxonomy: super::ClassTaxonomy,
    families: &[Family],
    images: Vec<ImageArray>,
    labels: Vec<i64>,
    target_size: Option<usize>,
) -> Result<Dataset> {
    let n_classes = taxonomy.len();
    if images.len() > 999_999 {
        return Err(Error::InvalidArgument(format!(
            "{} records exceed the 6-digit id space",
            images.len()
        )));
    }
    let size = target_size.unwrap_or_else(|| images.first().map_or(64, |i| i.height));
    let symbols: Vec<Arc<ImageArray>> = families
        .iter()
        .map(|&f| Arc::new(render_symbol(f, size)))
        .collect();
    let mut samples = Vec::with_capacity(images.len());
    for (i, (img, &label)) in images.into_iter().zip(&labels).enumerate() {
        if label < 0 || label as usize >= n_classes {
            return Err(Error::BadRecord {
                index: i,
                reason: format!("class label {label} outside 0..{n_classes}"),
            });
        }
        let class_id = label as usize;
        let image = if img.height == size && img.width == size {
            img
        } else {
            img.resize_bilinear(size, size)
        };
        samples.push(Sample {
            sample_id: format!("{i:06}"),
            class_id,
            image: Arc::new(image),
            symbol: Arc::clone(&symbols[class_id]),
        });
    }
    let ds = Dataset {
        name: name.to_string(),
        taxonomy,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}
