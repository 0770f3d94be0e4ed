//! Grayscale image pools: binary PGM files listed in a CSV manifest with
//! the header `class_id,relative_path`. Paths are relative to the manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmSubtype, SampleEncoding};
use image::ImageDecoder;
use meta_attack_core::tasks::ImagePool;
use serde::Deserialize;

use crate::error::{io_err, LabError, Result};

/// A decoded image with pixel values scaled to `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grayscale {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f64>,
}

/// Reads a binary (P5) PGM with maxval 255.
pub fn read_pgm(path: &Path) -> Result<Grayscale> {
    let bad = |message: String| LabError::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(io_err(path))?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| bad(e.to_string()))?;
    if decoder.subtype() != PnmSubtype::Graymap(SampleEncoding::Binary) {
        return Err(bad(format!("expected a binary graymap (P5), found {:?}", decoder.subtype())));
    }
    let maxval = decoder.header().maximal_sample();
    if maxval != 255 {
        return Err(bad(format!("expected maxval 255, found {maxval}")));
    }
    let (width, height) = decoder.dimensions();
    let mut raw = vec![0u8; decoder.total_bytes() as usize];
    decoder.read_image(&mut raw).map_err(|e| bad(e.to_string()))?;
    Ok(Grayscale {
        width,
        height,
        pixels: raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    class_id: u32,
    relative_path: PathBuf,
}

/// Loads every image of a manifest. Row order does not matter beyond the
/// order of images within one class.
pub fn load_image_pool(manifest: &Path) -> Result<ImagePool> {
    let malformed = |line: u64, message: String| LabError::Malformed {
        path: manifest.to_path_buf(),
        line,
        message,
    };
    let file = File::open(manifest).map_err(io_err(manifest))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["class_id", "relative_path"] {
        return Err(malformed(1, "header must be `class_id,relative_path`".into()));
    }
    let mut classes: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    let mut size: Option<(u32, u32, PathBuf)> = None;
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let path = base.join(&row.relative_path);
        let img = read_pgm(&path)?;
        match &size {
            None => size = Some((img.width, img.height, path.clone())),
            Some((w, h, first)) if (*w, *h) != (img.width, img.height) => {
                return Err(LabError::Image {
                    path,
                    message: format!(
                        "size {}x{} differs from {}x{} of {}",
                        img.width,
                        img.height,
                        w,
                        h,
                        first.display()
                    ),
                })
            }
            Some(_) => {}
        }
        classes.entry(row.class_id).or_default().push(img.pixels);
    }
    if classes.is_empty() {
        return Err(malformed(1, "manifest lists no images".into()));
    }
    Ok(ImagePool::new(classes, manifest.display().to_string())?)
}
