use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Label, LabeledFace};
use crate::error::{Error, Result};
use crate::raster::Image;

/// Result of reading a `<root>/<domain>/<real|fake>/*.png` tree.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    /// `[fake, real]` counts per domain.
    pub counts: Vec<[usize; 2]>,
    /// One entry per file that could not be decoded.
    pub warnings: Vec<String>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| io_err(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    entries.retain(|p| !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')));
    entries.sort();
    Ok(entries)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn decode(path: &Path) -> std::result::Result<Image, String> {
    let rgb = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, 3, data).map_err(|e| e.to_string())
}

/// Reads every domain directory under `root`. Domains are indexed in
/// sorted name order. Undecodable files are skipped with a warning; a
/// domain with no usable image for either label is an error.
pub fn ingest_directory(root: &Path) -> Result<Ingested> {
    let mut dataset = Dataset::default();
    let mut warnings = Vec::new();
    for entry in sorted_entries(root)? {
        let name = entry
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !entry.is_dir() {
            return Err(Error::Data(format!("{} is not a domain directory", entry.display())));
        }
        let domain = dataset.domains.len();
        dataset.domains.push(name.clone());
        for label in [Label::Real, Label::Fake] {
            let dir = entry.join(label.dir_name());
            let files = if dir.is_dir() {
                sorted_entries(&dir)?
            } else {
                Vec::new()
            };
            let mut found = 0;
            for file in files.iter().filter(|p| p.is_file() && is_png(p)) {
                match decode(file) {
                    Ok(image) => {
                        dataset.samples.push(LabeledFace { image, label, domain });
                        found += 1;
                    }
                    Err(e) => warnings.push(format!("skipping {}: {e}", file.display())),
                }
            }
            if found == 0 {
                return Err(Error::Data(format!(
                    "domain `{name}` has no readable {} images in {}",
                    label.dir_name(),
                    dir.display()
                )));
            }
        }
    }
    if dataset.domains.is_empty() {
        return Err(Error::Data(format!("no domain directories under {}", root.display())));
    }
    let counts = dataset.counts();
    Ok(Ingested {
        dataset,
        counts,
        warnings,
    })
}

/// Writes `dataset` as 8-bit RGB PNGs in the layout `ingest_directory` reads.
pub fn write_directory(dataset: &Dataset, root: &Path) -> Result<()> {
    let mut next = vec![[0usize; 2]; dataset.domains.len()];
    for sample in &dataset.samples {
        let name = dataset
            .domains
            .get(sample.domain)
            .ok_or_else(|| Error::Data(format!("sample refers to unknown domain {}", sample.domain)))?;
        let img = &sample.image;
        if img.channels() != 3 {
            return Err(Error::Data(format!(
                "PNG output needs 3 channels, got {}",
                img.channels()
            )));
        }
        let dir = root.join(name).join(sample.label.dir_name());
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let slot = &mut next[sample.domain][sample.label as usize];
        let path = dir.join(format!("{:05}.png", *slot));
        *slot += 1;
        let bytes = img
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
            .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
        buf.save(&path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
