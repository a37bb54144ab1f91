//! On-disk datasets: `manifest.json` plus 8-bit PNG images and masks.
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<id>.png   RGB8
//! <root>/masks/<id>.png    gray8, strictly 0 or 255
//! ```
//!
//! Paths inside the manifest are relative to its directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rvernet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub samples: Vec<ManifestEntry>,
}

fn write_png(path: &Path, side: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), side as u32, side as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::load(path, e.to_string()))?;
    w.write_image_data(bytes).map_err(|e| Error::load(path, e.to_string()))?;
    w.finish().map_err(|e| Error::load(path, e.to_string()))
}

/// Writes an 8-bit grayscale PNG of a `[side, side]` grid of `u8` values.
pub(crate) fn write_gray_png(path: &Path, side: usize, bytes: &[u8]) -> Result<()> {
    write_png(path, side, png::ColorType::Grayscale, bytes)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `dataset` under `root` (created if missing).
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = Manifest { classes: dataset.class_names.clone(), samples: Vec::new() };
    for li in &dataset.items {
        let s = li.side();
        let plane = s * s;
        let mut rgb = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for ch in 0..3 {
                rgb.push(to_u8(li.image.data()[ch * plane + i]));
            }
        }
        let mask: Vec<u8> = li.mask.data().iter().map(|&m| if m == 1.0 { 255 } else { 0 }).collect();
        let image = PathBuf::from("images").join(format!("{}.png", li.id));
        let mask_path = PathBuf::from("masks").join(format!("{}.png", li.id));
        write_png(&root.join(&image), s, png::ColorType::Rgb, &rgb)?;
        write_gray_png(&root.join(&mask_path), s, &mask)?;
        manifest.samples.push(ManifestEntry { id: li.id.clone(), image, mask: mask_path, label: li.label, split: li.split });
    }
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::load(&path, e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::load(path, format!("cannot open: {e}")))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::load(path, format!("invalid PNG: {e}")))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::load(path, "PNG too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::load(path, format!("invalid PNG: {e}")))?;
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

/// Loads a dataset from `manifest_path`, scaling pixels to `[0, 1]`.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::load(manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::load(manifest_path, format!("invalid manifest: {e}")))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let k = manifest.classes.len();
    let mut items = Vec::with_capacity(manifest.samples.len());
    let mut side = None;
    for e in &manifest.samples {
        if e.label >= k {
            return Err(Error::load(manifest_path, format!("sample {} has label {} but only {k} classes", e.id, e.label)));
        }
        let ip = root.join(&e.image);
        let (w, h, color, px) = read_png(&ip)?;
        if w != h {
            return Err(Error::load(&ip, format!("image is {w}x{h}, expected square")));
        }
        if *side.get_or_insert(w) != w {
            return Err(Error::load(&ip, format!("image side {w} differs from earlier samples ({})", side.unwrap_or(0))));
        }
        let channels = match color {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(Error::load(&ip, format!("expected an RGB image, found {other:?}"))),
        };
        let plane = w * h;
        let mut image = vec![0.0f32; 3 * plane];
        for i in 0..plane {
            for ch in 0..3 {
                image[ch * plane + i] = px[i * channels + ch] as f32 / 255.0;
            }
        }
        let mp = root.join(&e.mask);
        let (mw, mh, mcolor, mpx) = read_png(&mp)?;
        if (mw, mh) != (w, h) {
            return Err(Error::load(&mp, format!("mask is {mw}x{mh}, image is {w}x{h}")));
        }
        if mcolor != png::ColorType::Grayscale {
            return Err(Error::load(&mp, format!("expected a grayscale mask, found {mcolor:?}")));
        }
        let bad = mpx.iter().filter(|&&v| v != 0 && v != 255).count();
        if bad > 0 {
            return Err(Error::load(&mp, format!("mask has {bad} pixels that are neither 0 nor 255")));
        }
        let mask = mpx.iter().map(|&v| if v == 255 { 1.0 } else { 0.0 }).collect();
        items.push(LabeledImage {
            image: Tensor::new(&[3, h, w], image)?,
            mask: Tensor::new(&[h, w], mask)?,
            label: e.label,
            id: e.id.clone(),
            split: e.split,
        });
    }
    Ok(Dataset { items, class_names: manifest.classes })
}
