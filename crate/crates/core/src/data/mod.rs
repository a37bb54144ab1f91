//! Labeled images with ROI masks, complementary cut-out pairs, augmentation
//! and class filtering.

mod manifest;
mod synthetic;

use std::collections::BTreeSet;

use rand::Rng;
use rvernet_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

pub(crate) use manifest::write_gray_png;
pub use manifest::{load_dataset, save_dataset, Manifest, ManifestEntry};
pub use synthetic::{generate_synthetic, ContextShape, ContextStyle, SyntheticSpec};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// An RGB image in `[0, 1]` with a binary ROI mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[3, S, S]`.
    pub image: Tensor<f32>,
    /// `[S, S]`, exactly 0 or 1; 1 marks the ROI.
    pub mask: Tensor<f32>,
    pub label: usize,
    pub id: String,
    pub split: Split,
}

/// Inclusive pixel bounds `(row0, col0, row1, col1)`.
pub type BBox = (usize, usize, usize, usize);

impl LabeledImage {
    pub fn side(&self) -> usize {
        self.mask.shape()[0]
    }

    /// Bounding box of the ROI, or `None` for an empty mask.
    pub fn roi_bbox(&self) -> Option<BBox> {
        let s = self.side();
        let mut bb: Option<BBox> = None;
        for (i, &m) in self.mask.data().iter().enumerate() {
            if m != 0.0 {
                let (r, c) = (i / s, i % s);
                bb = Some(match bb {
                    None => (r, c, r, c),
                    Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                });
            }
        }
        bb
    }
}

/// The complementary inputs of one sample: `x1 = image * mask` and
/// `x2 = image * (1 - mask)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoutPair {
    pub x1: Tensor<f32>,
    pub x2: Tensor<f32>,
    pub label: usize,
}

fn check_mask(li: &LabeledImage) -> Result<()> {
    let s = li.image.shape();
    if s.len() != 3 || s[0] != 3 || li.mask.shape() != [s[1], s[2]] {
        return Err(Error::Validation(format!(
            "{}: image shape {:?} does not match mask shape {:?}",
            li.id,
            s,
            li.mask.shape()
        )));
    }
    let bad = li.mask.data().iter().filter(|&&m| m != 0.0 && m != 1.0).count();
    if bad > 0 {
        return Err(Error::Validation(format!("{}: mask has {bad} non-binary pixels", li.id)));
    }
    Ok(())
}

/// Splits an image into its ROI-only and extra-ROI halves.
pub fn apply_mask(li: &LabeledImage) -> Result<CutoutPair> {
    check_mask(li)?;
    let plane = li.mask.len();
    let mut x1 = Tensor::zeros(li.image.shape());
    let mut x2 = Tensor::zeros(li.image.shape());
    for (i, &v) in li.image.data().iter().enumerate() {
        if li.mask.data()[i % plane] == 1.0 {
            x1.data_mut()[i] = v;
        } else {
            x2.data_mut()[i] = v;
        }
    }
    Ok(CutoutPair { x1, x2, label: li.label })
}

/// Mirrors a `[C, H, W]` image about its vertical axis.
pub fn flip_image<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.shape()[x.ndim() - 1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// With probability `p` flips both halves of the pair.
pub fn horizontal_flip<R: Rng>(pair: &CutoutPair, p: f64, rng: &mut R) -> Result<CutoutPair> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("flip probability {p} outside [0, 1]")));
    }
    if rng.random::<f64>() < p {
        Ok(CutoutPair { x1: flip_image(&pair.x1), x2: flip_image(&pair.x2), label: pair.label })
    } else {
        Ok(pair.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledImage> {
        self.items.iter().filter(move |li| li.split == split)
    }

    /// Cut-out pairs of one split, in dataset order.
    pub fn pairs(&self, split: Split) -> Result<Vec<CutoutPair>> {
        self.split(split).map(apply_mask).collect()
    }

    pub fn image_side(&self) -> Option<usize> {
        self.items.first().map(LabeledImage::side)
    }
}

/// Dense relabeling left after excluding classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    /// `old_to_new[old]`, `None` for excluded classes.
    pub old_to_new: Vec<Option<usize>>,
    pub new_to_old: Vec<usize>,
}

impl ClassMap {
    pub fn forward(&self, old: usize) -> Option<usize> {
        self.old_to_new.get(old).copied().flatten()
    }

    pub fn inverse(&self, new: usize) -> usize {
        self.new_to_old[new]
    }
}

/// Drops every sample whose label is in `excluded` (both splits) and
/// re-indexes the remaining labels densely.
pub fn filter_classes(dataset: &Dataset, excluded: &BTreeSet<usize>) -> Result<(Dataset, ClassMap)> {
    let k = dataset.num_classes();
    if let Some(&c) = excluded.iter().find(|&&c| c >= k) {
        return Err(Error::Config(format!("excluded class {c} out of range for {k} classes")));
    }
    if excluded.len() >= k {
        return Err(Error::Config("cannot exclude every class".into()));
    }
    let mut old_to_new = vec![None; k];
    let mut new_to_old = Vec::new();
    for (c, slot) in old_to_new.iter_mut().enumerate() {
        if !excluded.contains(&c) {
            *slot = Some(new_to_old.len());
            new_to_old.push(c);
        }
    }
    let items = dataset
        .items
        .iter()
        .filter_map(|li| {
            old_to_new[li.label].map(|label| LabeledImage { label, ..li.clone() })
        })
        .collect();
    let class_names = new_to_old.iter().map(|&c| dataset.class_names[c].clone()).collect();
    Ok((Dataset { items, class_names }, ClassMap { old_to_new, new_to_old }))
}

/// A mini-batch of stacked pairs.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[N, 3, S, S]`.
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Stacks pairs into a batch, flipping those whose `flip` entry is true.
pub fn make_batch<T: Float>(pairs: &[&CutoutPair], flip: Option<&[bool]>) -> Result<Batch<T>> {
    let n = pairs.len();
    if n == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    let shape = pairs[0].x1.shape().to_vec();
    let per = pairs[0].x1.len();
    let mut x1 = Vec::with_capacity(n * per);
    let mut x2 = Vec::with_capacity(n * per);
    let w = shape[2];
    for (i, p) in pairs.iter().enumerate() {
        if p.x1.shape() != shape.as_slice() {
            return Err(Error::Validation(format!("batch mixes image shapes {:?} and {:?}", shape, p.x1.shape())));
        }
        let f = flip.is_some_and(|f| f[i]);
        for (src, dst) in [(&p.x1, &mut x1), (&p.x2, &mut x2)] {
            for row in src.data().chunks(w) {
                if f {
                    dst.extend(row.iter().rev().map(|&v| T::from_f64(v as f64)));
                } else {
                    dst.extend(row.iter().map(|&v| T::from_f64(v as f64)));
                }
            }
        }
    }
    let full = [n, shape[0], shape[1], shape[2]];
    Ok(Batch {
        x1: Tensor::new(&full, x1)?,
        x2: Tensor::new(&full, x2)?,
        labels: pairs.iter().map(|p| p.label).collect(),
    })
}
