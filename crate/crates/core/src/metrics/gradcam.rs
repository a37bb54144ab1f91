//! GradCAM over the last convolutional stage of a CNN branch:
//! `ReLU(sum_k alpha_k A_k)` with `alpha_k` the spatial mean of
//! `d score / d A_k`, normalized by its maximum.

use std::path::Path;

use rvernet_tensor::{Float, Graph, Tensor};

use crate::backbone::BackboneKind;
use crate::data::{make_batch, BBox, CutoutPair};
use crate::error::{Error, Result};
use crate::model::{Branch, RveRNetModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `[h, w]` in `[0, 1]`.
    pub grid: Tensor<f64>,
    pub layer: String,
    pub class_index: usize,
}

impl Heatmap {
    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    /// `(row, col)` of the largest cell; the first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let d = self.grid.data();
        let i = (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best });
        (i / self.cols(), i % self.cols())
    }

    /// Whether the centre of the argmax cell, mapped to pixel coordinates of
    /// a `side x side` image, lies inside the inclusive pixel box `bbox`.
    pub fn argmax_in_bbox(&self, bbox: BBox, side: usize) -> bool {
        let (r, c) = self.argmax();
        let y = (r as f64 + 0.5) * side as f64 / self.rows() as f64;
        let x = (c as f64 + 0.5) * side as f64 / self.cols() as f64;
        let (r0, c0, r1, c1) = bbox;
        y >= r0 as f64 && y <= (r1 + 1) as f64 && x >= c0 as f64 && x <= (c1 + 1) as f64
    }

    /// Nearest-neighbour upsampling to `side x side`, as 8-bit gray.
    pub fn upsampled_u8(&self, side: usize) -> Vec<u8> {
        let (h, w) = (self.rows(), self.cols());
        let mut out = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let v = self.grid.data()[(y * h / side) * w + x * w / side];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path, side: usize) -> Result<()> {
        crate::data::write_gray_png(path, side, &self.upsampled_u8(side))
    }
}

/// GradCAM from activations `A` and gradients `dA`, both `[C, h, w]`.
pub fn gradcam_from_activations(activations: &Tensor<f64>, grads: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = activations.shape();
    if s.len() != 3 || grads.shape() != s {
        return Err(Error::Validation(format!(
            "gradcam needs matching [C, h, w] activations and gradients, got {:?} and {:?}",
            s,
            grads.shape()
        )));
    }
    let (c, plane) = (s[0], s[1] * s[2]);
    let mut cam = vec![0.0; plane];
    for k in 0..c {
        let g = &grads.data()[k * plane..(k + 1) * plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        let a = &activations.data()[k * plane..(k + 1) * plane];
        for (dst, &v) in cam.iter_mut().zip(a) {
            *dst += alpha * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let max = cam.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut cam {
            *v /= max;
        }
    }
    Ok(Tensor::new(&[s[1], s[2]], cam)?)
}

/// Heatmap of `class_idx` over the last convolutional stage of `branch`.
pub fn gradcam<T: Float>(model: &RveRNetModel<T>, pair: &CutoutPair, class_idx: usize, branch: Branch) -> Result<Heatmap> {
    let backbone = model.backbone(branch);
    if backbone.kind() != BackboneKind::MiniCnn {
        return Err(Error::Unsupported(format!(
            "GradCAM needs a mini_cnn branch; the {} branch is {}",
            branch_name(branch),
            backbone.kind().name()
        )));
    }
    let used = match branch {
        Branch::Roi => model.mode().uses_roi(),
        Branch::Xroi => model.mode().uses_xroi(),
    };
    if !used {
        return Err(Error::Unsupported(format!("the {} branch is unused in mode {}", branch_name(branch), model.mode().name())));
    }
    if class_idx >= model.num_classes() {
        return Err(Error::Validation(format!("class {class_idx} out of range for {} classes", model.num_classes())));
    }
    let batch = make_batch::<T>(&[pair], None)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x1 = g.constant(batch.x1);
    let x2 = g.constant(batch.x2);
    let out = model.forward(&mut g, &bound, Some(x1), Some(x2))?;
    let feats = match branch {
        Branch::Roi => out.roi,
        Branch::Xroi => out.xroi,
    };
    let act = feats.and_then(|f| f.last_conv).expect("CNN branch exposes its last stage");
    let row = g.select(out.logits, 0, 0)?;
    let score = g.select(row, 0, class_idx)?;
    let grads = g.backward_retain(score, &[act])?;
    let a = g.value(act);
    let da = grads.get_or_zeros(act, a.shape());
    let s = a.shape();
    let a = a.cast::<f64>().reshape(&s[1..])?;
    let da = da.cast::<f64>().reshape(&s[1..])?;
    Ok(Heatmap {
        grid: gradcam_from_activations(&a, &da)?,
        layer: format!("{}/last_block", branch_name(branch)),
        class_index: class_idx,
    })
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Roi => "roi",
        Branch::Xroi => "xroi",
    }
}
