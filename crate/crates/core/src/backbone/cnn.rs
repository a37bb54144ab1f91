//! Inverted-residual CNN in the MobileNetV2 style.
//!
//! Layout: a 3x3 stride-2 stem, then `depth` blocks of
//! expand (1x1, ratio 4) -> depthwise 3x3 -> linear projection (1x1), with a
//! skip connection whenever the block keeps its shape. Blocks 1 and 3
//! downsample by two and double the channels. Global average pooling and a
//! linear map produce the feature vector.
//!
//! Parameter count, with `c0 = width / 2^s` stem channels and `s` the number
//! of downsampling blocks:
//!
//! ```text
//! stem:           27 c0 + c0
//! block cin->cout: cin*4cin + 4cin   (expand)
//!                + 9*4cin + 4cin     (depthwise)
//!                + 4cin*cout + cout  (project)
//! head:           width*feature_dim + feature_dim
//! ```

use rvernet_tensor::{ConvSpec, Float, Graph, Padding, Var};

use super::{BackboneConfig, Features};
use crate::error::Result;
use crate::layers::{Conv, Linear};
use crate::params::{Bound, Init, ParamStore};

pub(crate) const EXPAND: usize = 4;

/// Number of stride-2 blocks among the first `depth` blocks.
pub(crate) fn downsamples(depth: usize) -> usize {
    (0..depth).filter(|&j| block_stride(j) == 2).count()
}

fn block_stride(j: usize) -> usize {
    if j == 1 || j == 3 {
        2
    } else {
        1
    }
}

pub(crate) fn stem_channels(cfg: &BackboneConfig) -> usize {
    cfg.width >> downsamples(cfg.depth)
}

/// `(c_in, c_out, stride)` of every block.
fn block_plan(cfg: &BackboneConfig) -> Vec<(usize, usize, usize)> {
    let mut c = stem_channels(cfg);
    (0..cfg.depth)
        .map(|j| {
            let s = block_stride(j);
            let out = c * s;
            let plan = (c, out, s);
            c = out;
            plan
        })
        .collect()
}

pub(crate) fn param_count(cfg: &BackboneConfig) -> usize {
    let c0 = stem_channels(cfg);
    let mut total = Conv::param_count(3, c0, 3, 1);
    for (cin, cout, _) in block_plan(cfg) {
        let hidden = EXPAND * cin;
        total += Conv::param_count(cin, hidden, 1, 1);
        total += Conv::param_count(hidden, hidden, 3, hidden);
        total += Conv::param_count(hidden, cout, 1, 1);
    }
    total + Linear::param_count(cfg.width, cfg.feature_dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedResidual {
    expand: Conv,
    depthwise: Conv,
    project: Conv,
    residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniCnn {
    stem: Conv,
    blocks: Vec<InvertedResidual>,
    head: Linear,
}

impl MiniCnn {
    pub(crate) fn new<T: Float>(cfg: &BackboneConfig, params: &mut ParamStore<T>, init: &mut Init) -> Self {
        let c0 = stem_channels(cfg);
        let stem = Conv::new(params, "stem", 3, c0, 3, ConvSpec::new(2, Padding::Zero(1), 1), init);
        let blocks = block_plan(cfg)
            .into_iter()
            .enumerate()
            .map(|(j, (cin, cout, stride))| {
                let hidden = EXPAND * cin;
                let name = format!("blocks.{j}");
                InvertedResidual {
                    expand: Conv::new(params, &format!("{name}.expand"), cin, hidden, 1, ConvSpec::new(1, Padding::Valid, 1), init),
                    depthwise: Conv::new(
                        params,
                        &format!("{name}.depthwise"),
                        hidden,
                        hidden,
                        3,
                        ConvSpec::new(stride, Padding::Zero(1), hidden),
                        init,
                    ),
                    project: Conv::new(params, &format!("{name}.project"), hidden, cout, 1, ConvSpec::new(1, Padding::Valid, 1), init),
                    residual: stride == 1 && cin == cout,
                }
            })
            .collect();
        let head = Linear::fan_in(params, "head", cfg.width, cfg.feature_dim, init);
        Self { stem, blocks, head }
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Features> {
        let h = self.stem.forward(g, p, image)?;
        let mut h = g.relu(h);
        for block in &self.blocks {
            let e = block.expand.forward(g, p, h)?;
            let e = g.relu(e);
            let d = block.depthwise.forward(g, p, e)?;
            let d = g.relu(d);
            let out = block.project.forward(g, p, d)?;
            h = if block.residual { g.add(out, h)? } else { out };
        }
        let last_conv = h;
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = g.mean_axis(flat, 2)?;
        let feature = self.head.forward(g, p, pooled)?;
        Ok(Features { feature, cls: None, dist: None, last_conv: Some(last_conv) })
    }
}
