//! MLP-Mixer: per block, a token-mixing MLP across patches and a
//! channel-mixing MLP across channels, each pre-normed with a skip.
//!
//! Token-mixing hidden width is `2P` for `P` patches; channel-mixing hidden
//! width is `4D`. The feature is the mean over tokens (projected when
//! `feature_dim != width`), so `depth = 0` pools the patch embeddings.
//!
//! ```text
//! 3 p^2 D + D                                  patch embedding
//! L (4D + (P*2P + 2P + 2P*P + P) + (8 D^2 + 5D))  blocks
//! D F + F                                      projection, when F != D
//! ```

use rvernet_tensor::{Float, Graph, Var};

use super::{maybe_project, BackboneConfig, Features};
use crate::error::Result;
use crate::layers::{LayerNorm, Linear, Mlp, PatchEmbed};
use crate::params::{Bound, Init, ParamId, ParamStore};

pub(crate) const TOKEN_RATIO: usize = 2;
pub(crate) const CHANNEL_RATIO: usize = 4;

pub(crate) fn param_count(cfg: &BackboneConfig) -> usize {
    let (d, t) = (cfg.width, cfg.num_patches());
    let block = 4 * d + Mlp::param_count(t, TOKEN_RATIO * t) + Mlp::param_count(d, CHANNEL_RATIO * d);
    let mut total = PatchEmbed::param_count(cfg.patch_size, d) + cfg.depth * block;
    if cfg.feature_dim != d {
        total += Linear::param_count(d, cfg.feature_dim);
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MixerBlock {
    pub(crate) ln1: LayerNorm,
    pub(crate) token_mlp: Mlp,
    pub(crate) ln2: LayerNorm,
    pub(crate) channel_mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniMixer {
    embed: PatchEmbed,
    pub(crate) blocks: Vec<MixerBlock>,
    proj: Option<(ParamId, ParamId)>,
}

impl MiniMixer {
    pub(crate) fn new<T: Float>(cfg: &BackboneConfig, params: &mut ParamStore<T>, init: &mut Init) -> Self {
        let (d, t) = (cfg.width, cfg.num_patches());
        let embed = PatchEmbed::new(params, "patch_embed", cfg.patch_size, d, init);
        let blocks = (0..cfg.depth)
            .map(|j| {
                let name = format!("blocks.{j}");
                MixerBlock {
                    ln1: LayerNorm::new(params, &format!("{name}.ln1"), d),
                    token_mlp: Mlp::new(params, &format!("{name}.token_mlp"), t, TOKEN_RATIO * t, init),
                    ln2: LayerNorm::new(params, &format!("{name}.ln2"), d),
                    channel_mlp: Mlp::new(params, &format!("{name}.channel_mlp"), d, CHANNEL_RATIO * d, init),
                }
            })
            .collect();
        let proj = (cfg.feature_dim != d).then(|| {
            let l = Linear::new(params, "proj", d, cfg.feature_dim, init);
            (l.w, l.b)
        });
        Self { embed, blocks, proj }
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Features> {
        self.forward_with(g, p, image, true)
    }

    /// `token_mixing = false` drops the token-mixing branch of every block.
    pub(crate) fn forward_with<T: Float>(&self, g: &mut Graph<T>, p: &Bound, image: Var, token_mixing: bool) -> Result<Features> {
        let mut x = self.embed.forward(g, p, image)?;
        for b in &self.blocks {
            if token_mixing {
                let h = b.ln1.forward(g, p, x)?;
                let h = g.permute(h, &[0, 2, 1])?;
                let h = b.token_mlp.forward(g, p, h)?;
                let h = g.permute(h, &[0, 2, 1])?;
                x = g.add(x, h)?;
            }
            let h = b.ln2.forward(g, p, x)?;
            let h = b.channel_mlp.forward(g, p, h)?;
            x = g.add(x, h)?;
        }
        let pooled = g.mean_axis(x, 1)?;
        let feature = maybe_project(g, p, self.proj, pooled)?;
        Ok(Features { feature, cls: None, dist: None, last_conv: None })
    }
}
