//! Pre-norm vision transformer, optionally with a DeiT distillation token.
//!
//! Per block: `x += MHSA(LN(x))`, `x += MLP(LN(x))` with MLP ratio 4. The
//! feature is the final layer-normed class-token state (DeiT: the mean of the
//! class- and distillation-token states), projected when `feature_dim`
//! differs from `width`.
//!
//! Parameter count for width `D`, `P` patches of side `p`, `E` extra tokens
//! (1 for ViT, 2 for DeiT) and depth `L`:
//!
//! ```text
//! 3 p^2 D + D            patch embedding
//! E D                    class (+ distillation) token
//! (P + E) D              positional embedding, when enabled
//! L (12 D^2 + 12 D)      blocks (attention 4D^2 + 3D, MLP 8D^2 + 5D, 2 norms 4D)
//! 2 D                    final norm
//! D F + F                projection, when F != D
//! ```

use rvernet_tensor::{multi_head_self_attention, AttentionParams, Float, Graph, Tensor, Var};

use super::{maybe_project, BackboneConfig, BackboneKind, Features};
use crate::error::Result;
use crate::layers::{LayerNorm, Linear, Mlp, PatchEmbed, TRUNC_STD};
use crate::params::{Bound, Init, ParamId, ParamStore};

pub(crate) const MLP_RATIO: usize = 4;

pub(crate) fn param_count(cfg: &BackboneConfig) -> usize {
    let d = cfg.width;
    let extra = if cfg.kind == BackboneKind::MiniDeit { 2 } else { 1 };
    let mut total = PatchEmbed::param_count(cfg.patch_size, d) + extra * d;
    if cfg.use_pos_embed {
        total += (cfg.num_patches() + extra) * d;
    }
    total += cfg.depth * (12 * d * d + 12 * d);
    total += 2 * d;
    if cfg.feature_dim != d {
        total += Linear::param_count(d, cfg.feature_dim);
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
struct Attention {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl Attention {
    fn new<T: Float>(params: &mut ParamStore<T>, name: &str, d: usize, init: &mut Init) -> Self {
        let mut w = |params: &mut ParamStore<T>, s: &str| params.add(format!("{name}.{s}.weight"), init.trunc_normal(&[d, d], TRUNC_STD));
        let wq = w(params, "q");
        let wk = w(params, "k");
        let wv = w(params, "v");
        let wo = w(params, "out");
        let bq = params.add(format!("{name}.q.bias"), Tensor::zeros(&[d]));
        let bv = params.add(format!("{name}.v.bias"), Tensor::zeros(&[d]));
        let bo = params.add(format!("{name}.out.bias"), Tensor::zeros(&[d]));
        Self { wq, bq, wk, wv, bv, wo, bo }
    }

    fn bind(&self, p: &Bound) -> AttentionParams {
        AttentionParams {
            wq: p[self.wq],
            bq: p[self.bq],
            wk: p[self.wk],
            wv: p[self.wv],
            bv: p[self.bv],
            wo: p[self.wo],
            bo: p[self.bo],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniVit {
    embed: PatchEmbed,
    cls_token: ParamId,
    dist_token: Option<ParamId>,
    pos_embed: Option<ParamId>,
    blocks: Vec<Block>,
    norm: LayerNorm,
    proj: Option<(ParamId, ParamId)>,
    heads: usize,
}

impl MiniVit {
    pub(crate) fn new<T: Float>(cfg: &BackboneConfig, params: &mut ParamStore<T>, init: &mut Init) -> Self {
        let d = cfg.width;
        let embed = PatchEmbed::new(params, "patch_embed", cfg.patch_size, d, init);
        let cls_token = params.add("cls_token", init.trunc_normal(&[1, 1, d], TRUNC_STD));
        let dist_token = (cfg.kind == BackboneKind::MiniDeit)
            .then(|| params.add("dist_token", init.trunc_normal(&[1, 1, d], TRUNC_STD)));
        let extra = 1 + usize::from(dist_token.is_some());
        let pos_embed = cfg
            .use_pos_embed
            .then(|| params.add("pos_embed", init.trunc_normal(&[1, cfg.num_patches() + extra, d], TRUNC_STD)));
        let blocks = (0..cfg.depth)
            .map(|j| {
                let name = format!("blocks.{j}");
                Block {
                    ln1: LayerNorm::new(params, &format!("{name}.ln1"), d),
                    attn: Attention::new(params, &format!("{name}.attn"), d, init),
                    ln2: LayerNorm::new(params, &format!("{name}.ln2"), d),
                    mlp: Mlp::new(params, &format!("{name}.mlp"), d, MLP_RATIO * d, init),
                }
            })
            .collect();
        let norm = LayerNorm::new(params, "norm", d);
        let proj = (cfg.feature_dim != d).then(|| {
            let l = Linear::new(params, "proj", d, cfg.feature_dim, init);
            (l.w, l.b)
        });
        Self { embed, cls_token, dist_token, pos_embed, blocks, norm, proj, heads: cfg.heads }
    }

    /// Token sequence after embedding: `[N, E + P, D]`.
    fn tokens<T: Float>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let patches = self.embed.forward(g, p, image)?;
        let n = g.shape(patches)[0];
        let mut seq = vec![g.expand_batch(p[self.cls_token], n)?];
        if let Some(dt) = self.dist_token {
            seq.push(g.expand_batch(p[dt], n)?);
        }
        seq.push(patches);
        let mut x = g.concat(&seq, 1)?;
        if let Some(pos) = self.pos_embed {
            let pe = g.select(p[pos], 0, 0)?;
            x = g.add_broadcast(x, pe)?;
        }
        Ok(x)
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Features> {
        let mut x = self.tokens(g, p, image)?;
        for b in &self.blocks {
            let h = b.ln1.forward(g, p, x)?;
            let a = multi_head_self_attention(g, h, &b.attn.bind(p), self.heads)?;
            x = g.add(x, a)?;
            let h = b.ln2.forward(g, p, x)?;
            let m = b.mlp.forward(g, p, h)?;
            x = g.add(x, m)?;
        }
        let x = self.norm.forward(g, p, x)?;
        let cls = g.select(x, 1, 0)?;
        let cls = maybe_project(g, p, self.proj, cls)?;
        let (feature, dist) = match self.dist_token {
            Some(_) => {
                let dist = g.select(x, 1, 1)?;
                let dist = maybe_project(g, p, self.proj, dist)?;
                let sum = g.add(cls, dist)?;
                (g.scale(sum, 0.5), Some(dist))
            }
            None => (cls, None),
        };
        Ok(Features { feature, cls: Some(cls), dist, last_conv: None })
    }

    /// Number of tokens entering the first block.
    pub(crate) fn token_count(&self, cfg: &BackboneConfig) -> usize {
        cfg.num_patches() + 1 + usize::from(self.dist_token.is_some())
    }
}
