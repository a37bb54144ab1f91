//! Miniature feature extractors used as the ROI module `f` and the
//! extra-ROI module `g`.
//!
//! Four families are available: an inverted-residual CNN, a ViT, a DeiT
//! (ViT plus a distillation token) and an MLP-Mixer. Every backbone maps a
//! `[N, 3, S, S]` image batch to `[N, feature_dim]` features.

mod cnn;
mod mixer;
mod vit;

use rvernet_tensor::{Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use cnn::MiniCnn;
pub use mixer::MiniMixer;
pub use vit::MiniVit;

use crate::error::{Error, Result};
use crate::params::{rng_for, Bound, Init, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    MiniCnn,
    MiniVit,
    MiniDeit,
    MiniMixer,
}

impl BackboneKind {
    pub fn is_patch_based(self) -> bool {
        !matches!(self, BackboneKind::MiniCnn)
    }

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::MiniCnn => "mini_cnn",
            BackboneKind::MiniVit => "mini_vit",
            BackboneKind::MiniDeit => "mini_deit",
            BackboneKind::MiniMixer => "mini_mixer",
        }
    }
}

/// Where a backbone sits in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    RoiF,
    XroiG,
    Standalone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub feature_dim: usize,
    pub depth: usize,
    /// Channel width: token width for patch models, last-stage channels for the CNN.
    pub width: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub use_pos_embed: bool,
    pub image_side: usize,
}

fn default_heads() -> usize {
    4
}

fn default_patch() -> usize {
    16
}

impl BackboneConfig {
    /// Desk-scale defaults: 64-pixel images, 16-pixel patches, depth 4,
    /// width 128, 4 heads, 128-dimensional features.
    pub fn desk(kind: BackboneKind) -> Self {
        Self {
            kind,
            feature_dim: 128,
            depth: 4,
            width: 128,
            heads: 4,
            patch_size: 16,
            use_pos_embed: kind.is_patch_based() && kind != BackboneKind::MiniMixer,
            image_side: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("{} backbone: {m}", self.kind.name())));
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.width == 0 || self.image_side == 0 {
            return fail("width and image_side must be positive".into());
        }
        match self.kind {
            BackboneKind::MiniCnn => {
                let stem = cnn::stem_channels(self);
                if stem == 0 || stem << cnn::downsamples(self.depth) != self.width {
                    return fail(format!(
                        "width {} must be divisible by {} (one halving per downsampling block)",
                        self.width,
                        1usize << cnn::downsamples(self.depth)
                    ));
                }
                if !self.image_side.is_multiple_of(2usize << cnn::downsamples(self.depth)) {
                    return fail(format!("image_side {} too small or odd for {} stride-2 stages", self.image_side, 1 + cnn::downsamples(self.depth)));
                }
            }
            _ => {
                if self.patch_size == 0 || !self.image_side.is_multiple_of(self.patch_size) {
                    return fail(format!(
                        "image_side {} not divisible by patch_size {}",
                        self.image_side, self.patch_size
                    ));
                }
                if self.kind != BackboneKind::MiniMixer && (self.heads == 0 || !self.width.is_multiple_of(self.heads)) {
                    return fail(format!("heads {} must divide width {}", self.heads, self.width));
                }
            }
        }
        Ok(())
    }

    /// Number of patch tokens for patch-based kinds.
    pub fn num_patches(&self) -> usize {
        let g = self.image_side / self.patch_size;
        g * g
    }

    /// Closed-form parameter count of the architecture this config builds.
    pub fn param_count(&self) -> usize {
        match self.kind {
            BackboneKind::MiniCnn => cnn::param_count(self),
            BackboneKind::MiniVit | BackboneKind::MiniDeit => vit::param_count(self),
            BackboneKind::MiniMixer => mixer::param_count(self),
        }
    }
}

/// Outputs of [`Backbone::forward_features`].
#[derive(Debug, Clone, Copy)]
pub struct Features {
    /// `[N, feature_dim]`.
    pub feature: Var,
    /// Class-token state (ViT/DeiT).
    pub cls: Option<Var>,
    /// Distillation-token state (DeiT).
    pub dist: Option<Var>,
    /// Activations of the last convolutional stage, `[N, C, h, w]` (CNN).
    pub last_conv: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Arch {
    Cnn(MiniCnn),
    Vit(MiniVit),
    Mixer(MiniMixer),
}

/// A feature extractor together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub role: Role,
    /// Trained against a CNN teacher's hard labels.
    pub distilled: bool,
    pub params: ParamStore<T>,
    pub(crate) arch: Arch,
}

impl<T: Float> Backbone<T> {
    /// Builds and initializes a backbone. Identical `(config, role, seed)`
    /// give bitwise identical parameters; each role draws from its own stream
    /// so `f` and `g` of one model are independent.
    pub fn build(config: &BackboneConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate()?;
        let stream = match role {
            Role::Standalone => 0xB0,
            Role::RoiF => 0xB1,
            Role::XroiG => 0xB2,
        };
        let mut rng = rng_for(seed, stream);
        let mut init = Init::new(&mut rng);
        let mut params = ParamStore::new();
        let arch = match config.kind {
            BackboneKind::MiniCnn => Arch::Cnn(MiniCnn::new(config, &mut params, &mut init)),
            BackboneKind::MiniVit | BackboneKind::MiniDeit => Arch::Vit(MiniVit::new(config, &mut params, &mut init)),
            BackboneKind::MiniMixer => Arch::Mixer(MiniMixer::new(config, &mut params, &mut init)),
        };
        Ok(Self { config: config.clone(), role, distilled: false, params, arch })
    }

    pub fn kind(&self) -> BackboneKind {
        self.config.kind
    }

    /// Differentiable features of `image: [N, 3, S, S]`.
    pub fn forward_features(&self, g: &mut Graph<T>, bound: &Bound, image: Var) -> Result<Features> {
        let s = g.shape(image).to_vec();
        let side = self.config.image_side;
        if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(Error::Tensor(rvernet_tensor::TensorError::Shape {
                op: "forward_features",
                detail: format!("expected [N, 3, {side}, {side}], got {s:?}"),
            }));
        }
        let image = standardize(g, image, side)?;
        match &self.arch {
            Arch::Cnn(m) => m.forward(g, bound, image),
            Arch::Vit(m) => m.forward(g, bound, image),
            Arch::Mixer(m) => m.forward(g, bound, image),
        }
    }

    /// Inference-only features of an image batch.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let f = self.forward_features(&mut g, &bound, x)?;
        Ok(g.value(f.feature).clone())
    }

    /// Tokens entering the first block of a patch-based backbone: patches
    /// plus class (and distillation) tokens for ViT/DeiT.
    pub fn token_count(&self) -> Option<usize> {
        match &self.arch {
            Arch::Cnn(_) => None,
            Arch::Vit(m) => Some(m.token_count(&self.config)),
            Arch::Mixer(_) => Some(self.config.num_patches()),
        }
    }

    /// Mixer features with every token-mixing branch dropped, leaving only
    /// the channel-mixing path.
    pub fn channel_mixing_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let Arch::Mixer(m) = &self.arch else {
            return Err(Error::Unsupported(format!("{} has no token mixing", self.kind().name())));
        };
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let x = standardize(&mut g, x, self.config.image_side)?;
        let f = m.forward_with(&mut g, &bound, x, false)?;
        Ok(g.value(f.feature).clone())
    }
}

/// Pixel mean and spread assumed by every backbone: inputs in `[0, 1]` are
/// mapped to `(x - 0.5) / 0.25` before the first layer.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

fn standardize<T: Float>(g: &mut Graph<T>, image: Var, side: usize) -> Result<Var> {
    let x = g.scale(image, 1.0 / INPUT_STD);
    let shift = g.constant(Tensor::full(&[side], T::from_f64(-INPUT_MEAN / INPUT_STD)));
    Ok(g.add_broadcast(x, shift)?)
}

/// Projection applied when the model width differs from `feature_dim`.
pub(crate) fn maybe_project<T: Float>(
    g: &mut Graph<T>,
    bound: &Bound,
    proj: Option<(crate::params::ParamId, crate::params::ParamId)>,
    x: Var,
) -> Result<Var> {
    Ok(match proj {
        Some((w, b)) => g.linear(x, bound[w], Some(bound[b]))?,
        None => x,
    })
}
