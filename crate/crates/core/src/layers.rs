//! Parameterized building blocks shared by the backbones and the head.

use rvernet_tensor::{ConvSpec, Float, Graph, Tensor, Var};

use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};

/// Initialization std for linear and embedding weights.
pub const TRUNC_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Float>(params: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, init: &mut Init) -> Self {
        Self::with_std(params, name, d_in, d_out, TRUNC_STD, init)
    }

    pub fn with_std<T: Float>(
        params: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        init: &mut Init,
    ) -> Self {
        let w = params.add(format!("{name}.weight"), init.trunc_normal(&[d_out, d_in], std));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { w, b }
    }

    /// Task-head layer with weight std `1 / sqrt(d_in)`.
    pub fn fan_in<T: Float>(params: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, init: &mut Init) -> Self {
        Self::with_std(params, name, d_in, d_out, 1.0 / (d_in as f64).sqrt(), init)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p[self.w], Some(p[self.b]))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(params: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::ones(&[d]));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gamma], p[self.beta], crate::backbone::LN_EPS)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    /// He-initialized convolution with zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        params: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: ConvSpec,
        init: &mut Init,
    ) -> Self {
        let per_group = c_in / spec.groups;
        let fan_in = per_group * kernel * kernel;
        let w = params.add(format!("{name}.weight"), init.he_normal(&[c_out, per_group, kernel, kernel], fan_in));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { w, b, spec }
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize, groups: usize) -> usize {
        c_out * (c_in / groups) * kernel * kernel + c_out
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p[self.w], Some(p[self.b]), self.spec)?)
    }
}

/// Non-overlapping patch embedding: a `patch x patch` convolution with
/// stride `patch`, flattened to `[N, tokens, width]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchEmbed {
    pub w: ParamId,
    pub b: ParamId,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Float>(params: &mut ParamStore<T>, name: &str, patch: usize, width: usize, init: &mut Init) -> Self {
        let w = params.add(format!("{name}.weight"), init.trunc_normal(&[width, 3, patch, patch], TRUNC_STD));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[width]));
        Self { w, b, patch }
    }

    pub fn param_count(patch: usize, width: usize) -> usize {
        width * 3 * patch * patch + width
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
        let spec = ConvSpec::new(self.patch, rvernet_tensor::Padding::Valid, 1);
        let y = g.conv2d(image, p[self.w], Some(p[self.b]), spec)?;
        let s = g.shape(y).to_vec();
        let (n, d, gh, gw) = (s[0], s[1], s[2], s[3]);
        let y = g.reshape(y, &[n, d, gh * gw])?;
        Ok(g.permute(y, &[0, 2, 1])?)
    }
}

/// Two-layer GELU MLP over the last axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(params: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, init: &mut Init) -> Self {
        Self {
            fc1: Linear::new(params, &format!("{name}.fc1"), d, hidden, init),
            fc2: Linear::new(params, &format!("{name}.fc2"), hidden, d, init),
        }
    }

    pub fn param_count(d: usize, hidden: usize) -> usize {
        Linear::param_count(d, hidden) + Linear::param_count(hidden, d)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}
