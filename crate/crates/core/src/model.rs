//! The two-branch RveRNet classifier and the single-backbone classifier used
//! for teachers and distillation students.
//!
//! ```text
//! p(x1, x2) = Softmax(Linear2(ReLU(Linear1(Concat(f(x1), g(x2))))))
//! ```
//!
//! In the ablation modes `Linear1` reads only `f(x1)` or only `g(x2)`.

use rvernet_tensor::{Checkpoint, Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneKind, Features, Role};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{rng_for, Bound, Init, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Both,
    RoiOnly,
    XroiOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::RoiOnly, Mode::XroiOnly, Mode::Both];

    pub fn uses_roi(self) -> bool {
        self != Mode::XroiOnly
    }

    pub fn uses_xroi(self) -> bool {
        self != Mode::RoiOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Both => "both",
            Mode::RoiOnly => "roi_only",
            Mode::XroiOnly => "xroi_only",
        }
    }
}

/// Which half of a cut-out pair an input is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Roi,
    Xroi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub roi: BackboneConfig,
    pub xroi: BackboneConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Width of the head's hidden layer; defaults to the ROI feature width.
    #[serde(default)]
    pub hidden: Option<usize>,
    pub num_classes: usize,
}

fn default_mode() -> Mode {
    Mode::Both
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.hidden.unwrap_or(self.roi.feature_dim)
    }

    pub fn head_input(&self) -> usize {
        match self.mode {
            Mode::Both => self.roi.feature_dim + self.xroi.feature_dim,
            Mode::RoiOnly => self.roi.feature_dim,
            Mode::XroiOnly => self.xroi.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.hidden() == 0 {
            return Err(Error::Config("hidden must be positive".into()));
        }
        if self.roi.image_side != self.xroi.image_side {
            return Err(Error::Config(format!(
                "roi image_side {} differs from xroi image_side {}",
                self.roi.image_side, self.xroi.image_side
            )));
        }
        self.roi.validate()?;
        self.xroi.validate()
    }
}

/// The integration module `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub params: ParamStore<T>,
    pub linear1: Linear,
    pub linear2: Linear,
}

impl<T: Float> Head<T> {
    fn new(d_in: usize, hidden: usize, k: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, 0xB3);
        let mut init = Init::new(&mut rng);
        let mut params = ParamStore::new();
        let linear1 = Linear::fan_in(&mut params, "linear1", d_in, hidden, &mut init);
        let linear2 = Linear::fan_in(&mut params, "linear2", hidden, k, &mut init);
        Self { params, linear1, linear2 }
    }

    fn forward(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let h = self.linear1.forward(g, p, z)?;
        let h = g.relu(h);
        self.linear2.forward(g, p, h)
    }
}

/// Graph handles of a bound model. Unused branches are not bound.
#[derive(Debug, Clone)]
pub struct ModelBound {
    pub roi: Option<Bound>,
    pub xroi: Option<Bound>,
    pub head: Bound,
}

/// Outputs of [`RveRNetModel::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub logits: Var,
    pub roi: Option<Features>,
    pub xroi: Option<Features>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RveRNetModel<T> {
    pub config: ModelConfig,
    /// `f`, applied to the ROI-only image `x1`.
    pub roi: Backbone<T>,
    /// `g`, applied to the extra-ROI image `x2`.
    pub xroi: Backbone<T>,
    pub head: Head<T>,
}

impl<T: Float> RveRNetModel<T> {
    /// Builds both backbones (independently initialized, no sharing) and the
    /// head. The unused backbone of an ablation mode is still built so all
    /// modes share one parameter layout up to the head's input width.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let roi = Backbone::build(&config.roi, Role::RoiF, seed)?;
        let xroi = Backbone::build(&config.xroi, Role::XroiG, seed)?;
        let head = Head::new(config.head_input(), config.hidden(), config.num_classes, seed);
        Ok(Self { config: config.clone(), roi, xroi, head })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn image_side(&self) -> usize {
        self.config.roi.image_side
    }

    pub fn backbone(&self, branch: Branch) -> &Backbone<T> {
        match branch {
            Branch::Roi => &self.roi,
            Branch::Xroi => &self.xroi,
        }
    }

    pub fn backbone_mut(&mut self, branch: Branch) -> &mut Backbone<T> {
        match branch {
            Branch::Roi => &mut self.roi,
            Branch::Xroi => &mut self.xroi,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelBound {
        let mode = self.mode();
        ModelBound {
            roi: mode.uses_roi().then(|| self.roi.params.bind(g, trainable)),
            xroi: mode.uses_xroi().then(|| self.xroi.params.bind(g, trainable)),
            head: self.head.params.bind(g, trainable),
        }
    }

    /// Differentiable logits. Inputs unused by the mode may be `None`.
    pub fn forward(&self, g: &mut Graph<T>, bound: &ModelBound, x1: Option<Var>, x2: Option<Var>) -> Result<ModelOutput> {
        let mode = self.mode();
        let roi = match (mode.uses_roi(), x1, &bound.roi) {
            (false, _, _) => None,
            (true, Some(x), Some(b)) => Some(self.roi.forward_features(g, b, x)?),
            (true, None, _) => return Err(Error::MissingInput(format!("mode {} needs the ROI input x1", mode.name()))),
            (true, Some(_), None) => return Err(Error::MissingInput("ROI backbone not bound".into())),
        };
        let xroi = match (mode.uses_xroi(), x2, &bound.xroi) {
            (false, _, _) => None,
            (true, Some(x), Some(b)) => Some(self.xroi.forward_features(g, b, x)?),
            (true, None, _) => {
                return Err(Error::MissingInput(format!("mode {} needs the extra-ROI input x2", mode.name())))
            }
            (true, Some(_), None) => return Err(Error::MissingInput("extra-ROI backbone not bound".into())),
        };
        let z = match (roi, xroi) {
            (Some(a), Some(b)) => g.concat(&[a.feature, b.feature], 1)?,
            (Some(a), None) => a.feature,
            (None, Some(b)) => b.feature,
            (None, None) => unreachable!("every mode uses a branch"),
        };
        let logits = self.head.forward(g, &bound.head, z)?;
        Ok(ModelOutput { logits, roi, xroi })
    }

    /// Pre-softmax scores `[N, K]`.
    pub fn logits(&self, x1: Option<&Tensor<T>>, x2: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x1 = x1.filter(|_| self.mode().uses_roi()).map(|x| g.constant(x.clone()));
        let x2 = x2.filter(|_| self.mode().uses_xroi()).map(|x| g.constant(x.clone()));
        let out = self.forward(&mut g, &bound, x1, x2)?;
        Ok(g.value(out.logits).clone())
    }

    /// Row-wise softmax of [`Self::logits`].
    pub fn class_probabilities(&self, x1: Option<&Tensor<T>>, x2: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        Ok(softmax_rows(&self.logits(x1, x2)?))
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.head.params.num_scalars();
        if self.mode().uses_roi() {
            n += self.roi.params.num_scalars();
        }
        if self.mode().uses_xroi() {
            n += self.xroi.params.num_scalars();
        }
        n
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "model": "rvernet",
            "config": self.config,
            "roi_distilled": self.roi.distilled,
            "xroi_distilled": self.xroi.distilled,
        });
        let mut ck = Checkpoint::new(meta);
        self.roi.params.write_to(&mut ck, "roi/");
        self.xroi.params.write_to(&mut ck, "xroi/");
        self.head.params.write_to(&mut ck, "head/");
        ck
    }

    /// Rebuilds a model from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("rvernet") {
            return Err(Error::Validation("checkpoint does not hold an RveRNet model".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Validation(format!("checkpoint model config: {e}")))?;
        let mut m = Self::build(&config, 0)?;
        m.roi.params.read_from(ck, "roi/")?;
        m.xroi.params.read_from(ck, "xroi/")?;
        m.head.params.read_from(ck, "head/")?;
        m.roi.distilled = ck.meta["roi_distilled"].as_bool().unwrap_or(false);
        m.xroi.distilled = ck.meta["xroi_distilled"].as_bool().unwrap_or(false);
        Ok(m)
    }
}

/// Builds an RveRNet in mode `both`.
pub fn build_rvernet<T: Float>(
    roi_cfg: &BackboneConfig,
    xroi_cfg: &BackboneConfig,
    num_classes: usize,
    hidden: usize,
    seed: u64,
) -> Result<RveRNetModel<T>> {
    let cfg = ModelConfig {
        roi: roi_cfg.clone(),
        xroi: xroi_cfg.clone(),
        mode: Mode::Both,
        hidden: Some(hidden),
        num_classes,
    };
    RveRNetModel::build(&cfg, seed)
}

/// Numerically stable softmax over the rows of `[N, K]`.
pub fn softmax_rows<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[logits.ndim() - 1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().fold(row[0], |a, &b| a.max(b));
        let mut s = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Logits of a [`Classifier`] forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierOutput {
    /// Class-head logits.
    pub cls: Var,
    /// Distillation-head logits (DeiT only).
    pub dist: Option<Var>,
    /// Inference logits: the mean of both heads for a distilled DeiT,
    /// otherwise `cls`.
    pub logits: Var,
}

/// A single backbone with a linear class head (and a distillation head for
/// DeiT), reading one half of each cut-out pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub backbone: Backbone<T>,
    pub input: Branch,
    pub head: ParamStore<T>,
    cls: Linear,
    dist: Option<Linear>,
    pub num_classes: usize,
}

impl<T: Float> Classifier<T> {
    pub fn build(cfg: &BackboneConfig, input: Branch, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {num_classes}")));
        }
        let backbone = Backbone::build(cfg, Role::Standalone, seed)?;
        let mut rng = rng_for(seed, 0xB4);
        let mut init = Init::new(&mut rng);
        let mut head = ParamStore::new();
        let cls = Linear::fan_in(&mut head, "cls", cfg.feature_dim, num_classes, &mut init);
        let dist = (cfg.kind == BackboneKind::MiniDeit)
            .then(|| Linear::fan_in(&mut head, "dist", cfg.feature_dim, num_classes, &mut init));
        Ok(Self { backbone, input, head, cls, dist, num_classes })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> (Bound, Bound) {
        (self.backbone.params.bind(g, trainable), self.head.bind(g, trainable))
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &(Bound, Bound), image: Var) -> Result<ClassifierOutput> {
        let f = self.backbone.forward_features(g, &bound.0, image)?;
        match (self.dist, f.cls, f.dist) {
            (Some(dh), Some(c), Some(d)) => {
                let cls = self.cls.forward(g, &bound.1, c)?;
                let dist = dh.forward(g, &bound.1, d)?;
                let logits = if self.backbone.distilled {
                    let s = g.add(cls, dist)?;
                    g.scale(s, 0.5)
                } else {
                    cls
                };
                Ok(ClassifierOutput { cls, dist: Some(dist), logits })
            }
            _ => {
                let cls = self.cls.forward(g, &bound.1, f.feature)?;
                Ok(ClassifierOutput { cls, dist: None, logits: cls })
            }
        }
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &bound, x)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "model": "classifier",
            "backbone": self.backbone.config,
            "input": self.input,
            "num_classes": self.num_classes,
            "distilled": self.backbone.distilled,
        });
        let mut ck = Checkpoint::new(meta);
        self.backbone.params.write_to(&mut ck, "backbone/");
        self.head.write_to(&mut ck, "head/");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("classifier") {
            return Err(Error::Validation("checkpoint does not hold a single-backbone classifier".into()));
        }
        let parse = |key: &str| ck.meta.get(key).cloned().ok_or_else(|| Error::Validation(format!("checkpoint meta lacks {key}")));
        let cfg: BackboneConfig =
            serde_json::from_value(parse("backbone")?).map_err(|e| Error::Validation(format!("checkpoint backbone: {e}")))?;
        let input: Branch = serde_json::from_value(parse("input")?).map_err(|e| Error::Validation(format!("checkpoint input: {e}")))?;
        let k = parse("num_classes")?.as_u64().ok_or_else(|| Error::Validation("num_classes is not an integer".into()))? as usize;
        let mut c = Self::build(&cfg, input, k, 0)?;
        c.backbone.params.read_from(ck, "backbone/")?;
        c.head.read_from(ck, "head/")?;
        c.backbone.distilled = ck.meta["distilled"].as_bool().unwrap_or(false);
        Ok(c)
    }
}
