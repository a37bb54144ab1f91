//! Training loop, hard distillation and training histories.

mod optim;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rvernet_tensor::{Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use optim::{adam_step, lr_schedule, AdamHyper, AdamState};

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::data::{make_batch, Batch, CutoutPair};
use crate::error::{Error, Result};
use crate::metrics::{write_json, MetricsReport};
use crate::model::{Branch, Classifier, RveRNetModel};
use crate::params::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the distillation term.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// Teacher architecture, trained first when no checkpoint is given.
    #[serde(default)]
    pub teacher: Option<BackboneConfig>,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
}

fn d_lambda() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr0: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "d_eps")]
    pub label_smoothing: f64,
    #[serde(default = "d_flip")]
    pub flip_p: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub distill: Option<DistillConfig>,
    /// Also write a checkpoint every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Classes scored by the per-epoch subset F1.
    #[serde(default)]
    pub subset: Option<Vec<usize>>,
}

fn d_lr() -> f64 {
    4e-3
}
fn d_batch() -> usize {
    50
}
fn d_epochs() -> usize {
    30
}
fn d_warmup() -> usize {
    5
}
fn d_eps() -> f64 {
    0.1
}
fn d_flip() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: d_lr(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            warmup_epochs: d_warmup(),
            label_smoothing: d_eps(),
            flip_p: d_flip(),
            seed: 0,
            distill: None,
            checkpoint_every: None,
            subset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return fail(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return fail(format!("flip_p {} outside [0, 1]", self.flip_p));
        }
        if let Some(d) = &self.distill {
            if !(0.0..=1.0).contains(&d.lambda) {
                return fail(format!("distill.lambda {} outside [0, 1]", d.lambda));
            }
        }
        if self.checkpoint_every == Some(0) {
            return fail("checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

/// `(1 - lambda) CE_eps(cls, targets) + lambda CE(dist, argmax(teacher))`.
/// The teacher enters as constant logits and receives no gradient.
pub fn hard_distillation_loss<T: Float>(
    g: &mut Graph<T>,
    student_cls: Var,
    student_dist: Var,
    teacher_logits: &Tensor<T>,
    targets: &[usize],
    epsilon: f64,
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
    }
    if teacher_logits.shape() != g.shape(student_dist) || g.shape(student_cls) != g.shape(student_dist) {
        return Err(Error::Tensor(rvernet_tensor::TensorError::Shape {
            op: "hard_distillation_loss",
            detail: format!(
                "cls {:?}, dist {:?}, teacher {:?}",
                g.shape(student_cls),
                g.shape(student_dist),
                teacher_logits.shape()
            ),
        }));
    }
    let teacher_labels = teacher_logits.argmax_rows();
    let a = g.cross_entropy(student_cls, targets, epsilon)?;
    let b = g.cross_entropy(student_dist, &teacher_labels, 0.0)?;
    let a = g.scale(a, 1.0 - lambda);
    let b = g.scale(b, lambda);
    Ok(g.add(a, b)?)
}

/// A model the training loop can optimize.
pub trait Trainable<T: Float> {
    /// Every parameter tensor, in a fixed order.
    fn parameters(&self) -> Vec<&Tensor<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>>;
    /// Batch loss, plus the graph handle of each parameter (`None` for
    /// parameters the forward pass does not use).
    fn batch_loss(
        &self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        epsilon: f64,
        teacher: Option<(&Classifier<T>, f64)>,
    ) -> Result<(Var, Vec<Option<Var>>)>;
    /// Inference logits `[N, K]`.
    fn predict_logits(&self, batch: &Batch<T>) -> Result<Tensor<T>>;
    fn num_classes(&self) -> usize;
}

impl<T: Float> Trainable<T> for RveRNetModel<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.roi.params.tensors().iter().collect();
        v.extend(self.xroi.params.tensors());
        v.extend(self.head.params.tensors());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.roi.params.tensors_mut().iter_mut().collect();
        v.extend(self.xroi.params.tensors_mut());
        v.extend(self.head.params.tensors_mut());
        v
    }

    fn batch_loss(
        &self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        epsilon: f64,
        teacher: Option<(&Classifier<T>, f64)>,
    ) -> Result<(Var, Vec<Option<Var>>)> {
        if teacher.is_some() {
            return Err(Error::Config(
                "distillation trains a single-backbone DeiT student; the RveRNet model is fine-tuned without a teacher".into(),
            ));
        }
        let bound = self.bind(g, true);
        let x1 = self.mode().uses_roi().then(|| g.constant(batch.x1.clone()));
        let x2 = self.mode().uses_xroi().then(|| g.constant(batch.x2.clone()));
        let out = self.forward(g, &bound, x1, x2)?;
        let loss = g.cross_entropy(out.logits, &batch.labels, epsilon)?;
        let mut vars = Vec::new();
        for (b, n) in [(&bound.roi, self.roi.params.len()), (&bound.xroi, self.xroi.params.len())] {
            match b {
                Some(b) => vars.extend(b.vars().iter().map(|&v| Some(v))),
                None => vars.extend(std::iter::repeat_n(None, n)),
            }
        }
        vars.extend(bound.head.vars().iter().map(|&v| Some(v)));
        Ok((loss, vars))
    }

    fn predict_logits(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        self.logits(Some(&batch.x1), Some(&batch.x2))
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

fn view<T: Float>(batch: &Batch<T>, branch: Branch) -> &Tensor<T> {
    match branch {
        Branch::Roi => &batch.x1,
        Branch::Xroi => &batch.x2,
    }
}

impl<T: Float> Trainable<T> for Classifier<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        self.backbone.params.tensors().iter().chain(self.head.tensors()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.backbone.params.tensors_mut().iter_mut().chain(self.head.tensors_mut()).collect()
    }

    fn batch_loss(
        &self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        epsilon: f64,
        teacher: Option<(&Classifier<T>, f64)>,
    ) -> Result<(Var, Vec<Option<Var>>)> {
        let bound = self.bind(g, true);
        let x = g.constant(view(batch, self.input).clone());
        let out = self.forward(g, &bound, x)?;
        let loss = match (teacher, out.dist) {
            (Some((t, lambda)), Some(dist)) => {
                let tl = t.logits(view(batch, t.input))?;
                hard_distillation_loss(g, out.cls, dist, &tl, &batch.labels, epsilon, lambda)?
            }
            (Some(_), None) => {
                return Err(Error::Config(format!(
                    "distillation needs a mini_deit student, got {}",
                    self.backbone.kind().name()
                )))
            }
            (None, _) => g.cross_entropy(out.cls, &batch.labels, epsilon)?,
        };
        let vars = bound.0.vars().iter().chain(bound.1.vars()).map(|&v| Some(v)).collect();
        Ok((loss, vars))
    }

    fn predict_logits(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        self.logits(view(batch, self.input))
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

const EVAL_BATCH: usize = 100;

/// Predicted classes for `pairs`, evaluated in fixed-size chunks.
pub fn predict<T: Float, M: Trainable<T> + ?Sized>(model: &M, pairs: &[CutoutPair]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let refs: Vec<&CutoutPair> = chunk.iter().collect();
        let batch = make_batch::<T>(&refs, None)?;
        out.extend(model.predict_logits(&batch)?.argmax_rows());
    }
    Ok(out)
}

/// Metrics of `model` on `pairs`.
pub fn evaluate<T: Float, M: Trainable<T> + ?Sized>(model: &M, pairs: &[CutoutPair], subset: Option<&[usize]>) -> Result<MetricsReport> {
    let preds = predict(model, pairs)?;
    let targets: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    MetricsReport::compute(&preds, &targets, model.num_classes(), subset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub top1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub subset_f1: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate of every optimizer step.
    pub lr_trace: Vec<f64>,
    pub f1_averaging: String,
}

impl TrainHistory {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(["epoch", "loss", "top1", "macro_f1", "subset_f1", "lr"]).map_err(err)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.17e}"));
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.17e}", r.loss),
                opt(r.top1),
                opt(r.macro_f1),
                opt(r.subset_f1),
                format!("{:.17e}", r.lr),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let p = dir.join(format!("{stem}.csv"));
        std::fs::write(&p, self.to_csv()?).map_err(|e| Error::io(&p, e))?;
        write_json(&dir.join(format!("{stem}.json")), self)
    }
}

/// Trains `model` in place. See [`train_with`].
pub fn train<T: Float, M: Trainable<T>>(
    model: &mut M,
    train_set: &[CutoutPair],
    test_set: &[CutoutPair],
    cfg: &TrainConfig,
    teacher: Option<&Classifier<T>>,
) -> Result<TrainHistory> {
    train_with(model, train_set, test_set, cfg, teacher, |_, _| Ok(()))
}

/// Seeded mini-batch training with flip augmentation, smoothed
/// cross-entropy (or hard distillation when a teacher is given), Adam and
/// the warm-up/cosine schedule. `on_epoch(epoch, model)` runs after each
/// epoch. Deterministic given `cfg.seed`.
pub fn train_with<T: Float, M: Trainable<T>>(
    model: &mut M,
    train_set: &[CutoutPair],
    test_set: &[CutoutPair],
    cfg: &TrainConfig,
    teacher: Option<&Classifier<T>>,
    mut on_epoch: impl FnMut(usize, &M) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut history = TrainHistory { f1_averaging: crate::metrics::F1_AVERAGING.into(), ..Default::default() };
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let lambda = cfg.distill.as_ref().map_or(d_lambda(), |d| d.lambda);
    let teacher = teacher.map(|t| (t, lambda));
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut state = AdamState::new(model.parameters());
    let mut rng = rng_for(cfg.seed, 0x7241);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..order.len()).map(|_| rng.random::<f64>() < cfg.flip_p).collect();
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<&CutoutPair> = idx.iter().map(|&i| &train_set[i]).collect();
            let f = &flips[b * cfg.batch_size..b * cfg.batch_size + idx.len()];
            let batch = make_batch::<T>(&pairs, Some(f))?;
            let mut g = Graph::new();
            let (loss, vars) = model.batch_loss(&mut g, &batch, cfg.label_smoothing, teacher)?;
            let value = g.value(loss).data()[0].to_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {value} at epoch {epoch}, batch {b}")));
            }
            loss_sum += value;
            let grads = g.backward(loss)?;
            let params = model.parameters();
            let grads: Vec<Tensor<T>> = vars
                .iter()
                .zip(&params)
                .map(|(v, p)| match v {
                    Some(v) => grads.get_or_zeros(*v, p.shape()),
                    None => Tensor::zeros(p.shape()),
                })
                .collect();
            let lr = lr_schedule(step, total, warmup, cfg.lr0)?;
            history.lr_trace.push(lr);
            adam_step(&mut model.parameters_mut(), &grads, &mut state, lr, AdamHyper::default())?;
            step += 1;
        }
        let (top1, macro_f1, subset_f1) = if test_set.is_empty() {
            (None, None, None)
        } else {
            let r = evaluate(model, test_set, cfg.subset.as_deref())?;
            (Some(r.top1), Some(r.macro_f1), r.subset_f1.map(|s| s.value))
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            top1,
            macro_f1,
            subset_f1,
            lr: *history.lr_trace.last().expect("at least one step per epoch"),
        });
        on_epoch(epoch, model)?;
    }
    Ok(history)
}

/// Result of [`train_teacher_then_distill`].
#[derive(Debug, Clone)]
pub struct Distilled<T> {
    pub teacher: Classifier<T>,
    pub student: Classifier<T>,
    pub teacher_history: TrainHistory,
    pub student_history: TrainHistory,
    /// Teacher test top-1 in percent.
    pub teacher_top1: f64,
    /// Set when the teacher did not beat chance; training proceeds anyway.
    pub warning: Option<String>,
}

/// Trains a CNN teacher on one view of the pairs, freezes it, then trains a
/// DeiT student on the same view with [`hard_distillation_loss`]. The
/// returned student is tagged as distilled.
#[allow(clippy::too_many_arguments)]
pub fn train_teacher_then_distill<T: Float>(
    teacher_cfg: &BackboneConfig,
    student_cfg: &BackboneConfig,
    input: Branch,
    num_classes: usize,
    train_set: &[CutoutPair],
    test_set: &[CutoutPair],
    cfg: &TrainConfig,
) -> Result<Distilled<T>> {
    if teacher_cfg.kind != BackboneKind::MiniCnn {
        return Err(Error::Config(format!("teacher must be mini_cnn, got {}", teacher_cfg.kind.name())));
    }
    let mut teacher = Classifier::<T>::build(teacher_cfg, input, num_classes, cfg.seed)?;
    let teacher_history = train(&mut teacher, train_set, test_set, &TrainConfig { distill: None, ..cfg.clone() }, None)?;
    distill_from(teacher, teacher_history, student_cfg, input, num_classes, train_set, test_set, cfg)
}

/// Distills a student from an already trained teacher.
#[allow(clippy::too_many_arguments)]
pub fn distill_from<T: Float>(
    teacher: Classifier<T>,
    teacher_history: TrainHistory,
    student_cfg: &BackboneConfig,
    input: Branch,
    num_classes: usize,
    train_set: &[CutoutPair],
    test_set: &[CutoutPair],
    cfg: &TrainConfig,
) -> Result<Distilled<T>> {
    if student_cfg.kind != BackboneKind::MiniDeit {
        return Err(Error::Config(format!("student must be mini_deit, got {}", student_cfg.kind.name())));
    }
    let eval_set = if test_set.is_empty() { train_set } else { test_set };
    let teacher_top1 = evaluate(&teacher, eval_set, None)?.top1;
    let chance = 100.0 / num_classes as f64;
    let warning = (teacher_top1 <= chance)
        .then(|| format!("teacher top-1 {teacher_top1:.2}% is not above chance ({chance:.2}%); distilling anyway"));
    let mut student = Classifier::<T>::build(student_cfg, input, num_classes, cfg.seed)?;
    student.backbone.distilled = true;
    let student_cfg = TrainConfig { distill: Some(cfg.distill.clone().unwrap_or(DistillConfig { lambda: d_lambda(), teacher: None, teacher_checkpoint: None })), ..cfg.clone() };
    let student_history = train(&mut student, train_set, test_set, &student_cfg, Some(&teacher))?;
    Ok(Distilled { teacher, student, teacher_history, student_history, teacher_top1, warning })
}
