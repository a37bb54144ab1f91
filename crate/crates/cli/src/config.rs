//! Experiment configuration file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rvernet_core::backbone::{BackboneConfig, BackboneKind};
use rvernet_core::data::{filter_classes, generate_synthetic, load_dataset, Dataset, SyntheticSpec};
use rvernet_core::model::ModelConfig;
use rvernet_core::perturb::{default_specs, PerturbSpec};
use rvernet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Generate this synthetic dataset in memory.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Or load a dataset from a manifest written by `gen-data`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub exclude_classes: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    /// `None` runs the default permutation and translocation set.
    #[serde(default)]
    pub specs: Option<Vec<PerturbSpec>>,
    /// Patch side of the default permutations.
    #[serde(default = "d_patch")]
    pub patch_side: usize,
}

fn d_patch() -> usize {
    16
}

impl Default for PerturbSection {
    fn default() -> Self {
        Self { specs: None, patch_side: d_patch() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub perturb: PerturbSection,
    pub output_dir: PathBuf,
    /// Seeds model initialization and training; the dataset keeps its own.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let teacher = cfg.train.distill.as_mut().and_then(|d| d.teacher_checkpoint.as_mut());
        for p in cfg.dataset.manifest.iter_mut().chain(teacher) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks everything that does not need the dataset.
    pub fn validate(&self) -> CliResult<()> {
        match (&self.dataset.synthetic, &self.dataset.manifest) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => return Err(CliError::usage("dataset: set exactly one of `synthetic` and `manifest`")),
        }
        self.model.validate()?;
        self.train.validate()?;
        let side = self.model.roi.image_side;
        if let Some(s) = &self.dataset.synthetic {
            if s.image_side != side {
                return Err(CliError::usage(format!(
                    "dataset image_side {} differs from model image_side {side}",
                    s.image_side
                )));
            }
        }
        for spec in self.perturb_specs() {
            spec.validate(side)?;
        }
        if let Some(d) = &self.train.distill {
            let m = &self.model;
            let deit = |b: &BackboneConfig| b.kind == BackboneKind::MiniDeit;
            if !(m.mode.uses_roi() && deit(&m.roi) || m.mode.uses_xroi() && deit(&m.xroi)) {
                return Err(CliError::usage("train.distill needs a used mini_deit branch"));
            }
            if let Some(t) = &d.teacher {
                if t.kind != BackboneKind::MiniCnn {
                    return Err(CliError::usage(format!("train.distill.teacher must be mini_cnn, got {}", t.kind.name())));
                }
                t.validate()?;
            }
            if let Some(p) = &d.teacher_checkpoint {
                if !p.is_file() {
                    return Err(CliError::usage(format!("teacher checkpoint {} not found", p.display())));
                }
            }
        }
        if let Some(subset) = &self.train.subset {
            if let Some(c) = subset.iter().find(|&&c| c >= self.model.num_classes) {
                return Err(CliError::usage(format!("train.subset class {c} out of range")));
            }
        }
        Ok(())
    }

    pub fn perturb_specs(&self) -> Vec<PerturbSpec> {
        self.perturb.specs.clone().unwrap_or_else(|| default_specs(self.model.roi.image_side, self.perturb.patch_side))
    }

    /// Loads or generates the dataset, drops excluded classes and checks it
    /// against the model.
    pub fn dataset(&self) -> CliResult<Dataset> {
        let raw = match (&self.dataset.synthetic, &self.dataset.manifest) {
            (Some(s), _) => generate_synthetic(s)?,
            (None, Some(m)) => load_dataset(m)?,
            (None, None) => return Err(CliError::usage("dataset: no source")),
        };
        let (ds, _) = filter_classes(&raw, &self.dataset.exclude_classes)?;
        if ds.num_classes() != self.model.num_classes {
            return Err(CliError::usage(format!(
                "model.num_classes is {} but the dataset has {} classes",
                self.model.num_classes,
                ds.num_classes()
            )));
        }
        if let Some(side) = ds.image_side() {
            if side != self.model.roi.image_side {
                return Err(CliError::usage(format!(
                    "dataset images are {side} pixels, the model expects {}",
                    self.model.roi.image_side
                )));
            }
        }
        Ok(ds)
    }

    /// Training configuration with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}
