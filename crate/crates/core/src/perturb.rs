//! Patch permutation and translocation of the branch inputs, and the
//! harness measuring the resulting top-1 decline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rvernet_tensor::{Float, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::data::CutoutPair;
use crate::error::{Error, Result};
use crate::metrics::{top1, write_json};
use crate::model::RveRNetModel;
use crate::params::rng_for;
use crate::train::predict;

const PERMUTATION_STREAM: u64 = 0x9E57;

/// Which branch input a perturbation is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Roi,
    Xroi,
    Both,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Roi => "roi",
            Target::Xroi => "xroi",
            Target::Both => "both",
        }
    }

    fn hits_roi(self) -> bool {
        self != Target::Xroi
    }

    fn hits_xroi(self) -> bool {
        self != Target::Roi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermutationSpec {
    pub patch_side: usize,
    pub seed: u64,
    pub target: Target,
}

/// Shift by `dx` pixels right and `dy` pixels down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslocationSpec {
    pub dx: i64,
    pub dy: i64,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbSpec {
    Permutation(PermutationSpec),
    Translocation(TranslocationSpec),
}

impl PerturbSpec {
    pub fn target(&self) -> Target {
        match self {
            PerturbSpec::Permutation(p) => p.target,
            PerturbSpec::Translocation(t) => t.target,
        }
    }

    /// Operator name without the target, e.g. `permute16` or `shift(-9,18)`.
    pub fn operator(&self) -> String {
        match self {
            PerturbSpec::Permutation(p) => format!("permute{}", p.patch_side),
            PerturbSpec::Translocation(t) => format!("shift({},{})", t.dx, t.dy),
        }
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        match self {
            PerturbSpec::Permutation(p) => check_patch_side(side, p.patch_side),
            PerturbSpec::Translocation(t) => check_offsets(side, t.dx, t.dy),
        }
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.operator(), self.target().name())
    }
}

/// The three permutation targets at `patch_side`, then the fixed
/// extra-ROI translocations `(-30, 63)`, `(60, -85)`, `(37, 139)` given for
/// 224-pixel images, rescaled to `side` and rounded.
pub fn default_specs(side: usize, patch_side: usize) -> Vec<PerturbSpec> {
    let mut specs: Vec<PerturbSpec> = [Target::Roi, Target::Xroi, Target::Both]
        .into_iter()
        .map(|target| PerturbSpec::Permutation(PermutationSpec { patch_side, seed: 0, target }))
        .collect();
    let scale = side as f64 / 224.0;
    for (dx, dy) in [(-30.0, 63.0), (60.0, -85.0), (37.0, 139.0)] {
        specs.push(PerturbSpec::Translocation(TranslocationSpec {
            dx: (dx * scale).round() as i64,
            dy: (dy * scale).round() as i64,
            target: Target::Xroi,
        }));
    }
    specs
}

fn check_patch_side(side: usize, patch_side: usize) -> Result<()> {
    if patch_side == 0 || !side.is_multiple_of(patch_side) {
        return Err(Error::Tensor(TensorError::Shape {
            op: "permute_patches",
            detail: format!("image side {side} is not divisible by patch side {patch_side}"),
        }));
    }
    Ok(())
}

fn check_offsets(side: usize, dx: i64, dy: i64) -> Result<()> {
    if dx.unsigned_abs() >= side as u64 || dy.unsigned_abs() >= side as u64 {
        return Err(Error::Config(format!("translocation ({dx}, {dy}) must stay below the image side {side} in magnitude")));
    }
    Ok(())
}

fn image_side<T: Float>(image: &Tensor<T>, op: &'static str) -> Result<usize> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] {
        return Err(Error::Tensor(TensorError::Shape { op, detail: format!("expected [3, S, S], got {s:?}") }));
    }
    Ok(s[1])
}

/// A uniformly drawn ordering of `n` patches.
pub fn draw_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// The permutation `permute_patches(.., seed)` applies to `n` patches.
pub fn patch_permutation(n: usize, seed: u64) -> Vec<usize> {
    draw_permutation(n, &mut rng_for(seed, PERMUTATION_STREAM))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Rearranges the row-major grid of `patch_side` patches: output patch `i`
/// is input patch `perm[i]`, in every channel.
pub fn apply_patch_permutation<T: Float>(image: &Tensor<T>, patch_side: usize, perm: &[usize]) -> Result<Tensor<T>> {
    let s = image_side(image, "permute_patches")?;
    check_patch_side(s, patch_side)?;
    let per_row = s / patch_side;
    let n = per_row * per_row;
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Validation(format!("not a permutation of {n} patches: {perm:?}")));
    }
    let src = image.data();
    let mut out = src.to_vec();
    for ch in 0..3 {
        let plane = ch * s * s;
        for (dst_patch, &src_patch) in perm.iter().enumerate() {
            let (dr, dc) = (dst_patch / per_row * patch_side, dst_patch % per_row * patch_side);
            let (sr, sc) = (src_patch / per_row * patch_side, src_patch % per_row * patch_side);
            for y in 0..patch_side {
                let d = plane + (dr + y) * s + dc;
                let o = plane + (sr + y) * s + sc;
                out[d..d + patch_side].copy_from_slice(&src[o..o + patch_side]);
            }
        }
    }
    Ok(Tensor::new(image.shape(), out)?)
}

/// Shuffles the `(S / patch_side)^2` patches by the permutation drawn from `seed`.
pub fn permute_patches<T: Float>(image: &Tensor<T>, patch_side: usize, seed: u64) -> Result<Tensor<T>> {
    let s = image_side(image, "permute_patches")?;
    check_patch_side(s, patch_side)?;
    let n = (s / patch_side).pow(2);
    apply_patch_permutation(image, patch_side, &patch_permutation(n, seed))
}

/// Lossy shift by `dx` right and `dy` down; vacated pixels are black.
pub fn translocate<T: Float>(image: &Tensor<T>, dx: i64, dy: i64) -> Result<Tensor<T>> {
    let s = image_side(image, "translocate")?;
    check_offsets(s, dx, dy)?;
    let src = image.data();
    let mut out = vec![T::ZERO; src.len()];
    let si = s as i64;
    for ch in 0..3 {
        let plane = ch * s * s;
        for r in 0..si {
            let sr = r - dy;
            if !(0..si).contains(&sr) {
                continue;
            }
            let c0 = dx.max(0);
            let c1 = (si + dx).min(si);
            let d = plane + (r * si + c0) as usize;
            let o = plane + (sr * si + c0 - dx) as usize;
            let len = (c1 - c0) as usize;
            out[d..d + len].copy_from_slice(&src[o..o + len]);
        }
    }
    Ok(Tensor::new(image.shape(), out)?)
}

/// One perturbation's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclineRow {
    pub spec: PerturbSpec,
    pub perturbed_top1: f64,
    /// `perturbed_top1 - baseline_top1`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclineReport {
    pub roi_kind: String,
    pub xroi_kind: String,
    pub mode: String,
    pub samples: usize,
    pub baseline_top1: f64,
    pub rows: Vec<DeclineRow>,
}

impl DeclineReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(["roi_kind", "xroi_kind", "perturbation", "target", "baseline_top1", "perturbed_top1", "delta"])
            .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                self.roi_kind.clone(),
                self.xroi_kind.clone(),
                r.spec.operator(),
                r.spec.target().name().into(),
                format!("{:.4}", self.baseline_top1),
                format!("{:.4}", r.perturbed_top1),
                format!("{:.4}", r.delta),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        write_json(&dir.join(format!("{stem}.json")), self)
    }
}

/// Applies `spec` to every pair. Permutations are drawn per image, in pair
/// order, from a stream seeded by the spec.
pub fn perturb_pairs(pairs: &[CutoutPair], spec: &PerturbSpec) -> Result<Vec<CutoutPair>> {
    let target = spec.target();
    let mut rng = match spec {
        PerturbSpec::Permutation(p) => Some(rng_for(p.seed, PERMUTATION_STREAM)),
        PerturbSpec::Translocation(_) => None,
    };
    let mut op = |x: &Tensor<f32>| -> Result<Tensor<f32>> {
        match spec {
            PerturbSpec::Permutation(p) => {
                let s = image_side(x, "permute_patches")?;
                check_patch_side(s, p.patch_side)?;
                let n = (s / p.patch_side).pow(2);
                let perm = draw_permutation(n, rng.as_mut().expect("permutation stream"));
                apply_patch_permutation(x, p.patch_side, &perm)
            }
            PerturbSpec::Translocation(t) => translocate(x, t.dx, t.dy),
        }
    };
    pairs
        .iter()
        .map(|p| {
            let x1 = if target.hits_roi() { op(&p.x1)? } else { p.x1.clone() };
            let x2 = if target.hits_xroi() { op(&p.x2)? } else { p.x2.clone() };
            Ok(CutoutPair { x1, x2, label: p.label })
        })
        .collect()
}

/// Baseline top-1 of `model` on `test`, then the top-1 under each spec.
pub fn perturbation_eval<T: Float>(model: &RveRNetModel<T>, test: &[CutoutPair], specs: &[PerturbSpec]) -> Result<DeclineReport> {
    if test.is_empty() {
        return Err(Error::Validation("perturbation_eval needs a nonempty test set".into()));
    }
    let side = model.image_side();
    for spec in specs {
        spec.validate(side)?;
    }
    let targets: Vec<usize> = test.iter().map(|p| p.label).collect();
    let baseline_top1 = top1(&predict(model, test)?, &targets)?;
    let rows = specs
        .iter()
        .map(|spec| {
            let perturbed = perturb_pairs(test, spec)?;
            let perturbed_top1 = top1(&predict(model, &perturbed)?, &targets)?;
            Ok(DeclineRow { spec: *spec, perturbed_top1, delta: perturbed_top1 - baseline_top1 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeclineReport {
        roi_kind: model.config.roi.kind.name().into(),
        xroi_kind: model.config.xroi.kind.name().into(),
        mode: model.mode().name().into(),
        samples: test.len(),
        baseline_top1,
        rows,
    })
}

/// Mean decline of one (architecture family, perturbation) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    /// Kind of the perturbed branch, or `roi_kind/xroi_kind` when both are.
    pub family: String,
    pub target: Target,
    pub perturbation: String,
    pub mean_delta: f64,
    pub reports: usize,
}

/// Mean delta per (family of the perturbed branch, target, operator).
pub fn aggregate_by_architecture(reports: &[DeclineReport]) -> Result<Vec<AggregateCell>> {
    if let Some(r) = reports.iter().find(|r| r.samples != reports[0].samples) {
        return Err(Error::Validation(format!(
            "reports cover different test sets ({} and {} samples)",
            reports[0].samples, r.samples
        )));
    }
    let mut cells: BTreeMap<(String, Target, String), (f64, usize)> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            let target = row.spec.target();
            let family = match target {
                Target::Roi => r.roi_kind.clone(),
                Target::Xroi => r.xroi_kind.clone(),
                Target::Both => format!("{}/{}", r.roi_kind, r.xroi_kind),
            };
            let cell = cells.entry((family, target, row.spec.operator())).or_default();
            cell.0 += row.delta;
            cell.1 += 1;
        }
    }
    Ok(cells
        .into_iter()
        .map(|((family, target, perturbation), (sum, n))| AggregateCell {
            family,
            target,
            perturbation,
            mean_delta: sum / n as f64,
            reports: n,
        })
        .collect())
}
