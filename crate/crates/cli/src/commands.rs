//! Subcommand implementations.

use std::path::{Path, PathBuf};

use rvernet_core::backbone::{BackboneConfig, BackboneKind};
use rvernet_core::data::{save_dataset, CutoutPair, Dataset, LabeledImage, Split};
use rvernet_core::metrics::{gradcam, table_report, MetricsReport};
use rvernet_core::model::{Branch, Classifier, Mode, RveRNetModel};
use rvernet_core::perturb::{aggregate_by_architecture, perturbation_eval, AggregateCell, DeclineReport};
use rvernet_core::train::{distill_from, evaluate, train, train_with, TrainConfig, TrainHistory};
use rvernet_tensor::{Checkpoint, Float};
use serde::Serialize;

use crate::config::{ExperimentConfig, Precision};
use crate::error::{CliError, CliResult};
use crate::{BranchArg, Command, Common, SplitArg};

/// Environment variable capping internal parallelism.
pub const THREADS_VAR: &str = "RVERNET_THREADS";

/// Worker threads allowed by `RVERNET_THREADS` (default 1). Every kernel is
/// currently single-threaded, so any valid value yields the same bytes.
pub fn thread_cap() -> CliResult<usize> {
    match std::env::var(THREADS_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(e) => Err(CliError::usage(format!("{THREADS_VAR}: {e}"))),
    }
}

pub fn run(command: Command) -> CliResult<()> {
    thread_cap()?;
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::Train { common } => train_cmd(&common),
        Command::Eval { common, checkpoint, split } => eval_cmd(&common, checkpoint.as_deref(), split),
        Command::Perturb { common, checkpoint } => perturb_cmd(&common, checkpoint.as_deref()),
        Command::Ablate { common } => ablate(&common),
        Command::Gradcam { common, checkpoint, samples, branch } => gradcam_cmd(&common, checkpoint.as_deref(), &samples, branch),
        Command::Report { common, runs } => report(&common, &runs),
    }
}

struct Setup {
    cfg: ExperimentConfig,
    out: PathBuf,
}

/// Reads, overrides and validates the config. Nothing is written yet.
fn setup(common: &Common) -> CliResult<Setup> {
    let path = common.config.as_deref().ok_or_else(|| CliError::usage("--config is required"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    check_output(&out, common.force)?;
    Ok(Setup { cfg, out })
}

fn check_output(out: &Path, force: bool) -> CliResult<()> {
    if out.is_file() {
        return Err(CliError::usage(format!("{} is a file", out.display())));
    }
    if !force && out.is_dir() {
        let mut entries = std::fs::read_dir(out).map_err(|e| io_err(out, e))?;
        if entries.next().is_some() {
            return Err(CliError::usage(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> CliResult<()> {
    ck.save(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: Option<&Path>) -> CliResult<Checkpoint> {
    let path = path.ok_or_else(|| CliError::usage("--checkpoint is required"))?;
    Checkpoint::load(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn load_model<T: Float>(ck: &Checkpoint, cfg: &ExperimentConfig) -> CliResult<RveRNetModel<T>> {
    let model = RveRNetModel::<T>::from_checkpoint(ck)?;
    if model.num_classes() != cfg.model.num_classes || model.image_side() != cfg.model.roi.image_side {
        return Err(CliError::usage(format!(
            "checkpoint holds a {}-class model on {}-pixel images; the config expects {} classes on {} pixels",
            model.num_classes(),
            model.image_side(),
            cfg.model.num_classes,
            cfg.model.roi.image_side
        )));
    }
    Ok(model)
}

fn splits(ds: &Dataset) -> CliResult<(Vec<CutoutPair>, Vec<CutoutPair>)> {
    Ok((ds.pairs(Split::Train)?, ds.pairs(Split::Test)?))
}

fn gen_data(common: &Common) -> CliResult<()> {
    let Setup { cfg, out } = setup(common)?;
    let spec = cfg
        .dataset
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::usage("gen-data needs a `dataset.synthetic` section"))?;
    let ds = rvernet_core::data::generate_synthetic(spec)?;
    create_dir(&out)?;
    save_dataset(&ds, &out)?;
    write_json(&out.join("synthetic_spec.json"), spec)?;
    eprintln!("wrote {} samples of {} classes to {}", ds.items.len(), ds.num_classes(), out.display());
    Ok(())
}

/// A trained model plus everything worth writing next to it.
struct Fitted<T> {
    model: RveRNetModel<T>,
    history: TrainHistory,
    metrics: Option<MetricsReport>,
    distill: Vec<(Branch, Classifier<T>, TrainHistory, TrainHistory)>,
}

fn teacher_config(student: &BackboneConfig, explicit: Option<&BackboneConfig>) -> BackboneConfig {
    explicit.cloned().unwrap_or_else(|| BackboneConfig {
        kind: BackboneKind::MiniCnn,
        use_pos_embed: false,
        ..student.clone()
    })
}

/// Distills every used DeiT branch from a CNN teacher when the config asks
/// for it, then trains the whole model.
fn fit<T: Float>(
    cfg: &ExperimentConfig,
    train_set: &[CutoutPair],
    test_set: &[CutoutPair],
    epoch_dir: Option<&Path>,
) -> CliResult<Fitted<T>> {
    let tc = cfg.train_config();
    let mut model = RveRNetModel::<T>::build(&cfg.model, cfg.seed)?;
    let mut distill = Vec::new();
    if let Some(d) = &tc.distill {
        let branches: Vec<Branch> = [(Branch::Roi, model.mode().uses_roi()), (Branch::Xroi, model.mode().uses_xroi())]
            .into_iter()
            .filter(|&(b, used)| used && model.backbone(b).kind() == BackboneKind::MiniDeit)
            .map(|(b, _)| b)
            .collect();
        if branches.is_empty() {
            return Err(CliError::usage("train.distill needs a used mini_deit branch"));
        }
        for branch in branches {
            let student_cfg = model.backbone(branch).config.clone();
            let plain = TrainConfig { distill: None, ..tc.clone() };
            let (teacher, teacher_history) = match &d.teacher_checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                    (Classifier::<T>::from_checkpoint(&ck)?, TrainHistory::default())
                }
                None => {
                    let tcfg = teacher_config(&student_cfg, d.teacher.as_ref());
                    if tcfg.kind != BackboneKind::MiniCnn {
                        return Err(CliError::usage(format!("teacher must be mini_cnn, got {}", tcfg.kind.name())));
                    }
                    let mut t = Classifier::<T>::build(&tcfg, branch, cfg.model.num_classes, cfg.seed)?;
                    let h = train(&mut t, train_set, test_set, &plain, None)?;
                    (t, h)
                }
            };
            let out = distill_from(teacher, teacher_history, &student_cfg, branch, cfg.model.num_classes, train_set, test_set, &tc)?;
            if let Some(w) = &out.warning {
                eprintln!("warning: {w}");
            }
            let target = model.backbone_mut(branch);
            target.params = out.student.backbone.params.clone();
            target.distilled = true;
            distill.push((branch, out.teacher, out.teacher_history, out.student_history));
        }
    }
    let fine_tune = TrainConfig { distill: None, ..tc };
    let history = match (epoch_dir, fine_tune.checkpoint_every) {
        (Some(dir), Some(every)) => train_with(&mut model, train_set, test_set, &fine_tune, None, |epoch, m| {
            if (epoch + 1) % every == 0 {
                let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
                m.to_checkpoint().save(&path).map_err(|e| rvernet_core::Error::Validation(format!("{}: {e}", path.display())))?;
            }
            Ok(())
        })?,
        _ => train(&mut model, train_set, test_set, &fine_tune, None)?,
    };
    let metrics = if test_set.is_empty() { None } else { Some(evaluate(&model, test_set, fine_tune.subset.as_deref())?) };
    Ok(Fitted { model, history, metrics, distill })
}

fn write_fitted<T: Float>(f: &Fitted<T>, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    save_checkpoint(&f.model.to_checkpoint(), &dir.join("model.ckpt"))?;
    f.history.save(dir, "history")?;
    if let Some(m) = &f.metrics {
        write_metrics(m, dir)?;
    }
    for (branch, teacher, th, sh) in &f.distill {
        let name = branch_name(*branch);
        save_checkpoint(&teacher.to_checkpoint(), &dir.join(format!("teacher_{name}.ckpt")))?;
        th.save(dir, &format!("teacher_{name}_history"))?;
        sh.save(dir, &format!("student_{name}_history"))?;
    }
    Ok(())
}

fn write_metrics(m: &MetricsReport, dir: &Path) -> CliResult<()> {
    m.save_json(&dir.join("metrics.json"))?;
    let mut csv = String::from("metric,value\n");
    csv += &format!("top1,{:.6}\nmacro_f1,{:.6}\n", m.top1, m.macro_f1);
    if let Some(s) = &m.subset_f1 {
        csv += &format!("subset_f1,{:.6}\n", s.value);
    }
    for (k, f) in m.per_class_f1.iter().enumerate() {
        csv += &format!("f1_class_{k},{f:.6}\n");
    }
    write_text(&dir.join("metrics.csv"), &csv)
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Roi => "roi",
        Branch::Xroi => "xroi",
    }
}

fn train_cmd(common: &Common) -> CliResult<()> {
    let Setup { cfg, out } = setup(common)?;
    let ds = cfg.dataset()?;
    let (train_set, test_set) = splits(&ds)?;
    create_dir(&out)?;
    write_json(&out.join("config.json"), &cfg)?;
    match cfg.precision {
        Precision::F32 => write_fitted(&fit::<f32>(&cfg, &train_set, &test_set, Some(&out))?, &out),
        Precision::F64 => write_fitted(&fit::<f64>(&cfg, &train_set, &test_set, Some(&out))?, &out),
    }
}

fn eval_cmd(common: &Common, checkpoint: Option<&Path>, split: SplitArg) -> CliResult<()> {
    let Setup { cfg, out } = setup(common)?;
    let ck = load_checkpoint(checkpoint)?;
    let ds = cfg.dataset()?;
    let pairs = ds.pairs(match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    })?;
    if pairs.is_empty() {
        return Err(CliError::usage("the selected split is empty"));
    }
    let subset = cfg.train.subset.as_deref();
    let report = match cfg.precision {
        Precision::F32 => evaluate(&load_model::<f32>(&ck, &cfg)?, &pairs, subset)?,
        Precision::F64 => evaluate(&load_model::<f64>(&ck, &cfg)?, &pairs, subset)?,
    };
    create_dir(&out)?;
    write_metrics(&report, &out)?;
    eprintln!("top1 {:.2}%  macro_f1 {:.4}", report.top1, report.macro_f1);
    Ok(())
}

fn perturb_cmd(common: &Common, checkpoint: Option<&Path>) -> CliResult<()> {
    let Setup { cfg, out } = setup(common)?;
    let ck = load_checkpoint(checkpoint)?;
    let ds = cfg.dataset()?;
    let test_set = ds.pairs(Split::Test)?;
    let specs = cfg.perturb_specs();
    let report = match cfg.precision {
        Precision::F32 => perturbation_eval(&load_model::<f32>(&ck, &cfg)?, &test_set, &specs)?,
        Precision::F64 => perturbation_eval(&load_model::<f64>(&ck, &cfg)?, &test_set, &specs)?,
    };
    create_dir(&out)?;
    report.save(&out, "decline")?;
    for row in &report.rows {
        eprintln!("{:<24} {:+.2}", row.spec.to_string(), row.delta);
    }
    Ok(())
}

fn ablate(common: &Common) -> CliResult<()> {
    let Setup { cfg, out } = setup(common)?;
    let ds = cfg.dataset()?;
    let (train_set, test_set) = splits(&ds)?;
    if test_set.is_empty() {
        return Err(CliError::usage("ablation needs a nonempty test split"));
    }
    create_dir(&out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut runs = Vec::new();
    for mode in Mode::ALL {
        let mut leg = cfg.clone();
        leg.model.mode = mode;
        let dir = out.join(mode.name());
        let metrics = match cfg.precision {
            Precision::F32 => {
                let f = fit::<f32>(&leg, &train_set, &test_set, None)?;
                write_fitted(&f, &dir)?;
                f.metrics
            }
            Precision::F64 => {
                let f = fit::<f64>(&leg, &train_set, &test_set, None)?;
                write_fitted(&f, &dir)?;
                f.metrics
            }
        };
        let metrics = metrics.expect("nonempty test split");
        eprintln!("{:<10} top1 {:.2}%  macro_f1 {:.4}", mode.name(), metrics.top1, metrics.macro_f1);
        runs.push((mode.name().to_string(), metrics));
    }
    table_report(&runs).save(&out, "ablation")?;
    Ok(())
}

fn find_sample<'a>(ds: &'a Dataset, key: &str) -> CliResult<&'a LabeledImage> {
    if let Some(li) = ds.items.iter().find(|li| li.id == key) {
        return Ok(li);
    }
    match key.parse::<usize>() {
        Ok(i) => ds.items.get(i).ok_or_else(|| {
            CliError::usage(format!("sample index {i} out of range for {} samples", ds.items.len()))
        }),
        Err(_) => Err(CliError::usage(format!("no sample with id {key:?}"))),
    }
}

#[derive(Serialize)]
struct GradcamRow {
    id: String,
    branch: &'static str,
    class_index: usize,
    argmax_row: usize,
    argmax_col: usize,
    in_roi_bbox: Option<bool>,
    file: String,
}

fn gradcam_cmd(common: &Common, checkpoint: Option<&Path>, samples: &[String], branch: Option<BranchArg>) -> CliResult<()> {
    let Setup { cfg, out } = setup(common)?;
    let ck = load_checkpoint(checkpoint)?;
    let ds = cfg.dataset()?;
    let chosen = samples.iter().map(|s| find_sample(&ds, s.trim())).collect::<CliResult<Vec<_>>>()?;
    match cfg.precision {
        Precision::F32 => gradcam_with(&load_model::<f32>(&ck, &cfg)?, &chosen, branch, &out),
        Precision::F64 => gradcam_with(&load_model::<f64>(&ck, &cfg)?, &chosen, branch, &out),
    }
}

fn gradcam_with<T: Float>(model: &RveRNetModel<T>, samples: &[&LabeledImage], branch: Option<BranchArg>, out: &Path) -> CliResult<()> {
    let branches: Vec<Branch> = match branch {
        Some(b) => vec![b.into()],
        None => [(Branch::Roi, model.mode().uses_roi()), (Branch::Xroi, model.mode().uses_xroi())]
            .into_iter()
            .filter_map(|(b, used)| used.then_some(b))
            .collect(),
    };
    let side = model.image_side();
    let mut maps = Vec::new();
    for li in samples {
        let pair = rvernet_core::data::apply_mask(li)?;
        for &b in &branches {
            maps.push((li, b, gradcam(model, &pair, li.label, b)?));
        }
    }
    create_dir(out)?;
    let mut rows = Vec::new();
    for (li, b, map) in maps {
        let file = format!("{}_{}.png", li.id, branch_name(b));
        map.save_png(&out.join(&file), side)?;
        let (argmax_row, argmax_col) = map.argmax();
        rows.push(GradcamRow {
            id: li.id.clone(),
            branch: branch_name(b),
            class_index: map.class_index,
            argmax_row,
            argmax_col,
            in_roi_bbox: li.roi_bbox().map(|bb| map.argmax_in_bbox(bb, side)),
            file,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(&out.join("gradcam.csv"), &String::from_utf8_lossy(&bytes))?;
    write_json(&out.join("gradcam.json"), &rows)
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> CliResult<D> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn report(common: &Common, runs: &[PathBuf]) -> CliResult<()> {
    let out = match (&common.out, &common.config) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => ExperimentConfig::load(c)?.output_dir,
        (None, None) => return Err(CliError::usage("report needs --out or --config")),
    };
    check_output(&out, common.force)?;
    let mut metrics = Vec::new();
    let mut declines: Vec<DeclineReport> = Vec::new();
    for dir in runs {
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        metrics.push((name, read_json::<MetricsReport>(&dir.join("metrics.json"))?));
        let d = dir.join("decline.json");
        if d.is_file() {
            declines.push(read_json(&d)?);
        }
    }
    let aggregate = if declines.is_empty() { None } else { Some(aggregate_by_architecture(&declines)?) };
    create_dir(&out)?;
    table_report(&metrics).save(&out, "table")?;
    if let Some(cells) = aggregate {
        write_aggregate(&cells, &out)?;
    }
    Ok(())
}

fn write_aggregate(cells: &[AggregateCell], out: &Path) -> CliResult<()> {
    let mut csv = String::from("family,target,perturbation,mean_delta,reports\n");
    for c in cells {
        let op = if c.perturbation.contains(',') { format!("\"{}\"", c.perturbation) } else { c.perturbation.clone() };
        csv += &format!("{},{},{op},{:.4},{}\n", c.family, c.target.name(), c.mean_delta, c.reports);
    }
    write_text(&out.join("aggregate.csv"), &csv)?;
    write_json(&out.join("aggregate.json"), &cells)
}
