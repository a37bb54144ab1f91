use proptest::prelude::*;
use rvernet_core::backbone::{BackboneConfig, BackboneKind};
use rvernet_core::data::CutoutPair;
use rvernet_core::metrics::*;
use rvernet_core::model::{Branch, Mode, ModelConfig, RveRNetModel};
use rvernet_core::Error;
use rvernet_tensor::Tensor;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn top1_counts_hits() {
    assert_eq!(top1(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 75.0);
    assert_eq!(top1(&[3], &[3]).unwrap(), 100.0);
    assert!(matches!(top1(&[], &[]), Err(Error::Validation(_))));
    assert!(matches!(top1(&[0], &[0, 1]), Err(Error::Validation(_))));
}

#[test]
fn macro_f1_worked_examples() {
    assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
    // Class 0: tp 1, support 2, predicted 1 -> 2/3; class 1: tp 1, support 1, predicted 2 -> 2/3.
    assert!(close(macro_f1(&[0, 1, 1], &[0, 0, 1], 2).unwrap(), 2.0 / 3.0));
    // Only class 0 ever appears; classes 1 and 2 score zero and still count.
    assert!(close(macro_f1(&[0, 0], &[0, 0], 3).unwrap(), 1.0 / 3.0));
    assert_eq!(macro_f1(&[1, 0], &[0, 1], 2).unwrap(), 0.0);
    assert!(macro_f1(&[5], &[0], 3).is_err());
}

#[test]
fn confusion_rows_are_targets() {
    let m = confusion_matrix(&[1, 1, 0], &[0, 1, 0], 2).unwrap();
    assert_eq!(m, vec![vec![1, 1], vec![0, 1]]);
    assert_eq!(per_class_f1(&m), vec![2.0 / 3.0, 2.0 / 3.0]);
}

#[test]
fn subset_f1_averages_selected_classes() {
    let preds = [0, 1, 1, 2, 2, 0];
    let targets = [0, 0, 1, 2, 1, 2];
    let all = per_class_f1(&confusion_matrix(&preds, &targets, 3).unwrap());
    assert!(close(subset_f1(&preds, &targets, 3, &[0, 1]).unwrap(), (all[0] + all[1]) / 2.0));
    assert!(close(subset_f1(&preds, &targets, 3, &[2]).unwrap(), all[2]));
    assert!(close(subset_f1(&preds, &targets, 3, &[0, 1, 2]).unwrap(), macro_f1(&preds, &targets, 3).unwrap()));
    assert!(subset_f1(&preds, &targets, 3, &[]).is_err());
    assert!(subset_f1(&preds, &targets, 3, &[3]).is_err());
}

#[test]
fn report_agrees_with_the_standalone_functions() {
    let preds = [0, 1, 1, 2, 2, 0, 3, 3];
    let targets = [0, 0, 1, 2, 1, 2, 3, 0];
    let r = MetricsReport::compute(&preds, &targets, 4, Some(&[0, 1])).unwrap();
    assert_eq!(r.top1, top1(&preds, &targets).unwrap());
    assert!(close(r.macro_f1, macro_f1(&preds, &targets, 4).unwrap()));
    assert!(close(r.subset_f1.as_ref().unwrap().value, subset_f1(&preds, &targets, 4, &[0, 1]).unwrap()));
    assert_eq!(r.f1_averaging, "macro");
    assert!(close(r.subset_top1(&[0, 1]), 100.0 * 2.0 / 5.0));
    assert_eq!(r.subset_top1(&[]), 0.0);
}

#[test]
fn report_roundtrips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let r = MetricsReport::compute(&[0, 1, 1], &[0, 1, 0], 2, None).unwrap();
    let path = dir.path().join("metrics.json");
    r.save_json(&path).unwrap();
    let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, r);
}

fn run(top: f64, f1: f64, sub: Option<f64>) -> MetricsReport {
    MetricsReport {
        top1: top,
        macro_f1: f1,
        f1_averaging: "macro".into(),
        per_class_f1: vec![],
        subset_f1: sub.map(|value| SubsetF1 { classes: vec![0, 1], value }),
        confusion: vec![],
    }
}

#[test]
fn single_run_table_is_both_best_and_worst() {
    let t = table_report(&[("a".into(), run(80.0, 0.7, None))]);
    assert_eq!(t.rows[0].best, ["top1", "macro_f1"]);
    assert_eq!(t.rows[0].worst, ["top1", "macro_f1"]);
}

#[test]
fn table_flags_extremes_and_ties() {
    let t = table_report(&[
        ("a".into(), run(80.0, 0.7, Some(0.5))),
        ("b".into(), run(90.0, 0.7, None)),
        ("c".into(), run(85.0, 0.6, Some(0.9))),
    ]);
    assert_eq!(t.rows[0].best, ["macro_f1"]);
    assert_eq!(t.rows[0].worst, ["top1", "subset_f1"]);
    assert_eq!(t.rows[1].best, ["top1", "macro_f1"]);
    assert!(t.rows[1].worst.is_empty());
    assert_eq!(t.rows[2].best, ["subset_f1"]);
    assert_eq!(t.rows[2].worst, ["macro_f1"]);
    let csv = t.to_csv().unwrap();
    assert_eq!(csv.lines().nth(2).unwrap(), "b,90.0000,0.700000,,top1;macro_f1,");
}

#[test]
fn empty_table_has_no_rows() {
    assert!(table_report(&[]).rows.is_empty());
}

#[test]
fn gradcam_of_zero_activations_is_zero() {
    let a = Tensor::<f64>::zeros(&[3, 4, 4]);
    let g = Tensor::<f64>::full(&[3, 4, 4], 1.0);
    assert!(gradcam_from_activations(&a, &g).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_channel_gradcam_closed_form() {
    let a = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 3.0, 0.0, 2.0]).unwrap();
    let g = Tensor::<f64>::new(&[1, 2, 2], vec![0.5, 0.5, 1.0, 0.0]).unwrap();
    // alpha = 0.5, cam = relu(0.5 A) / max.
    assert_eq!(gradcam_from_activations(&a, &g).unwrap().data(), &[1.0 / 3.0, 1.0, 0.0, 2.0 / 3.0]);
    let neg = g.map(|v| -v);
    assert!(gradcam_from_activations(&a, &neg).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradcam_weights_channels_by_mean_gradient() {
    let a = Tensor::<f64>::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let g = Tensor::<f64>::new(&[2, 1, 2], vec![2.0, 0.0, 0.5, 0.5]).unwrap();
    // alpha = (1, 0.5): cam = (1, 0.5).
    assert_eq!(gradcam_from_activations(&a, &g).unwrap().data(), &[1.0, 0.5]);
    assert!(gradcam_from_activations(&a, &Tensor::zeros(&[2, 2, 1])).is_err());
}

#[test]
fn heatmap_argmax_maps_cell_centres() {
    let grid = Tensor::new(&[4, 4], (0..16).map(|i| if i == 6 { 1.0 } else { 0.1 }).collect()).unwrap();
    let h = Heatmap { grid, layer: "roi/last_block".into(), class_index: 0 };
    assert_eq!(h.argmax(), (1, 2));
    // Cell (1, 2) of a 4x4 grid on a 64-pixel image has its centre at (24, 40).
    assert!(h.argmax_in_bbox((20, 36, 27, 43), 64));
    assert!(h.argmax_in_bbox((24, 40, 24, 40), 64));
    assert!(!h.argmax_in_bbox((0, 0, 15, 15), 64));
    let up = h.upsampled_u8(8);
    assert_eq!(up[2 * 8 + 4], 255);
    assert_eq!(up[0], 26);
}

const SIDE: usize = 32;

fn cfg(kind: BackboneKind) -> BackboneConfig {
    BackboneConfig {
        kind,
        feature_dim: 6,
        depth: 1,
        width: 16,
        heads: 2,
        patch_size: 8,
        use_pos_embed: false,
        image_side: SIDE,
    }
}

fn pair() -> CutoutPair {
    CutoutPair {
        x1: Tensor::from_fn(&[3, SIDE, SIDE], |i| ((i * 13) % 17) as f32 / 17.0),
        x2: Tensor::from_fn(&[3, SIDE, SIDE], |i| ((i * 5) % 11) as f32 / 11.0),
        label: 0,
    }
}

#[test]
fn gradcam_on_a_cnn_branch_is_normalized() {
    let c = ModelConfig { roi: cfg(BackboneKind::MiniCnn), xroi: cfg(BackboneKind::MiniVit), mode: Mode::Both, hidden: None, num_classes: 3 };
    let m = RveRNetModel::<f64>::build(&c, 2).unwrap();
    for class in 0..3 {
        let h = gradcam(&m, &pair(), class, Branch::Roi).unwrap();
        assert_eq!(h.class_index, class);
        assert!(h.rows() > 1 && h.rows() == h.cols());
        let max = h.grid.data().iter().copied().fold(0.0, f64::max);
        assert!(h.grid.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(max == 0.0 || max == 1.0);
    }
    assert!(matches!(gradcam(&m, &pair(), 0, Branch::Xroi), Err(Error::Unsupported(_))));
    assert!(matches!(gradcam(&m, &pair(), 3, Branch::Roi), Err(Error::Validation(_))));
}

#[test]
fn gradcam_needs_a_used_branch() {
    let c = ModelConfig { roi: cfg(BackboneKind::MiniCnn), xroi: cfg(BackboneKind::MiniCnn), mode: Mode::XroiOnly, hidden: None, num_classes: 2 };
    let m = RveRNetModel::<f64>::build(&c, 2).unwrap();
    assert!(matches!(gradcam(&m, &pair(), 0, Branch::Roi), Err(Error::Unsupported(_))));
    assert!(gradcam(&m, &pair(), 0, Branch::Xroi).is_ok());
}

proptest! {
    #[test]
    fn metrics_survive_relabeling(
        data in proptest::collection::vec((0usize..4, 0usize..4), 1..40),
        shift in 1usize..4,
    ) {
        let (preds, targets): (Vec<usize>, Vec<usize>) = data.into_iter().unzip();
        let relabel = |v: &[usize]| v.iter().map(|&c| (c + shift) % 4).collect::<Vec<_>>();
        let (p2, t2) = (relabel(&preds), relabel(&targets));
        prop_assert_eq!(top1(&preds, &targets).unwrap(), top1(&p2, &t2).unwrap());
        prop_assert!((macro_f1(&preds, &targets, 4).unwrap() - macro_f1(&p2, &t2, 4).unwrap()).abs() < 1e-12);
        let f = macro_f1(&preds, &targets, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let r = MetricsReport::compute(&preds, &targets, 4, Some(&[0, 1, 2, 3])).unwrap();
        prop_assert!((r.subset_f1.unwrap().value - f).abs() < 1e-12);
    }
}
