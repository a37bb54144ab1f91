use rvernet_core::backbone::{BackboneConfig, BackboneKind};
use rvernet_core::data::CutoutPair;
use rvernet_core::model::{Branch, Classifier, Mode, ModelConfig, RveRNetModel};
use rvernet_core::train::*;
use rvernet_core::Error;
use rvernet_tensor::{Graph, Tensor};

const SIDE: usize = 32;

fn backbone(kind: BackboneKind) -> BackboneConfig {
    BackboneConfig {
        kind,
        feature_dim: 8,
        depth: 1,
        width: 16,
        heads: 2,
        patch_size: 8,
        use_pos_embed: kind != BackboneKind::MiniCnn && kind != BackboneKind::MiniMixer,
        image_side: SIDE,
    }
}

fn rvernet(mode: Mode, seed: u64) -> RveRNetModel<f64> {
    let b = backbone(BackboneKind::MiniCnn);
    RveRNetModel::build(&ModelConfig { roi: b.clone(), xroi: b, mode, hidden: Some(8), num_classes: 2 }, seed).unwrap()
}

/// Class 0 has a bright ROI half, class 1 a dark one; the extra-ROI half
/// is shared noise.
fn separable(n: usize) -> Vec<CutoutPair> {
    (0..n)
        .map(|i| {
            let label = i % 2;
            let level = if label == 0 { 0.9 } else { 0.1 };
            let x1 = Tensor::from_fn(&[3, SIDE, SIDE], |j| level + ((j * 31 + i * 7) % 13) as f32 / 200.0);
            let x2 = Tensor::from_fn(&[3, SIDE, SIDE], |j| ((j * 17 + i * 101) % 29) as f32 / 29.0);
            CutoutPair { x1, x2, label }
        })
        .collect()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, warmup_epochs: 1, batch_size: 10, lr0: 5e-3, seed: 3, ..Default::default() }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn schedule_warms_up_then_decays() {
    let lr = |s| lr_schedule(s, 10, 2, 1.0).unwrap();
    assert_eq!((lr(0), lr(1), lr(2)), (0.5, 1.0, 1.0));
    assert!(close(lr(6), 0.5, 1e-15));
    assert!(close(lr(9), 0.5 * (1.0 - (std::f64::consts::PI / 8.0).cos()), 1e-15));
    let trace: Vec<f64> = (2..10).map(lr).collect();
    assert!(trace.windows(2).all(|w| w[1] < w[0]));
    assert!(lr_schedule(10, 10, 2, 1.0).is_err());
    assert!(matches!(lr_schedule(0, 4, 4, 1.0), Err(Error::Config(_))));
    assert_eq!(lr_schedule(3, 4, 0, 2.0).unwrap(), 2.0 * 0.5 * (1.0 + (0.75 * std::f64::consts::PI).cos()));
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut p = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
    let before = p.clone();
    let mut state = AdamState::new([&p]);
    for _ in 0..3 {
        adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut state, 0.1, AdamHyper::default()).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(state.t, 3);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut p = Tensor::<f64>::new(&[2], vec![1.0, 1.0]).unwrap();
    let mut state = AdamState::new([&p]);
    let g = Tensor::new(&[2], vec![4.0, -0.25]).unwrap();
    adam_step(&mut [&mut p], &[g], &mut state, 0.01, AdamHyper::default()).unwrap();
    assert!(close(p.data()[0], 1.0 - 0.01 * 4.0 / (4.0 + 1e-8), 1e-15));
    assert!(close(p.data()[1], 1.0 + 0.01 * 0.25 / (0.25 + 1e-8), 1e-15));
}

#[test]
fn adam_three_steps_match_a_hand_trace() {
    let grads = [[0.5, -1.0], [0.25, 2.0], [-0.75, 0.5]];
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
    let mut w = [0.3, -0.7];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for j in 0..2 {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            w[j] -= lr * (m[j] / (1.0 - b1.powi(t))) / ((v[j] / (1.0 - b2.powi(t))).sqrt() + eps);
        }
    }
    let mut p = Tensor::<f64>::new(&[2], vec![0.3, -0.7]).unwrap();
    let mut state = AdamState::new([&p]);
    for g in grads {
        adam_step(&mut [&mut p], &[Tensor::new(&[2], g.to_vec()).unwrap()], &mut state, lr, AdamHyper::default()).unwrap();
    }
    assert!(close(p.data()[0], w[0], 1e-12) && close(p.data()[1], w[1], 1e-12), "{:?} vs {w:?}", p.data());
}

#[test]
fn adam_rejects_mismatched_inputs() {
    let mut p = Tensor::<f64>::zeros(&[2]);
    let mut state = AdamState::new([&p]);
    assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut state, 0.1, AdamHyper::default()).is_err());
    assert!(adam_step(&mut [&mut p], &[], &mut state, 0.1, AdamHyper::default()).is_err());
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn distill_value(cls: &[f64], dist: &[f64], teacher: &[f64], targets: &[usize], eps: f64, lambda: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let n = targets.len();
    let c = g.param(Tensor::new(&[n, 3], cls.to_vec()).unwrap());
    let d = g.param(Tensor::new(&[n, 3], dist.to_vec()).unwrap());
    let t = Tensor::new(&[n, 3], teacher.to_vec()).unwrap();
    let loss = hard_distillation_loss(&mut g, c, d, &t, targets, eps, lambda).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn distillation_loss_matches_hand_computation() {
    let cls = [1.0, 0.5, -0.5, 0.2, 0.1, 2.0];
    let dist = [0.3, -1.0, 0.8, 1.5, 0.0, -0.4];
    let teacher = [0.0, 3.0, 1.0, -2.0, 0.5, 0.4];
    let targets = [0, 2];
    let (eps, lambda) = (0.1, 0.5);
    let mut want = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let lc = log_softmax(&cls[3 * i..3 * i + 3]);
        let ld = log_softmax(&dist[3 * i..3 * i + 3]);
        let smoothed: f64 = (0..3).map(|k| -(if k == y { 1.0 - eps } else { eps / 2.0 }) * lc[k]).sum();
        let t = &teacher[3 * i..3 * i + 3];
        let ty = (0..3).max_by(|&a, &b| t[a].partial_cmp(&t[b]).unwrap()).unwrap();
        want += ((1.0 - lambda) * smoothed + lambda * -ld[ty]) / 2.0;
    }
    let got = distill_value(&cls, &dist, &teacher, &targets, eps, lambda);
    assert!(close(got, want, 1e-10), "{got} vs {want}");
}

#[test]
fn distillation_weight_endpoints() {
    let cls = [0.2, -0.1, 0.4];
    let dist = [1.0, 0.0, -1.0];
    let teacher = [0.0, 0.0, 5.0];
    let plain = {
        let mut g = Graph::<f64>::new();
        let c = g.param(Tensor::new(&[1, 3], cls.to_vec()).unwrap());
        let l = g.cross_entropy(c, &[1], 0.1).unwrap();
        g.value(l).data()[0]
    };
    assert_eq!(distill_value(&cls, &dist, &teacher, &[1], 0.1, 0.0), plain);
    let only_teacher = -log_softmax(&dist)[2];
    assert!(close(distill_value(&cls, &dist, &teacher, &[1], 0.1, 1.0), only_teacher, 1e-12));
}

#[test]
fn distillation_gradient_skips_the_teacher_and_respects_lambda() {
    let mut g = Graph::<f64>::new();
    let c = g.param(Tensor::new(&[1, 3], vec![0.2, -0.1, 0.4]).unwrap());
    let d = g.param(Tensor::new(&[1, 3], vec![1.0, 0.0, -1.0]).unwrap());
    let t = Tensor::new(&[1, 3], vec![0.0, 0.0, 5.0]).unwrap();
    let loss = hard_distillation_loss(&mut g, c, d, &t, &[1], 0.0, 0.0).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.get_or_zeros(d, &[1, 3]).data().iter().all(|&v| v == 0.0));
    assert!(matches!(hard_distillation_loss(&mut g, c, d, &t, &[1], 0.0, 1.5), Err(Error::Config(_))));
    let wrong = Tensor::zeros(&[2, 3]);
    assert!(hard_distillation_loss(&mut g, c, d, &wrong, &[1], 0.0, 0.5).is_err());
}

#[test]
fn zero_epochs_leaves_the_model_untouched() {
    let mut m = rvernet(Mode::Both, 1);
    let before = m.clone();
    let h = train(&mut m, &[], &[], &TrainConfig { epochs: 0, warmup_epochs: 0, ..Default::default() }, None).unwrap();
    assert!(h.epochs.is_empty() && h.lr_trace.is_empty());
    assert_eq!(m, before);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut m = rvernet(Mode::Both, 1);
    let data = separable(4);
    for cfg in [
        TrainConfig { warmup_epochs: 3, epochs: 3, ..quick(3) },
        TrainConfig { batch_size: 0, ..quick(2) },
        TrainConfig { lr0: -1.0, ..quick(2) },
        TrainConfig { label_smoothing: 1.0, ..quick(2) },
        TrainConfig { flip_p: 2.0, ..quick(2) },
    ] {
        assert!(matches!(train(&mut m, &data, &[], &cfg, None), Err(Error::Config(_))), "{cfg:?}");
    }
    assert!(matches!(train(&mut m, &[], &[], &quick(2), None), Err(Error::Validation(_))));
}

#[test]
fn training_is_deterministic() {
    let data = separable(20);
    let run = || {
        let mut m = rvernet(Mode::Both, 5);
        let h = train(&mut m, &data, &data[..6], &quick(2), None).unwrap();
        (m.to_checkpoint().to_bytes().unwrap(), h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(ha.to_csv().unwrap(), hb.to_csv().unwrap());
}

#[test]
fn lr_trace_follows_the_schedule() {
    let data = separable(25);
    let mut m = rvernet(Mode::RoiOnly, 2);
    let h = train(&mut m, &data, &[], &quick(3), None).unwrap();
    assert_eq!(h.lr_trace.len(), 9);
    for (s, &lr) in h.lr_trace.iter().enumerate() {
        assert_eq!(lr, lr_schedule(s, 9, 3, 5e-3).unwrap());
    }
    assert_eq!(h.epochs.iter().map(|e| e.lr).collect::<Vec<_>>(), [h.lr_trace[2], h.lr_trace[5], h.lr_trace[8]]);
    assert!(h.epochs.iter().all(|e| e.top1.is_none() && e.loss.is_finite()));
}

#[test]
fn separable_classes_are_learned() {
    let data = separable(40);
    let mut m = rvernet(Mode::RoiOnly, 7);
    let h = train(&mut m, &data, &data, &TrainConfig { subset: Some(vec![0, 1]), ..quick(8) }, None).unwrap();
    let last = h.epochs.last().unwrap();
    assert!(last.loss < h.epochs[0].loss);
    assert_eq!(last.top1, Some(100.0));
    assert_eq!(last.subset_f1, Some(1.0));
    assert_eq!(evaluate(&m, &data, None).unwrap().top1, 100.0);
}

#[test]
fn unused_branch_parameters_stay_put() {
    let data = separable(20);
    let mut m = rvernet(Mode::RoiOnly, 7);
    let xroi = m.xroi.clone();
    train(&mut m, &data, &[], &quick(2), None).unwrap();
    assert_eq!(m.xroi, xroi);
}

#[test]
fn epoch_callback_sees_every_epoch() {
    let data = separable(10);
    let mut m = rvernet(Mode::Both, 7);
    let mut seen = Vec::new();
    train_with(&mut m, &data, &[], &quick(3), None, |e, _| {
        seen.push(e);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [0, 1, 2]);
}

#[test]
fn rvernet_refuses_a_teacher() {
    let data = separable(10);
    let teacher = Classifier::<f64>::build(&backbone(BackboneKind::MiniCnn), Branch::Roi, 2, 0).unwrap();
    let mut m = rvernet(Mode::Both, 7);
    assert!(matches!(train(&mut m, &data, &[], &quick(2), Some(&teacher)), Err(Error::Config(_))));
}

fn params(c: &Classifier<f64>) -> Vec<Tensor<f64>> {
    c.parameters().into_iter().cloned().collect()
}

#[test]
fn zero_lambda_distillation_equals_plain_training() {
    let data = separable(20);
    let cfg = TrainConfig { distill: Some(DistillConfig { lambda: 0.0, teacher: None, teacher_checkpoint: None }), ..quick(2) };
    let teacher = Classifier::<f64>::build(&backbone(BackboneKind::MiniCnn), Branch::Roi, 2, 9).unwrap();
    let student = Classifier::<f64>::build(&backbone(BackboneKind::MiniDeit), Branch::Roi, 2, 4).unwrap();
    let mut a = student.clone();
    let mut b = student;
    train(&mut a, &data, &[], &cfg, Some(&teacher)).unwrap();
    train(&mut b, &data, &[], &quick(2), None).unwrap();
    assert_eq!(params(&a), params(&b));
}

#[test]
fn distillation_pipeline_trains_both_and_freezes_the_teacher() {
    let data = separable(20);
    let teacher_cfg = backbone(BackboneKind::MiniCnn);
    let student_cfg = backbone(BackboneKind::MiniDeit);
    let out = train_teacher_then_distill::<f64>(&teacher_cfg, &student_cfg, Branch::Roi, 2, &data, &data, &quick(6)).unwrap();
    assert_eq!(out.teacher_history.epochs.len(), 6);
    assert_eq!(out.student_history.epochs.len(), 6);
    assert!(out.student.backbone.distilled);
    assert_eq!(out.teacher_top1, 100.0);
    assert!(out.warning.is_none());
    assert!(out.student_history.epochs.last().unwrap().top1.unwrap() >= 90.0);

    let frozen = out.teacher.clone();
    let again = distill_from(out.teacher, out.teacher_history, &student_cfg, Branch::Roi, 2, &data, &[], &quick(2)).unwrap();
    assert_eq!(again.teacher, frozen);
}

#[test]
fn chance_level_teacher_is_flagged() {
    let data = separable(10);
    let mut teacher = Classifier::<f64>::build(&backbone(BackboneKind::MiniCnn), Branch::Roi, 2, 0).unwrap();
    teacher.head.tensors_mut().iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let out = distill_from(teacher, TrainHistory::default(), &backbone(BackboneKind::MiniDeit), Branch::Roi, 2, &data, &[], &quick(2)).unwrap();
    assert!(out.warning.unwrap().contains("not above chance"));
}

#[test]
fn distillation_roles_are_checked() {
    let data = separable(10);
    let cnn = backbone(BackboneKind::MiniCnn);
    let vit = backbone(BackboneKind::MiniVit);
    assert!(matches!(train_teacher_then_distill::<f64>(&vit, &backbone(BackboneKind::MiniDeit), Branch::Roi, 2, &data, &[], &quick(2)), Err(Error::Config(_))));
    assert!(matches!(train_teacher_then_distill::<f64>(&cnn, &vit, Branch::Roi, 2, &data, &[], &quick(2)), Err(Error::Config(_))));
}

#[test]
fn history_saves_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = separable(10);
    let mut m = rvernet(Mode::Both, 7);
    let h = train(&mut m, &data, &data, &quick(2), None).unwrap();
    h.save(dir.path(), "history").unwrap();
    let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,loss,top1,macro_f1,subset_f1,lr");
    assert_eq!(csv.lines().count(), 3);
    let back: TrainHistory = serde_json::from_str(&std::fs::read_to_string(dir.path().join("history.json")).unwrap()).unwrap();
    assert_eq!(back, h);
}
