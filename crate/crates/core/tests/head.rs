use rvernet_core::backbone::{BackboneConfig, BackboneKind};
use rvernet_core::model::{build_rvernet, Branch, Mode, ModelConfig, RveRNetModel};
use rvernet_core::perturb::permute_patches;
use rvernet_core::Error;
use rvernet_tensor::{Checkpoint, Graph, Tensor};

use BackboneKind::*;

const SIDE: usize = 32;

fn cfg(kind: BackboneKind, feature_dim: usize) -> BackboneConfig {
    BackboneConfig {
        kind,
        feature_dim,
        depth: 1,
        width: 16,
        heads: 2,
        patch_size: 8,
        use_pos_embed: kind == MiniVit || kind == MiniDeit,
        image_side: SIDE,
    }
}

fn images(n: usize, salt: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 3, SIDE, SIDE], |i| ((i * 2654435761 + salt * 97) % 4093) as f64 / 4093.0)
}

fn model(roi: BackboneKind, xroi: BackboneKind, mode: Mode, k: usize) -> RveRNetModel<f64> {
    let c = ModelConfig { roi: cfg(roi, 6), xroi: cfg(xroi, 4), mode, hidden: Some(5), num_classes: k };
    RveRNetModel::build(&c, 21).unwrap()
}

fn set(m: &mut RveRNetModel<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let id = m.head.params.find(name).unwrap();
    let t = m.head.params.get_mut(id);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn homogeneous_and_mixed_pairings_build() {
    let best = build_rvernet::<f32>(&cfg(MiniDeit, 8), &cfg(MiniDeit, 8), 3, 8, 0).unwrap();
    assert_eq!(best.mode(), Mode::Both);
    let mixed = build_rvernet::<f32>(&cfg(MiniVit, 8), &cfg(MiniCnn, 6), 3, 7, 0).unwrap();
    let w = mixed.head.params.get(mixed.head.linear1.w);
    assert_eq!(w.shape(), &[7, 14]);
}

#[test]
fn ablation_modes_narrow_the_first_layer() {
    for (mode, width) in [(Mode::Both, 10), (Mode::RoiOnly, 6), (Mode::XroiOnly, 4)] {
        let m = model(MiniCnn, MiniMixer, mode, 3);
        assert_eq!(m.head.params.get(m.head.linear1.w).shape(), &[5, width]);
    }
}

#[test]
fn same_seed_gives_identical_models() {
    let a = model(MiniDeit, MiniCnn, Mode::Both, 3).to_checkpoint().to_bytes().unwrap();
    let b = model(MiniDeit, MiniCnn, Mode::Both, 3).to_checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);
}

#[test]
fn probabilities_are_normalized() {
    let m = model(MiniVit, MiniMixer, Mode::Both, 4);
    let p = m.class_probabilities(Some(&images(5, 1)), Some(&images(5, 2))).unwrap();
    for row in p.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let mut m = model(MiniCnn, MiniVit, Mode::Both, 4);
    for name in ["linear1.weight", "linear1.bias", "linear2.weight", "linear2.bias"] {
        set(&mut m, name, |_| 0.0);
    }
    let p = m.class_probabilities(Some(&images(2, 3)), Some(&images(2, 4))).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn three_class_forward_matches_hand_computation() {
    let mut m = model(MiniMixer, MiniCnn, Mode::Both, 3);
    set(&mut m, "linear1.weight", |i| ((i % 7) as f64 - 3.0) * 0.25);
    set(&mut m, "linear1.bias", |i| 0.1 * i as f64 - 0.2);
    set(&mut m, "linear2.weight", |i| ((i * 3 % 5) as f64 - 2.0) * 0.5);
    set(&mut m, "linear2.bias", |i| [0.3, -0.1, 0.05][i]);
    let (x1, x2) = (images(2, 5), images(2, 6));
    let f = m.backbone(Branch::Roi).features(&x1).unwrap();
    let g = m.backbone(Branch::Xroi).features(&x2).unwrap();
    let w1 = m.head.params.get(m.head.linear1.w).clone();
    let b1 = m.head.params.get(m.head.linear1.b).clone();
    let w2 = m.head.params.get(m.head.linear2.w).clone();
    let b2 = m.head.params.get(m.head.linear2.b).clone();
    let probs = m.class_probabilities(Some(&x1), Some(&x2)).unwrap();
    for n in 0..2 {
        let z: Vec<f64> = (0..6).map(|j| f.at(&[n, j])).chain((0..4).map(|j| g.at(&[n, j]))).collect();
        let h: Vec<f64> = (0..5)
            .map(|r| (b1.data()[r] + (0..10).map(|c| w1.at(&[r, c]) * z[c]).sum::<f64>()).max(0.0))
            .collect();
        let logits: Vec<f64> = (0..3).map(|k| b2.data()[k] + (0..5).map(|r| w2.at(&[k, r]) * h[r]).sum::<f64>()).collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..3 {
            assert!((probs.at(&[n, k]) - logits[k].exp() / denom).abs() < 1e-10);
        }
    }
}

#[test]
fn probabilities_are_the_softmax_of_logits() {
    let m = model(MiniDeit, MiniVit, Mode::Both, 5);
    let (x1, x2) = (images(3, 7), images(3, 8));
    let logits = m.logits(Some(&x1), Some(&x2)).unwrap();
    let probs = m.class_probabilities(Some(&x1), Some(&x2)).unwrap();
    for (l, p) in logits.data().chunks(5).zip(probs.data().chunks(5)) {
        let denom: f64 = l.iter().map(|v| v.exp()).sum();
        for k in 0..5 {
            assert!((p[k] - l[k].exp() / denom).abs() < 1e-12);
        }
    }
    assert_eq!(logits.argmax_rows(), probs.argmax_rows());
}

#[test]
fn shifting_every_logit_leaves_probabilities_unchanged() {
    let mut m = model(MiniCnn, MiniCnn, Mode::Both, 3);
    let (x1, x2) = (images(2, 9), images(2, 10));
    let before = m.class_probabilities(Some(&x1), Some(&x2)).unwrap();
    let id = m.head.linear2.b;
    for v in m.head.params.get_mut(id).data_mut() {
        *v += 3.75;
    }
    let after = m.class_probabilities(Some(&x1), Some(&x2)).unwrap();
    assert!(before.max_abs_diff(&after) < 1e-12);
}

#[test]
fn constant_extra_roi_features_fold_into_a_roi_only_head() {
    let both = model(MiniVit, MiniCnn, Mode::Both, 3);
    let mut roi_only = model(MiniVit, MiniCnn, Mode::RoiOnly, 3);
    roi_only.backbone_mut(Branch::Roi).params = both.backbone(Branch::Roi).params.clone();

    let context = images(1, 11);
    let c = both.backbone(Branch::Xroi).features(&context).unwrap();
    let w1 = both.head.params.get(both.head.linear1.w).clone();
    let b1 = both.head.params.get(both.head.linear1.b).clone();
    set(&mut roi_only, "linear1.weight", |i| w1.at(&[i / 6, i % 6]));
    set(&mut roi_only, "linear1.bias", |r| b1.data()[r] + (0..4).map(|j| w1.at(&[r, 6 + j]) * c.data()[j]).sum::<f64>());
    let w2 = both.head.params.get(both.head.linear2.w).clone();
    let b2 = both.head.params.get(both.head.linear2.b).clone();
    set(&mut roi_only, "linear2.weight", |i| w2.data()[i]);
    set(&mut roi_only, "linear2.bias", |i| b2.data()[i]);

    let n = 6;
    let x1 = images(n, 12);
    let x2 = Tensor::from_fn(&[n, 3, SIDE, SIDE], |i| context.data()[i % (3 * SIDE * SIDE)]);
    let lb = both.logits(Some(&x1), Some(&x2)).unwrap();
    let lr = roi_only.logits(Some(&x1), None).unwrap();
    assert!(lb.max_abs_diff(&lr) < 1e-12, "{}", lb.max_abs_diff(&lr));
    assert_eq!(lb.argmax_rows(), lr.argmax_rows());
}

#[test]
fn roi_permutation_is_invisible_to_a_position_free_vit() {
    let c = ModelConfig {
        roi: BackboneConfig { use_pos_embed: false, ..cfg(MiniVit, 6) },
        xroi: cfg(MiniCnn, 4),
        mode: Mode::Both,
        hidden: None,
        num_classes: 3,
    };
    let m = RveRNetModel::<f64>::build(&c, 2).unwrap();
    let (x1, x2) = (images(3, 13), images(3, 14));
    let per = 3 * SIDE * SIDE;
    let mut permuted = Vec::new();
    for i in 0..3 {
        let one = Tensor::new(&[3, SIDE, SIDE], x1.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        permuted.extend(permute_patches(&one, 8, i as u64).unwrap().into_data());
    }
    let px1 = Tensor::new(&[3, 3, SIDE, SIDE], permuted).unwrap();
    let a = m.class_probabilities(Some(&x1), Some(&x2)).unwrap();
    let b = m.class_probabilities(Some(&px1), Some(&x2)).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-5);
}

#[test]
fn gradients_reach_every_backbone_parameter() {
    let m = model(MiniCnn, MiniDeit, Mode::Both, 3);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true);
    let x1 = g.constant(images(4, 15));
    let x2 = g.constant(images(4, 16));
    let out = m.forward(&mut g, &bound, Some(x1), Some(x2)).unwrap();
    let loss = g.cross_entropy(out.logits, &[0, 1, 2, 1], 0.0).unwrap();
    let grads = g.backward(loss).unwrap();
    for (b, backbone) in [(bound.roi.unwrap(), m.backbone(Branch::Roi)), (bound.xroi.unwrap(), m.backbone(Branch::Xroi))] {
        for ((name, t), &v) in backbone.params.iter().zip(b.vars()) {
            let gr = grads.get_or_zeros(v, t.shape());
            assert!(gr.data().iter().any(|&x| x != 0.0), "{name} has a zero gradient");
        }
    }
}

#[test]
fn missing_inputs_are_reported() {
    let m = model(MiniCnn, MiniCnn, Mode::Both, 3);
    assert!(matches!(m.logits(Some(&images(1, 0)), None), Err(Error::MissingInput(_))));
    assert!(matches!(m.logits(None, Some(&images(1, 0))), Err(Error::MissingInput(_))));
    let r = model(MiniCnn, MiniCnn, Mode::RoiOnly, 3);
    assert_eq!(r.logits(Some(&images(2, 0)), None).unwrap().shape(), &[2, 3]);
    let x = model(MiniCnn, MiniCnn, Mode::XroiOnly, 3);
    assert_eq!(x.logits(None, Some(&images(2, 0))).unwrap().shape(), &[2, 3]);
}

#[test]
fn too_few_classes_is_a_configuration_error() {
    let c = ModelConfig { roi: cfg(MiniCnn, 4), xroi: cfg(MiniCnn, 4), mode: Mode::Both, hidden: None, num_classes: 1 };
    assert!(matches!(RveRNetModel::<f32>::build(&c, 0), Err(Error::Config(_))));
}

#[test]
fn checkpoints_round_trip_under_prefixed_names() {
    let c = ModelConfig { roi: cfg(MiniDeit, 6), xroi: cfg(MiniMixer, 4), mode: Mode::Both, hidden: None, num_classes: 3 };
    let m = RveRNetModel::<f32>::build(&c, 4).unwrap();
    let ck = m.to_checkpoint();
    assert!(ck.tensors.iter().all(|(name, _)| ["roi/", "xroi/", "head/"].iter().any(|p| name.starts_with(p))));
    let back = RveRNetModel::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
    let (x1, x2) = (images(2, 17).cast::<f32>(), images(2, 18).cast::<f32>());
    assert_eq!(m.logits(Some(&x1), Some(&x2)).unwrap(), back.logits(Some(&x1), Some(&x2)).unwrap());
}
