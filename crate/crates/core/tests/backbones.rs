use proptest::prelude::*;
use rvernet_core::backbone::{Backbone, BackboneConfig, BackboneKind, Role, INPUT_MEAN, INPUT_STD};
use rvernet_core::perturb::permute_patches;
use rvernet_core::Error;
use rvernet_tensor::{Graph, Tensor, TensorError};

use BackboneKind::*;

fn small(kind: BackboneKind) -> BackboneConfig {
    BackboneConfig {
        kind,
        feature_dim: 12,
        depth: 2,
        width: 16,
        heads: 2,
        patch_size: 8,
        use_pos_embed: kind == MiniVit || kind == MiniDeit,
        image_side: 32,
    }
}

fn image(n: usize, side: usize, salt: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, 3, side, side], |i| ((i * 7919 + salt * 104_729) % 1009) as f32 / 1009.0)
}

fn build<T: rvernet_tensor::Float>(cfg: &BackboneConfig) -> Backbone<T> {
    Backbone::build(cfg, Role::Standalone, 5).unwrap()
}

#[test]
fn parameter_counts_match_hand_sums() {
    // Stem 896; blocks 9632 + 13760 + 35648 + 52096; head 8256.
    let cnn = BackboneConfig { feature_dim: 64, ..BackboneConfig::desk(MiniCnn) };
    // Patch embed 98432, class token 128, positions 2176, 4 blocks of 198144, final norm 256.
    let vit = BackboneConfig::desk(MiniVit);
    // Plus the distillation token and its position.
    let deit = BackboneConfig::desk(MiniDeit);
    // Patch embed 98432, 4 blocks of 133296.
    let mixer = BackboneConfig::desk(MiniMixer);
    for (cfg, expected) in [(cnn, 120_288), (vit, 893_568), (deit, 893_824), (mixer, 631_616)] {
        let b = build::<f32>(&cfg);
        assert_eq!(b.params.num_scalars(), expected, "{:?}", cfg.kind);
        assert_eq!(cfg.param_count(), expected, "{:?}", cfg.kind);
    }
}

#[test]
fn zero_image_gives_finite_features() {
    for kind in [MiniCnn, MiniVit, MiniDeit, MiniMixer] {
        let b = build::<f32>(&small(kind));
        let f = b.features(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(f.shape(), &[2, 12]);
        assert!(f.all_finite(), "{kind:?}");
    }
}

#[test]
fn same_seed_builds_identical_parameters() {
    for kind in [MiniCnn, MiniVit, MiniDeit, MiniMixer] {
        let a = build::<f32>(&small(kind));
        let b = build::<f32>(&small(kind));
        assert_eq!(a.params, b.params);
        let other = Backbone::<f32>::build(&small(kind), Role::Standalone, 6).unwrap();
        assert_ne!(a.params, other.params);
    }
}

#[test]
fn roles_draw_independent_weights() {
    let f = Backbone::<f32>::build(&small(MiniVit), Role::RoiF, 5).unwrap();
    let g = Backbone::<f32>::build(&small(MiniVit), Role::XroiG, 5).unwrap();
    assert_ne!(f.params, g.params);
}

#[test]
fn token_counts() {
    let desk = |k| build::<f32>(&BackboneConfig::desk(k)).token_count();
    assert_eq!(desk(MiniVit), Some(17));
    assert_eq!(desk(MiniDeit), Some(18));
    assert_eq!(desk(MiniMixer), Some(16));
    assert_eq!(desk(MiniCnn), None);
}

#[test]
fn vit_without_positions_ignores_patch_order() {
    let cfg = BackboneConfig { use_pos_embed: false, ..small(MiniVit) };
    let b = build::<f32>(&cfg);
    let x = image(1, 32, 1);
    let p = permute_patches(&x.clone().reshape(&[3, 32, 32]).unwrap(), 8, 3).unwrap();
    let fx = b.features(&x).unwrap();
    let fp = b.features(&p.reshape(&[1, 3, 32, 32]).unwrap()).unwrap();
    assert!(fx.max_abs_diff(&fp) < 1e-5, "{}", fx.max_abs_diff(&fp));
}

#[test]
fn vit_with_positions_sees_patch_order() {
    let b = build::<f32>(&small(MiniVit));
    let x = image(1, 32, 1);
    let p = permute_patches(&x.clone().reshape(&[3, 32, 32]).unwrap(), 8, 3).unwrap();
    let fx = b.features(&x).unwrap();
    let fp = b.features(&p.reshape(&[1, 3, 32, 32]).unwrap()).unwrap();
    assert!(fx.max_abs_diff(&fp) > 1e-4);
}

#[test]
fn deit_exposes_both_token_states() {
    let b = build::<f64>(&small(MiniDeit));
    let mut g = Graph::new();
    let bound = b.params.bind(&mut g, false);
    let x = g.constant(image(3, 32, 2).cast::<f64>());
    let f = b.forward_features(&mut g, &bound, x).unwrap();
    let (cls, dist) = (g.value(f.cls.unwrap()), g.value(f.dist.unwrap()));
    assert_eq!(cls.shape(), &[3, 12]);
    assert_eq!(dist.shape(), &[3, 12]);
    for i in 0..cls.len() {
        let mean = 0.5 * (cls.data()[i] + dist.data()[i]);
        assert!((g.value(f.feature).data()[i] - mean).abs() < 1e-15);
    }
}

#[test]
fn mixer_without_blocks_pools_patch_embeddings() {
    let cfg = BackboneConfig { depth: 0, feature_dim: 16, ..small(MiniMixer) };
    let b = build::<f64>(&cfg);
    let x = image(1, 32, 4).cast::<f64>();
    let w = b.params.get(b.params.find("patch_embed.weight").unwrap());
    let bias = b.params.get(b.params.find("patch_embed.bias").unwrap());
    let (p, grid) = (8, 4);
    let mut expected = [0.0; 16];
    for (d, e) in expected.iter_mut().enumerate() {
        for (pr, pc) in (0..grid).flat_map(|r| (0..grid).map(move |c| (r, c))) {
            let mut acc = bias.data()[d];
            for ch in 0..3 {
                for i in 0..p {
                    for j in 0..p {
                        let v = x.at(&[0, ch, pr * p + i, pc * p + j]);
                        acc += w.at(&[d, ch, i, j]) * (v - INPUT_MEAN) / INPUT_STD;
                    }
                }
            }
            *e += acc / (grid * grid) as f64;
        }
    }
    let f = b.features(&x).unwrap();
    for d in 0..16 {
        assert!((f.data()[d] - expected[d]).abs() < 1e-12);
    }
}

#[test]
fn mixer_output_shape() {
    let b = build::<f32>(&BackboneConfig::desk(MiniMixer));
    assert_eq!(b.features(&image(2, 64, 0)).unwrap().shape(), &[2, 128]);
}

#[test]
fn mixer_with_silent_token_mlps_equals_channel_only_network() {
    let cfg = small(MiniMixer);
    let mut b = build::<f64>(&cfg);
    for j in 0..cfg.depth {
        for part in ["weight", "bias"] {
            let id = b.params.find(&format!("blocks.{j}.token_mlp.fc2.{part}")).unwrap();
            b.params.get_mut(id).data_mut().fill(0.0);
        }
    }
    let x = image(2, 32, 5).cast::<f64>();
    let full = b.features(&x).unwrap();
    let channel_only = b.channel_mixing_features(&x).unwrap();
    assert!(full.max_abs_diff(&channel_only) <= 1e-12);

    let vit = build::<f64>(&small(MiniVit));
    assert!(matches!(vit.channel_mixing_features(&x), Err(Error::Unsupported(_))));
}

#[test]
fn identical_images_give_identical_rows() {
    for kind in [MiniCnn, MiniVit, MiniDeit, MiniMixer] {
        let b = build::<f32>(&small(kind));
        let one = image(1, 32, 6);
        let two = Tensor::stack(&[&one.clone().reshape(&[3, 32, 32]).unwrap(), &one.reshape(&[3, 32, 32]).unwrap()]).unwrap();
        let f = b.features(&two).unwrap();
        assert_eq!(f.data()[..12], f.data()[12..], "{kind:?}");
    }
}

#[test]
fn cnn_is_not_shift_invariant_at_the_border() {
    let b = build::<f64>(&small(MiniCnn));
    let x = image(1, 32, 7).cast::<f64>();
    let shifted = Tensor::from_fn(&[1, 3, 32, 32], |i| {
        let (plane, r, c) = (i / 1024, i / 32 % 32, i % 32);
        x.data()[plane * 1024 + r * 32 + (c + 29) % 32]
    });
    let d = b.features(&x).unwrap().max_abs_diff(&b.features(&shifted).unwrap());
    assert!(d > 1e-9, "{d}");
}

#[test]
fn single_and_double_precision_agree() {
    for kind in [MiniCnn, MiniVit, MiniDeit, MiniMixer] {
        let b32 = build::<f32>(&small(kind));
        let b64 = build::<f64>(&small(kind));
        let x = image(2, 32, 8);
        let f32s = b32.features(&x).unwrap().cast::<f64>();
        let f64s = b64.features(&x.cast::<f64>()).unwrap();
        let scale = f64s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(f32s.max_abs_diff(&f64s) <= 1e-3 * scale, "{kind:?}");
    }
}

#[test]
fn wrong_spatial_size_is_a_dimension_error() {
    let b = build::<f32>(&small(MiniVit));
    let err = b.features(&Tensor::zeros(&[1, 3, 16, 16])).unwrap_err();
    assert!(matches!(err, Error::Tensor(TensorError::Shape { .. })), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        BackboneConfig { patch_size: 5, ..small(MiniVit) },
        BackboneConfig { heads: 3, ..small(MiniDeit) },
        BackboneConfig { feature_dim: 0, ..small(MiniMixer) },
        BackboneConfig { width: 15, ..small(MiniCnn) },
    ];
    for cfg in bad {
        assert!(matches!(Backbone::<f32>::build(&cfg, Role::Standalone, 0), Err(Error::Config(_))), "{cfg:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn vit_without_positions_is_permutation_invariant(seed in any::<u64>(), salt in 0usize..1000) {
        let cfg = BackboneConfig { use_pos_embed: false, depth: 1, ..small(MiniVit) };
        let b = build::<f32>(&cfg);
        let x = image(1, 32, salt);
        let p = permute_patches(&x.clone().reshape(&[3, 32, 32]).unwrap(), 8, seed).unwrap();
        let d = b.features(&x).unwrap().max_abs_diff(&b.features(&p.reshape(&[1, 3, 32, 32]).unwrap()).unwrap());
        prop_assert!(d < 1e-5);
    }

    #[test]
    fn identical_seeds_reproduce_features_bitwise(seed in any::<u64>()) {
        let cfg = small(MiniDeit);
        let a = Backbone::<f32>::build(&cfg, Role::RoiF, seed).unwrap();
        let b = Backbone::<f32>::build(&cfg, Role::RoiF, seed).unwrap();
        let x = image(1, 32, 9);
        prop_assert_eq!(a.features(&x).unwrap(), b.features(&x).unwrap());
    }
}
