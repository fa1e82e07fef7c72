use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::error::Error;
use crate::rng::seeded;
use crate::tensor::Tensor;

const H: usize = 16;
const W: usize = 16;

fn hp(seed: u64) -> Hyperparams {
    Hyperparams {
        max_iterations: 20,
        val_every: 5,
        seed,
        ..Hyperparams::default()
    }
}

fn random_tensor(c: usize, rng: &mut crate::rng::Rng) -> Tensor<f32> {
    Tensor::from_vec(&[c, H, W], (0..c * H * W).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn frames(n: usize, mods: usize, seed: u64) -> Vec<TrainFrame> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|i| TrainFrame {
            frame_id: format!("t{i}"),
            inputs: NetInputs {
                modalities: (0..mods).map(|_| random_tensor(3, &mut rng)).collect(),
                depth_valid: Some(vec![true; H * W]),
            },
            target: (0..H * W).map(|p| (p / W + i) % 5 == 0).collect(),
        })
        .collect()
}

fn parent(m: Modality, seed: u64) -> Checkpoint {
    let spec = FusionSpec::standard(FusionKind::None, &[m], hp(seed)).unwrap();
    let mut net = build_network::<f32>(&spec).unwrap();
    net.init_fresh(&mut seeded(seed));
    Checkpoint::new(net, vec![], None, None)
}

fn child(kind: FusionKind, mods: &[Modality]) -> FusionNet<f32> {
    build_network::<f32>(&FusionSpec::standard(kind, mods, hp(0)).unwrap()).unwrap()
}

fn param<'a>(net: &'a FusionNet<f32>, name: &str) -> &'a Tensor<f32> {
    net.params().into_iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("no {name}")).1
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = parent(Modality::Hha, 3);
    let stem = dir.path().join("a/model");
    ck.save(&stem).unwrap();
    assert!(Checkpoint::exists(&stem));
    let back = Checkpoint::load(&stem).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.id().len(), 16);
}

#[test]
fn checkpoint_id_depends_on_weights_and_spec() {
    let a = parent(Modality::Rgb, 1);
    let b = parent(Modality::Rgb, 2);
    assert_ne!(a.id(), b.id());
    let mut net = a.net.clone();
    net.spec.hyperparams.base_lr *= 2.0;
    assert_ne!(Checkpoint::new(net, vec![], None, None).id(), a.id());
    assert_eq!(Checkpoint::new(a.net.clone(), vec![], None, None).id(), a.id());
}

#[test]
fn checkpoint_load_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("m");
    parent(Modality::Rgb, 1).save(&stem).unwrap();

    let bin = stem.with_extension("bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[10] ^= 0x40;
    std::fs::write(&bin, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&stem), Err(Error::Checkpoint(m)) if m.contains("content id")));

    bytes.pop();
    std::fs::write(&bin, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&stem), Err(Error::Checkpoint(_))));

    parent(Modality::Rgb, 1).save(&stem).unwrap();
    let json = stem.with_extension("json");
    let text = std::fs::read_to_string(&json).unwrap().replacen("\"conv1.weight\"", "\"convX.weight\"", 1);
    std::fs::write(&json, text).unwrap();
    assert!(matches!(Checkpoint::load(&stem), Err(Error::Checkpoint(m)) if m.contains("convX")));

    assert!(matches!(Checkpoint::load(&dir.path().join("absent")), Err(Error::MissingCheckpoint(_))));
}

#[test]
fn non_fusion_transfer_replaces_only_the_score_layer() {
    let rgb = parent(Modality::Rgb, 1);
    let mut net = child(FusionKind::None, &[Modality::Rgb]);
    let parents = Parents {
        rgb: Some(&rgb),
        hha: None,
    };
    let audit = init_transfer(&mut net, &parents, &mut seeded(9)).unwrap();
    for (name, t) in net.params() {
        let from_parent = param(&rgb.net, &name);
        if name == "score.weight" {
            assert_ne!(t, from_parent, "{name}");
        } else {
            assert_eq!(t, from_parent, "{name}");
        }
    }
    let w = param(&net, "score.weight").data();
    assert!(w.iter().all(|v| v.abs() < 0.06));
    assert!(param(&net, "score.bias").data().iter().all(|&b| b == 0.0));
    let fresh: Vec<_> = audit.layers.iter().filter(|o| o.source == LayerSource::Fresh).map(|o| o.layer.as_str()).collect();
    assert_eq!(fresh, ["score"]);
    verify_audit(&net, &audit, &[&rgb]).unwrap();
}

#[test]
fn depth_arm_comes_from_the_hha_parent() {
    let (rgb, hha) = (parent(Modality::Rgb, 1), parent(Modality::Hha, 2));
    let mut net = child(FusionKind::None, &[Modality::Depth]);
    let parents = Parents {
        rgb: Some(&rgb),
        hha: Some(&hha),
    };
    init_transfer(&mut net, &parents, &mut seeded(0)).unwrap();
    assert_eq!(param(&net, "conv2.weight"), param(&hha.net, "conv2.weight"));
}

#[test]
fn early_first_layer_concatenates_parent_filters() {
    let (rgb, hha) = (parent(Modality::Rgb, 1), parent(Modality::Hha, 2));
    let mut net = child(FusionKind::Early, &[Modality::Rgb, Modality::Hha]);
    let parents = Parents {
        rgb: Some(&rgb),
        hha: Some(&hha),
    };
    let audit = init_transfer(&mut net, &parents, &mut seeded(0)).unwrap();
    let w = param(&net, "conv1.weight");
    assert_eq!(w.shape(), &[16, 6, 3, 3]);
    let (wr, wh) = (param(&rgb.net, "conv1.weight"), param(&hha.net, "conv1.weight"));
    for o in 0..16 {
        for i in 0..6 {
            let got = &w.data()[(o * 6 + i) * 9..(o * 6 + i + 1) * 9];
            let want = if i < 3 {
                &wr.data()[(o * 3 + i) * 9..(o * 3 + i + 1) * 9]
            } else {
                &wh.data()[(o * 3 + i - 3) * 9..(o * 3 + i - 2) * 9]
            };
            assert_eq!(got, want, "filter {o} channel {i}");
        }
    }
    assert_eq!(param(&net, "conv1.bias"), param(&rgb.net, "conv1.bias"));
    for name in ["conv2.weight", "fc.weight", "score.weight", "score.bias"] {
        assert_eq!(param(&net, name), param(&rgb.net, name), "{name}");
    }
    verify_audit(&net, &audit, &[&rgb, &hha]).unwrap();
}

#[test]
fn mid_arms_are_copied_and_shared_layers_are_fresh() {
    let (rgb, hha) = (parent(Modality::Rgb, 1), parent(Modality::Hha, 2));
    let parents = Parents {
        rgb: Some(&rgb),
        hha: Some(&hha),
    };
    let build = |seed| {
        let mut net = child(FusionKind::Mid, &[Modality::Rgb, Modality::Hha]);
        let audit = init_transfer(&mut net, &parents, &mut seeded(seed)).unwrap();
        verify_audit(&net, &audit, &[&rgb, &hha]).unwrap();
        net
    };
    let (a, b) = (build(1), build(2));
    for (name, t) in a.params() {
        if name.starts_with("shared.") && name.ends_with(".weight") {
            assert_ne!(t, param(&b, &name), "{name}");
        } else {
            assert_eq!(t, param(&b, &name), "{name}");
        }
    }
    assert_eq!(param(&a, "rgb.conv2.weight"), param(&rgb.net, "conv2.weight"));
    assert_eq!(param(&a, "hha.conv1.weight"), param(&hha.net, "conv1.weight"));
}

#[test]
fn proportional_arms_are_copied_whole() {
    let (rgb, hha) = (parent(Modality::Rgb, 1), parent(Modality::Hha, 2));
    let mut net = child(FusionKind::LateProportional, &[Modality::Rgb, Modality::Hha]);
    let parents = Parents {
        rgb: Some(&rgb),
        hha: Some(&hha),
    };
    init_transfer(&mut net, &parents, &mut seeded(0)).unwrap();
    assert_eq!(param(&net, "rgb.score.weight"), param(&rgb.net, "score.weight"));
    assert_eq!(param(&net, "hha.score.weight"), param(&hha.net, "score.weight"));
}

#[test]
fn transfer_errors_name_the_problem() {
    let rgb = parent(Modality::Rgb, 1);
    let mut net = child(FusionKind::Early, &[Modality::Rgb, Modality::Hha]);
    let only_rgb = Parents {
        rgb: Some(&rgb),
        hha: None,
    };
    match init_transfer(&mut net, &only_rgb, &mut seeded(0)) {
        Err(Error::MissingCheckpoint(m)) => assert!(m.contains("hha"), "{m}"),
        other => panic!("{other:?}"),
    }

    let mut bad = parent(Modality::Rgb, 1);
    if let Body::Single(s) = &mut bad.net.body {
        let l = s.layers.iter_mut().find(|l| l.spec.name == "conv2").unwrap();
        l.weight = Some(Tensor::zeros(&[32, 8, 3, 3]));
    }
    let mut net = child(FusionKind::None, &[Modality::Rgb]);
    let parents = Parents {
        rgb: Some(&bad),
        hha: None,
    };
    match init_transfer(&mut net, &parents, &mut seeded(0)) {
        Err(Error::Transfer { layer, .. }) => assert_eq!(layer, "conv2"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn audit_detects_modified_layer() {
    let rgb = parent(Modality::Rgb, 1);
    let mut net = child(FusionKind::None, &[Modality::Rgb]);
    let parents = Parents {
        rgb: Some(&rgb),
        hha: None,
    };
    let audit = init_transfer(&mut net, &parents, &mut seeded(0)).unwrap();
    if let Body::Single(s) = &mut net.body {
        s.layers[0].bias.as_mut().unwrap().data_mut()[0] += 1.0;
    }
    assert!(matches!(verify_audit(&net, &audit, &[&rgb]), Err(Error::Transfer { layer, .. }) if layer == "conv1"));
}

#[test]
fn overlay_needs_trained_single_networks() {
    let spec = FusionSpec::standard(FusionKind::LateOverlay, &[Modality::Rgb, Modality::Hha], hp(0)).unwrap();
    let rgb = parent(Modality::Rgb, 1);
    match compose_late_overlay(&spec, Some(&rgb), None) {
        Err(Error::MissingCheckpoint(m)) => assert!(m.contains("train"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(compose_late_overlay(&spec, Some(&rgb), Some(&rgb)).is_err());
    let hha = parent(Modality::Hha, 2);
    let (net, audit) = compose_late_overlay(&spec, Some(&rgb), Some(&hha)).unwrap();
    verify_audit(&net, &audit, &[&rgb, &hha]).unwrap();
    assert_eq!(param(&net, "hha.score.weight"), param(&hha.net, "score.weight"));
}

fn fresh(kind: FusionKind, mods: &[Modality], hp: Hyperparams) -> FusionNet<f32> {
    let mut net = build_network::<f32>(&FusionSpec::standard(kind, mods, hp).unwrap()).unwrap();
    net.init_fresh(&mut seeded(5));
    net
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let init = fresh(FusionKind::None, &[Modality::Rgb], Hyperparams { base_lr: 0.0, ..hp(1) });
    let out = train(init.clone(), &frames(3, 1, 1), &[]).unwrap();
    assert_eq!(out.summary.iterations_run, 20);
    assert_eq!(out.net.params(), init.params());
}

#[test]
fn identical_seeds_give_identical_traces() {
    let data = frames(3, 2, 2);
    let val = frames(1, 2, 3);
    let run = |seed| {
        let net = fresh(FusionKind::Mid, &[Modality::Rgb, Modality::Hha], hp(seed));
        train(net, &data, &val).unwrap()
    };
    let (a, b, c) = (run(4), run(4), run(5));
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.net, b.net);
    assert_ne!(a.summary.train_loss, c.summary.train_loss);
    assert_eq!(a.summary.val_loss.iter().map(|v| v.0).collect::<Vec<_>>(), [5, 10, 15, 20]);
    assert_eq!(a.summary.val_frames, ["t0"]);
}

#[test]
fn training_lowers_the_loss() {
    let data = frames(2, 1, 8);
    let net = fresh(FusionKind::None, &[Modality::Rgb], Hyperparams { max_iterations: 60, ..hp(1) });
    let before = mean_loss(&net, &data).unwrap();
    let out = train(net, &data, &[]).unwrap();
    assert!(mean_loss(&out.net, &data).unwrap() < before);
}

#[test]
fn divergence_is_reported_with_its_trace() {
    let net = fresh(FusionKind::None, &[Modality::Rgb], Hyperparams { base_lr: 1e6, ..hp(1) });
    let out = train(net, &frames(2, 1, 1), &[]).unwrap();
    let TrainStatus::Diverged { iteration } = out.summary.status else {
        panic!("{:?}", out.summary.status)
    };
    assert_eq!(out.summary.train_loss.len(), iteration);
    assert!(out.summary.diverged());
}

#[test]
fn standard_grid_sizes() {
    let base = Hyperparams::default();
    let n = |k| GridDefinition::standard(k, [1e-5, 5e-6]).unwrap().combos(&base).len();
    assert_eq!(n(FusionKind::None), 4);
    assert_eq!(n(FusionKind::LateProportional), 4);
    assert_eq!(n(FusionKind::Early), 4);
    assert_eq!(n(FusionKind::Mid), 16);
    assert!(GridDefinition::standard(FusionKind::LateOverlay, [1e-5, 5e-6]).is_err());
    let early = GridDefinition::standard(FusionKind::Early, [1e-5, 5e-6]).unwrap().combos(&base);
    assert!(early.iter().all(|h| h.final_layer_mult == 5.0));
    let mid = GridDefinition::standard(FusionKind::Mid, [1e-5, 5e-6]).unwrap().combos(&base);
    let distinct: std::collections::BTreeSet<String> = mid.iter().map(|h| format!("{h:?}")).collect();
    assert_eq!(distinct.len(), 16);
}

#[test]
fn single_combo_grid_returns_it() {
    let h = Hyperparams { base_lr: 1e6, ..hp(1) };
    let cells = grid_search(&GridDefinition::single(&h), &h, |h| Ok(fresh(FusionKind::None, &[Modality::Rgb], h.clone())), &frames(2, 1, 1), &[]).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].hyperparams, h);
    assert!(cells[0].outcome.summary.diverged());
}

#[test]
fn diverged_combos_rank_last() {
    let base = Hyperparams { max_iterations: 10, ..hp(1) };
    let grid = GridDefinition {
        base_lr: vec![1e6, 1e-5],
        final_layer_mult: vec![5.0],
        first_layer_mult: vec![],
        shared_layer_mult: vec![],
        dropout_ratio: vec![],
    };
    let cells = grid_search(&grid, &base, |h| Ok(fresh(FusionKind::None, &[Modality::Rgb], h.clone())), &frames(2, 1, 1), &frames(1, 1, 2)).unwrap();
    assert_eq!(cells.iter().map(|c| c.index).collect::<Vec<_>>(), [1, 0]);
    assert!(!cells[0].outcome.summary.diverged());
    assert!(cells[1].outcome.summary.diverged());
}

fn scores(rng: &mut crate::rng::Rng, h: usize, w: usize, scale: f32) -> Tensor<f32> {
    Tensor::from_vec(&[2, h, w], (0..2 * h * w).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn early_zero_channels_match_zeroed_filters(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let mut net = build_network::<f32>(&FusionSpec::standard(FusionKind::Early, &[Modality::Rgb, Modality::Hha], hp(0)).unwrap()).unwrap();
        net.init_fresh(&mut rng);
        let rgb = random_tensor(3, &mut rng);
        let zeroed_input = NetInputs { modalities: vec![rgb.clone(), Tensor::zeros(&[3, H, W])], depth_valid: None };
        let a = net.predict(&zeroed_input, "x").unwrap();

        let mut zeroed_net = net.clone();
        if let Body::Single(s) = &mut zeroed_net.body {
            let w = s.layers[0].weight.as_mut().unwrap();
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                if (i / 9) % 6 >= 3 {
                    *v = 0.0;
                }
            }
        }
        let noisy = NetInputs { modalities: vec![rgb, random_tensor(3, &mut rng)], depth_valid: None };
        let b = zeroed_net.predict(&noisy, "x").unwrap();
        prop_assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn proportional_weights_sum_to_one(seed in any::<u64>(), scale in 0.1f32..60.0) {
        let mut rng = seeded(seed);
        let (a, b) = (scores(&mut rng, 5, 7, scale), scores(&mut rng, 5, 7, scale));
        for mode in [ProportionalMode::PerPixel, ProportionalMode::PerImage] {
            let p = late::proportional(&a, &b, mode).unwrap();
            for w in &p.weights {
                prop_assert!((w[0] + w[1] - 1.0).abs() <= 1e-6);
            }
            prop_assert!(p.p_trip.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn proportional_of_identical_maps_is_the_map(seed in any::<u64>(), scale in 0.1f32..30.0) {
        let mut rng = seeded(seed);
        let m = PredictionMap::from_scores(scores(&mut rng, 6, 4, scale), "a", "f").unwrap();
        let fused = late_proportional([&m, &m], ProportionalMode::PerPixel).unwrap();
        for (x, y) in fused.probabilities.data().iter().zip(m.probabilities.data()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        prop_assert_eq!(fused.argmax_mask(), m.argmax_mask());
    }

    #[test]
    fn overlay_is_rgb_where_depth_is_invalid(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let rgb = PredictionMap::from_scores(scores(&mut rng, 6, 5, 8.0), "rgb", "f").unwrap();
        let other = PredictionMap::from_scores(scores(&mut rng, 6, 5, 8.0), "hha", "f").unwrap();
        let valid: Vec<bool> = (0..30).map(|_| rng.random_bool(0.5)).collect();
        let fused = late_overlay(&rgb, &other, &valid, OverlayMode::Scores).unwrap();
        for (i, &v) in valid.iter().enumerate() {
            for c in 0..2 {
                let (f, r) = (fused.scores.data()[c * 30 + i], rgb.scores.data()[c * 30 + i]);
                if v {
                    prop_assert_eq!(f, r + other.scores.data()[c * 30 + i]);
                } else {
                    prop_assert_eq!(f.to_bits(), r.to_bits());
                }
            }
        }
    }
}
