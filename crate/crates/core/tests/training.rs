use std::collections::HashSet;

use ocbev::autodiff::Tensor;
use ocbev::network::{FrameInput, Graph, ModuleFlags, NetworkConfig, ParamSet};
use ocbev::simulator::{RigSpec, Scene, SceneSpec};
use ocbev::temporal_fusion::ObjectMotionRecord;
use ocbev::training::{
    build_model, clip_gradients, frame_loss, generate_scenes, global_norm, schedule_position, table_layout, train, train_from, AdamW,
    FrameTargets, TrainConfig, TrainHooks, TrainState,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> SceneSpec {
    SceneSpec {
        frames: 3,
        grid_cells: 10,
        rig: RigSpec {
            cameras: 3,
            hfov_deg: 130.0,
            spacing_deg: 120.0,
            image: [96, 64],
            feature: [6, 9],
            feature_channels: 6,
        },
        ..SceneSpec::default()
    }
}

fn net() -> NetworkConfig {
    NetworkConfig {
        embed_dim: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_hidden: 16,
        num_queries: 10,
        ..NetworkConfig::default()
    }
}

fn config(iterations: usize) -> TrainConfig {
    TrainConfig {
        seed: 5,
        iterations,
        lr: 1e-3,
        warmup_iters: 2,
        eval_every: 0,
        n_rep: 4,
        network: net(),
        ..TrainConfig::default()
    }
}

fn scenes(count: usize) -> Vec<Scene> {
    generate_scenes(&spec(), 40, count).unwrap()
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig {
        lr: 2e-4,
        iterations: 1000,
        warmup_iters: 500,
        ..TrainConfig::default()
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    assert!(close(cfg.lr_at(0), 2e-4 / 3.0));
    assert!(close(cfg.lr_at(250), 2e-4 * 2.0 / 3.0));
    assert!(close(cfg.lr_at(500), 2e-4));
    let min = 2e-4 * 1e-3;
    assert!(close(cfg.lr_at(750), min + (2e-4 - min) * 0.5));
    assert!(close(cfg.lr_at(1000), min));
    for s in 0..1000 {
        assert!(cfg.lr_at(s) > 0.0 && cfg.lr_at(s) <= 2e-4);
    }
    for s in 500..999 {
        assert!(cfg.lr_at(s + 1) <= cfg.lr_at(s));
    }
}

#[test]
fn config_validation() {
    assert!(config(1).validate().is_ok());
    assert!(TrainConfig { lr: 0.0, ..config(1) }.validate().is_ok());
    for bad in [
        TrainConfig { lr: -1e-4, ..config(1) },
        TrainConfig { lr: f64::NAN, ..config(1) },
        TrainConfig { iterations: 0, ..config(1) },
        TrainConfig { clip_norm: 0.0, ..config(1) },
        TrainConfig { n_rep: 0, ..config(1) },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn schedule_visits_every_frame_once_per_epoch_in_order() {
    let sc = scenes(4);
    let per_epoch = 4 * 3;
    for epoch in 0..3 {
        let visits: Vec<(usize, usize)> = (0..per_epoch).map(|i| schedule_position(9, &sc, epoch * per_epoch + i)).collect();
        let unique: HashSet<_> = visits.iter().collect();
        assert_eq!(unique.len(), per_epoch);
        for w in visits.windows(2) {
            if w[0].0 == w[1].0 {
                assert_eq!(w[1].1, w[0].1 + 1);
            } else {
                assert_eq!(w[0].1, 2);
                assert_eq!(w[1].1, 0);
            }
        }
    }
}

#[test]
fn adamw_first_step_matches_closed_form() {
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]));
    let g = vec![Tensor::matrix(1, 3, vec![0.1, -3.0, 0.0])];
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(&ps);
    let lr = 1e-2;
    opt.update(&mut ps, &g, lr, &cfg);
    for (i, (p0, gi)) in [0.5f64, -1.0, 2.0].iter().zip([0.1f64, -3.0, 0.0]).enumerate() {
        // Bias-corrected moments equal g and g^2 after one step.
        let expected = p0 - lr * (gi / (gi.abs() + cfg.eps) + cfg.weight_decay * p0);
        assert!((ps.get("w").unwrap().data[i] - expected).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn clipping_bounds_the_norm(seed in any::<u64>(), scale in 1e-3f64..1e6, tensors in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grads: Vec<Tensor> = (0..tensors)
            .map(|_| {
                let n = rng.gen_range(1..40);
                Tensor::matrix(1, n, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
            })
            .collect();
        let before = global_norm(&grads);
        let original = grads.clone();
        let reported = clip_gradients(&mut grads, 35.0);
        prop_assert_eq!(reported, before);
        prop_assert!(global_norm(&grads) <= 35.0);
        if before <= 35.0 {
            prop_assert_eq!(grads, original);
        } else {
            // Direction is preserved.
            let k = grads[0].data.iter().zip(&original[0].data).find(|(_, o)| **o != 0.0).map(|(g, o)| g / o).unwrap_or(0.0);
            for (g, o) in grads.iter().zip(&original) {
                for (a, b) in g.data.iter().zip(&o.data) {
                    prop_assert!((a - k * b).abs() <= 1e-12 * b.abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn zero_learning_rate_freezes_weights() {
    let sc = scenes(2);
    let mut model = build_model(&spec(), &net(), 3).unwrap();
    let before = model.params.clone();
    let log = train(&mut model, &sc, &[], &TrainConfig { lr: 0.0, ..config(4) }).unwrap();
    assert_eq!(log.records.len(), 4);
    assert_eq!(model.params, before);
}

#[test]
fn training_smoke_and_determinism() {
    let sc = scenes(3);
    let ev = generate_scenes(&spec(), 900, 1).unwrap();
    let cfg = TrainConfig { eval_every: 5, ..config(8) };
    let run = || {
        let mut model = build_model(&spec(), &net(), 3).unwrap();
        let log = train(&mut model, &sc, &ev, &cfg).unwrap();
        (model.params, log)
    };
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_eq!(pa, pb);
    assert_eq!(la, lb);
    assert_eq!(la.records.len(), 8);
    let evals: Vec<usize> = la.evaluations().iter().map(|(i, _)| *i).collect();
    assert_eq!(evals, vec![5, 8]);
    for r in &la.records {
        assert!(r.loss.total.is_finite() && r.grad_norm.is_finite());
        assert!(r.clipped_norm <= cfg.clip_norm);
        assert!((r.lr - cfg.lr_at(r.iteration - 1)).abs() == 0.0);
    }
    let fresh = build_model(&spec(), &net(), 3).unwrap();
    assert_ne!(pa, fresh.params, "weights move with a positive learning rate");
    let rep = la.final_report().unwrap();
    assert!((0.0..=1.0).contains(&rep.map));
}

#[test]
fn resume_from_checkpoint_is_bit_exact() {
    let sc = scenes(2);
    let cfg = config(7);
    let mut straight = build_model(&spec(), &net(), 4).unwrap();
    let full = train(&mut straight, &sc, &[], &cfg).unwrap();

    let mut model = build_model(&spec(), &net(), 4).unwrap();
    let mut state = TrainState::new(model.params.clone());
    let mut stop = TrainHooks {
        stop_after: Some(4),
        ..TrainHooks::default()
    };
    let first = train_from(&mut model, &mut state, &sc, &[], &cfg, &mut stop).unwrap();
    assert_eq!(first.records.len(), 4);
    // Iteration 4 is mid-scene, so the carried BEV is part of the checkpoint.
    assert!(state.prev_bev.is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.ocbw");
    state.to_param_set().save(&path).unwrap();

    let mut resumed_model = build_model(&spec(), &net(), 999).unwrap();
    let packed = ParamSet::load(&path).unwrap();
    let mut resumed = TrainState::from_param_set(&resumed_model.params, &packed).unwrap();
    assert_eq!(resumed.optimizer.step, 4);
    let rest = train_from(&mut resumed_model, &mut resumed, &sc, &[], &cfg, &mut TrainHooks::default()).unwrap();

    assert_eq!(resumed_model.params, straight.params);
    let joined: Vec<_> = first.records.iter().chain(&rest.records).cloned().collect();
    assert_eq!(joined, full.records);
}

#[test]
fn auxiliary_heads_add_to_the_total() {
    let sc = scenes(1);
    let frame = &sc[0].frames[0];
    let targets = FrameTargets::from_boxes(&frame.objects.iter().map(|o| o.to_box()).collect::<Vec<_>>(), &spec().grid().unwrap());
    let total = |aux: bool| {
        let cfg = NetworkConfig {
            decoder_layers: 2,
            aux_losses: aux,
            ..net()
        };
        let model = build_model(&spec(), &cfg, 6).unwrap();
        let motion = ObjectMotionRecord::default();
        let input = FrameInput {
            feats: &frame.features,
            prev: None,
            pose: frame.relative_pose,
            motion: &motion,
            dt: 0.5,
            max_aligned_objects: 30,
            peaks: None,
        };
        let tc = config(1);
        let mut g = Graph::new(&model.params);
        let out = model.forward(&mut g, &input, &ModuleFlags::ALL, &tc.enhancement()).unwrap();
        let (loss, breakdown, _) = frame_loss(&mut g, &model.grid, &out, &targets, &tc.loss_weights, tc.centerness_alpha, None).unwrap();
        (g.value(loss).data[0], breakdown.total)
    };
    let (plain, plain_breakdown) = total(false);
    assert!((plain - plain_breakdown).abs() < 1e-12);
    let (with_aux, aux_breakdown) = total(true);
    assert!(with_aux > aux_breakdown + 1e-6);
}

#[test]
fn ablation_layout_covers_every_combination() {
    let layout = table_layout();
    assert_eq!(layout.len(), 8);
    assert_eq!(layout[0], ModuleFlags::NONE);
    assert_eq!(layout[7], ModuleFlags::ALL);
    let labels: HashSet<String> = layout.iter().map(|f| f.label()).collect();
    assert_eq!(labels.len(), 8);
    for f in &layout {
        assert_eq!(f.ego_fusion, f.object_fusion);
        assert_eq!(f.local_sampling, f.adaptive_offset);
    }
}
