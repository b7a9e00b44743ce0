mod common;

use common::{micro_model_grad_check, random_tensor};
use proptest::prelude::*;
use wrid::model::BASE_CHANNELS;
use wrid::{
    AttentionConfig, AttentionPlacement, Ctx, Error, FreezeMask, Fusion, Model, ModelConfig,
    ParamKind, Rng, Role, StreamKind, StreamMode, Tape, Tensor,
};

const GRAD_TOL: f64 = 1e-2;

fn micro(mode: StreamMode, fusion: Fusion, placement: AttentionPlacement) -> ModelConfig {
    ModelConfig {
        num_writers: 3,
        channel_scale: 16,
        mode,
        fusion,
        attention_placement: placement,
        attention: AttentionConfig {
            heads: 2,
            head_dim: 4,
        },
        ..ModelConfig::default()
    }
}

fn fragments(seed: u64, n: usize, side: usize) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(
        &[n, side, side, 1],
        (0..n * side * side).map(|_| rng.uniform()).collect(),
    )
    .unwrap()
}

fn infer_features(model: &Model, kind: StreamKind, x: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let f = model
        .stream_features(&mut tape, kind, xv, &mut Ctx::infer())
        .unwrap();
    tape.value(f).clone()
}

fn logits(model: &Model, x: &Tensor) -> Tensor {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, xv, &mut Ctx::infer()).unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn stride_schedule_reaches_seven_by_seven() {
    let x = fragments(1, 1, 105);
    for scale in [1, 4, 8] {
        let cfg = ModelConfig {
            channel_scale: scale,
            mode: StreamMode::WdOnly,
            attention_placement: AttentionPlacement::None,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 0).unwrap();
        let f = infer_features(&model, StreamKind::Wd, &x);
        assert_eq!(f.shape(), &[1, 7, 7, 512 / scale]);
    }
}

#[test]
fn zero_weights_give_zero_features() {
    let mut model = Model::new(
        micro(StreamMode::WdOnly, Fusion::Concat, AttentionPlacement::None),
        2,
    )
    .unwrap();
    for p in model.store.iter_mut() {
        if p.name.ends_with("weight")
            || p.name.ends_with("depthwise")
            || p.name.ends_with("pointwise")
        {
            p.tensor.data_mut().fill(0.0);
        }
    }
    let f = infer_features(&model, StreamKind::Wd, &fragments(3, 2, 105));
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identical_fragments_give_identical_features() {
    let model = Model::new(
        micro(StreamMode::Dual, Fusion::Add, AttentionPlacement::None),
        4,
    )
    .unwrap();
    let one = fragments(5, 1, 105);
    let two = Tensor::stack(&[one.clone(), one.clone()]).unwrap();
    let f = infer_features(&model, StreamKind::Wd, &two);
    assert_eq!(f.sample(0), f.sample(1));
    assert_eq!(f.sample(0), infer_features(&model, StreamKind::Wd, &one));
}

#[test]
fn embedder_has_default_width_and_is_deterministic_in_infer_mode() {
    let model = Model::new(ModelConfig::embedder(16, 512), 6).unwrap();
    assert!(model.store.by_name("wi.embed.weight").is_some());
    assert!(model.store.by_name("head.fc.weight").is_none());
    let x = fragments(7, 2, 105);
    let run = || {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let e = model.embed(&mut tape, xv, &mut Ctx::infer()).unwrap();
        tape.value(e).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[2, 512]);
    assert_eq!(a, run());
}

#[test]
fn fusion_identities() {
    let mut rng = Rng::new(8);
    let f = random_tensor(&mut rng, &[2, 3, 3, 32], 1.0);
    for (fusion, other, expect) in [
        (Fusion::Max, f.clone(), f.clone()),
        (Fusion::Add, Tensor::zeros(f.shape()), f.clone()),
    ] {
        let model =
            Model::new(micro(StreamMode::Dual, fusion, AttentionPlacement::None), 9).unwrap();
        let mut tape = Tape::inference();
        let a = tape.constant(f.clone());
        let b = tape.constant(other);
        let y = model.fuse(&mut tape, a, b, &mut Ctx::infer()).unwrap();
        assert_eq!(tape.value(y), &expect, "{fusion}");
    }
}

#[test]
fn concat_selector_kernel_recovers_relu_of_first_stream() {
    let mut model = Model::new(
        micro(StreamMode::Dual, Fusion::Concat, AttentionPlacement::None),
        10,
    )
    .unwrap();
    let c = model.config.final_channels();
    // [I | 0]: output channel j reads input channel j of the first stream
    let w = model.store.by_name_mut("fuse.conv.weight").unwrap();
    assert_eq!(w.tensor.shape(), &[1, 1, 2 * c, c]);
    w.tensor.data_mut().fill(0.0);
    for j in 0..c {
        w.tensor.data_mut()[j * c + j] = 1.0;
    }
    let mut rng = Rng::new(11);
    let fwd = random_tensor(&mut rng, &[2, 7, 7, c], 2.0);
    let fwi = random_tensor(&mut rng, &[2, 7, 7, c], 2.0);
    let mut tape = Tape::inference();
    let (a, b) = (tape.constant(fwd.clone()), tape.constant(fwi));
    let y = model.fuse(&mut tape, a, b, &mut Ctx::infer()).unwrap();
    assert_eq!(tape.shape(y), &[2, 7, 7, c]);
    // fresh batchnorm: running mean 0, variance 1, gamma 1, beta 0
    let bn_scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (got, x) in tape.value(y).data().iter().zip(fwd.data()) {
        let want = (*x as f64).max(0.0) * bn_scale;
        assert!((*got as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn mismatched_stream_shapes_are_rejected() {
    for fusion in Fusion::ALL {
        let model = Model::new(
            micro(StreamMode::Dual, *fusion, AttentionPlacement::None),
            12,
        )
        .unwrap();
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor::zeros(&[1, 7, 7, 32]));
        let b = tape.constant(Tensor::zeros(&[1, 6, 7, 32]));
        assert!(
            model.fuse(&mut tape, a, b, &mut Ctx::infer()).is_err(),
            "{fusion}"
        );
    }
}

#[test]
fn head_scores_by_hand() {
    let mut model = Model::new(
        ModelConfig {
            num_writers: 2,
            ..micro(StreamMode::WdOnly, Fusion::Concat, AttentionPlacement::None)
        },
        13,
    )
    .unwrap();
    model
        .store
        .by_name_mut("head.fc.weight")
        .unwrap()
        .tensor
        .data_mut()
        .fill(0.0);
    model
        .store
        .by_name_mut("head.fc.bias")
        .unwrap()
        .tensor
        .data_mut()
        .copy_from_slice(&[3f32.ln(), 0.0]);
    let mut tape = Tape::inference();
    let f = tape.constant(random_tensor(&mut Rng::new(14), &[1, 7, 7, 32], 1.0));
    let z = model.head_logits(&mut tape, f, &mut Ctx::infer()).unwrap();
    let p = tape.softmax(z);
    let p = tape.value(p).data();
    assert!(
        (p[0] - 0.75).abs() < 1e-6 && (p[1] - 0.25).abs() < 1e-6,
        "{p:?}"
    );

    // zero weights and bias: uniform over the writers
    model
        .store
        .by_name_mut("head.fc.bias")
        .unwrap()
        .tensor
        .data_mut()
        .fill(0.0);
    let s = model.scores(&fragments(15, 1, 105)).unwrap();
    assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
}

#[test]
fn argmax_ignores_logit_shift() {
    let mut model = Model::new(
        micro(StreamMode::WdOnly, Fusion::Concat, AttentionPlacement::None),
        16,
    )
    .unwrap();
    let x = fragments(17, 4, 105);
    let argmax = |t: &Tensor| -> Vec<usize> {
        t.data()
            .chunks(3)
            .map(|r| (0..3).fold(0, |b, j| if r[j] > r[b] { j } else { b }))
            .collect()
    };
    let before = argmax(&model.scores(&x).unwrap());
    for b in model
        .store
        .by_name_mut("head.fc.bias")
        .unwrap()
        .tensor
        .data_mut()
    {
        *b += 5.0;
    }
    assert_eq!(before, argmax(&model.scores(&x).unwrap()));
}

#[test]
fn scores_are_distributions() {
    let model = Model::new(
        micro(
            StreamMode::Dual,
            Fusion::Concat,
            AttentionPlacement::PostFusion,
        ),
        18,
    )
    .unwrap();
    let s = model.scores(&fragments(19, 3, 105)).unwrap();
    for row in s.data().chunks(3) {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6 && row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn inconsistent_configs_are_rejected() {
    let bad = [
        micro(
            StreamMode::WdOnly,
            Fusion::Concat,
            AttentionPlacement::PerStream,
        ),
        micro(
            StreamMode::WiOnly,
            Fusion::Max,
            AttentionPlacement::PerStream,
        ),
        ModelConfig {
            num_writers: 1,
            ..ModelConfig::default()
        },
        ModelConfig {
            channel_scale: 3,
            ..ModelConfig::default()
        },
        ModelConfig {
            channel_scale: 0,
            ..ModelConfig::default()
        },
        ModelConfig {
            dropout_rate: 1.0,
            ..ModelConfig::default()
        },
        ModelConfig {
            role: Role::Embedder,
            ..ModelConfig::default()
        },
    ];
    for cfg in bad {
        assert!(
            matches!(Model::new(cfg.clone(), 0), Err(Error::Config(_))),
            "{cfg:?}"
        );
    }
}

#[test]
fn enum_names_parse_with_either_separator() {
    assert_eq!(
        "per-stream".parse::<AttentionPlacement>().unwrap(),
        AttentionPlacement::PerStream
    );
    assert_eq!(
        "post_fusion".parse::<AttentionPlacement>().unwrap(),
        AttentionPlacement::PostFusion
    );
    assert_eq!("wd-only".parse::<StreamMode>().unwrap(), StreamMode::WdOnly);
    assert_eq!(Fusion::Concat.to_string(), "concat");
    let err = "sum".parse::<Fusion>().unwrap_err().to_string();
    assert!(err.contains("max, add, concat"), "{err}");
}

#[test]
fn baseline_has_one_stream_and_no_attention() {
    let model = Model::new(
        micro(StreamMode::WdOnly, Fusion::Concat, AttentionPlacement::None),
        20,
    )
    .unwrap();
    assert!(model
        .store
        .iter()
        .all(|(_, p)| p.name.starts_with("wd.") || p.name.starts_with("head.")));
}

/// Copies every tensor the two models share by name from `src` into `dst`.
fn share_weights(src: &Model, dst: &mut Model) {
    for (_, p) in src.store.iter() {
        if let Some(q) = dst.store.by_name_mut(&p.name) {
            q.tensor = p.tensor.clone();
        }
    }
}

#[test]
fn zero_decoders_make_attention_placements_agree() {
    let x = fragments(21, 3, 105);
    for mode in [StreamMode::Dual, StreamMode::WdOnly] {
        let base = Model::new(micro(mode, Fusion::Concat, AttentionPlacement::None), 22).unwrap();
        let want = logits(&base, &x);
        for placement in [
            AttentionPlacement::PerStream,
            AttentionPlacement::PostFusion,
        ] {
            if mode != StreamMode::Dual && placement == AttentionPlacement::PerStream {
                continue;
            }
            let mut m = Model::new(micro(mode, Fusion::Concat, placement), 23).unwrap();
            share_weights(&base, &mut m);
            assert!(!m.attention_decoders().is_empty());
            assert_eq!(logits(&m, &x), want, "{mode} {placement}");
        }
    }
}

#[test]
fn infer_is_deterministic_and_train_is_seeded() {
    let model = Model::new(
        micro(
            StreamMode::Dual,
            Fusion::Concat,
            AttentionPlacement::PostFusion,
        ),
        24,
    )
    .unwrap();
    let x = fragments(25, 4, 105);
    assert_eq!(logits(&model, &x), logits(&model, &x));
    let train = |seed: u64| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::train(Rng::new(seed));
        let out = model.forward(&mut tape, xv, &mut ctx).unwrap();
        (tape.value(out.logits).clone(), ctx.bn_updates.len())
    };
    let (a, n) = train(1);
    assert_eq!(a, train(1).0);
    assert_ne!(a, train(2).0);
    // every non-frozen batchnorm reports statistics: 2 streams x (1 + 3 x 4) + fuse
    assert_eq!(n, 2 * 13 + 1);
}

#[test]
fn bn_updates_move_running_statistics() {
    let mut model = Model::new(
        micro(StreamMode::WdOnly, Fusion::Concat, AttentionPlacement::None),
        26,
    )
    .unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(fragments(27, 2, 105));
    let mut ctx = Ctx::train(Rng::new(0));
    model.forward(&mut tape, xv, &mut ctx).unwrap();
    let u = ctx.bn_updates[0].clone();
    model.apply_bn_updates(&ctx.bn_updates);
    let mean = &model.store.get(u.mean).tensor.data()[0];
    assert!((mean - 0.1 * u.stats.mean[0]).abs() < 1e-6);
}

#[test]
fn default_freeze_masks() {
    assert_eq!(
        FreezeMask::default_for(StreamMode::Dual).prefixes,
        ["wi.stem", "wi.res1", "wi.res2"]
    );
    assert!(FreezeMask::default_for(StreamMode::WdOnly)
        .prefixes
        .is_empty());

    let mut model = Model::new(
        micro(StreamMode::Dual, Fusion::Concat, AttentionPlacement::None),
        28,
    )
    .unwrap();
    model
        .apply_freeze(&FreezeMask::default_for(StreamMode::Dual))
        .unwrap();
    for (_, p) in model.store.iter() {
        let frozen = ["wi.stem.", "wi.res1.", "wi.res2."]
            .iter()
            .any(|s| p.name.starts_with(s));
        assert_eq!(p.frozen, frozen, "{}", p.name);
    }
    // frozen batchnorms run on their stored statistics
    let mut tape = Tape::new();
    let xv = tape.constant(fragments(29, 2, 105));
    let mut ctx = Ctx::train(Rng::new(0));
    model.forward(&mut tape, xv, &mut ctx).unwrap();
    assert_eq!(ctx.bn_updates.len(), 13 + 4 + 1);

    model.apply_freeze(&FreezeMask::default()).unwrap();
    assert!(model.store.iter().all(|(_, p)| !p.frozen));
}

#[test]
fn bad_freeze_prefixes_are_rejected() {
    let mut model = Model::new(
        micro(StreamMode::Dual, Fusion::Concat, AttentionPlacement::None),
        30,
    )
    .unwrap();
    let unknown = FreezeMask {
        prefixes: vec!["wi.res7".into()],
    };
    match model.apply_freeze(&unknown) {
        Err(Error::UnknownPrefix { known, .. }) => assert!(known.contains("wi.res2"), "{known}"),
        other => panic!("{other:?}"),
    }
    let wd = FreezeMask {
        prefixes: vec!["wd.stem".into()],
    };
    assert!(matches!(model.apply_freeze(&wd), Err(Error::Config(_))));
}

#[test]
fn pretrained_stream_transfers_without_its_head() {
    let mut pre = Model::new(ModelConfig::embedder(16, 64), 31).unwrap();
    for p in pre.store.iter_mut() {
        p.tensor = p.tensor.map(|v| v + 0.25);
    }
    let mut model = Model::new(
        micro(StreamMode::Dual, Fusion::Concat, AttentionPlacement::None),
        32,
    )
    .unwrap();
    let n = model.load_prefix(&pre.store, "wi").unwrap();
    let wi_count = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("wi."))
        .count();
    assert_eq!(n, wi_count);
    for (_, p) in model.store.iter() {
        if p.name.starts_with("wi.") {
            assert_eq!(p.tensor, pre.store.by_name(&p.name).unwrap().tensor);
        }
    }
    assert!(model.store.by_name("wi.embed.weight").is_none());

    let wide = Model::new(ModelConfig::embedder(8, 64), 33).unwrap();
    assert!(matches!(
        model.load_prefix(&wide.store, "wi"),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn store_round_trip_through_locate() {
    let cfg = micro(
        StreamMode::Dual,
        Fusion::Concat,
        AttentionPlacement::PerStream,
    );
    let model = Model::new(cfg.clone(), 34).unwrap();
    let again = Model::from_store(cfg.clone(), model.store.clone()).unwrap();
    let x = fragments(35, 2, 105);
    assert_eq!(logits(&model, &x), logits(&again, &x));
    assert_eq!(
        again.store.by_name("wd.stem.bn.running_var").unwrap().kind,
        ParamKind::Buffer
    );

    let other = ModelConfig {
        fusion: Fusion::Add,
        ..cfg
    };
    assert!(Model::from_store(other, model.store.clone()).is_err());
}

#[test]
fn micro_model_passes_end_to_end_grad_check() {
    for seed in 0..3 {
        let r = micro_model_grad_check(seed, 3);
        assert!(r.passes(GRAD_TOL), "seed {seed}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn streams_mirror_each_other(scale_idx in 0usize..4, side in 9usize..40, seed in 0u64..1000) {
        let scale = [8, 16, 32, 64][scale_idx];
        let model = Model::new(ModelConfig {
            channel_scale: scale,
            attention_placement: AttentionPlacement::None,
            ..ModelConfig::default()
        }, seed).unwrap();
        let x = fragments(seed, 1, side);
        let a = infer_features(&model, StreamKind::Wd, &x);
        let b = infer_features(&model, StreamKind::Wi, &x);
        prop_assert_eq!(a.shape(), b.shape());
        let mut s = side;
        for _ in 0..4 {
            s = s.div_ceil(2);
        }
        prop_assert_eq!(a.shape(), &[1, s, s, BASE_CHANNELS[3] / scale][..]);
        for fusion in Fusion::ALL {
            let m = Model::new(ModelConfig { fusion: *fusion, ..model.config.clone() }, seed).unwrap();
            let mut tape = Tape::inference();
            let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let y = m.fuse(&mut tape, av, bv, &mut Ctx::infer()).unwrap();
            prop_assert_eq!(tape.shape(y), a.shape());
        }
    }
}
