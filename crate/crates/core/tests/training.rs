use std::ops::ControlFlow;

use proptest::prelude::*;

use wrid::synth::{gen_identification_dataset, GlyphDataset};
use wrid::train::{
    batch_loss, fragment_loss, jsonl, pretrain_wi, smooth_labels, smoothed_ce, train, train_step,
    triplet_batch, triplet_loss, Adam, EpochMetrics, Monitor, PlateauScheduler, TrainConfig,
    Triplet,
};
use wrid::{
    grad_check, AttentionConfig, AttentionPlacement, Ctx, Error, FreezeMask, GradCheckOptions,
    GrayImage, Model, ModelConfig, ParamStore, Parameter, Rng, StreamMode, Tape, Tensor,
};

const GRAD_TOL: f64 = 1e-2;

#[test]
fn smoothing_examples() {
    let y = smooth_labels(3, 10, 0.1).unwrap();
    assert_eq!(y.values[3], 0.9);
    assert!(y
        .values
        .iter()
        .enumerate()
        .all(|(i, &v)| i == 3 || v == 0.01));
    assert!((y.values.iter().sum::<f64>() - 0.99).abs() < 1e-15);
    assert_eq!(
        smooth_labels(1, 4, 0.0).unwrap().values,
        [0.0, 1.0, 0.0, 0.0]
    );
    assert_eq!(smooth_labels(0, 2, 0.1).unwrap().values, [0.9, 0.05]);
    assert!(smooth_labels(2, 2, 0.1).is_err());
    assert!(smooth_labels(0, 2, 1.0).is_err());
}

#[test]
fn smoothing_identity_on_pinned_cases() {
    for k in [2usize, 10, 105] {
        for eps in [0.0, 0.1] {
            for target in [0, k / 2, k - 1] {
                let y = smooth_labels(target, k, eps).unwrap();
                assert_eq!(y.values[target], 1.0 - eps);
                for (j, &v) in y.values.iter().enumerate() {
                    if j != target {
                        assert_eq!(v, eps / k as f64);
                    }
                }
                let sum: f64 = y.values.iter().sum();
                assert!((sum - (1.0 - eps / k as f64)).abs() <= 4.0 * f64::EPSILON * k as f64);
            }
        }
    }
}

proptest! {
    #[test]
    fn smoothing_sum_identity(k in 2usize..300, eps in 0.0f64..0.999, t in any::<prop::sample::Index>()) {
        let target = t.index(k);
        let sum: f64 = smooth_labels(target, k, eps).unwrap().values.iter().sum();
        prop_assert!((sum - (1.0 - eps / k as f64)).abs() <= 4.0 * f64::EPSILON * k as f64);
    }

    #[test]
    fn loss_ignores_order_of_off_target_scores(raw in prop::collection::vec(0.01f64..1.0, 3..8), seed in any::<u64>()) {
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let y = smooth_labels(0, p.len(), 0.1).unwrap();
        let mut q = p.clone();
        Rng::new(seed).shuffle(&mut q[1..]);
        prop_assert!((fragment_loss(&p, &y) - fragment_loss(&q, &y)).abs() < 1e-12);
    }

    #[test]
    fn triplet_loss_is_zero_iff_margin_holds(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        p in prop::collection::vec(-1.0f64..1.0, 4),
        n in prop::collection::vec(-1.0f64..1.0, 4),
        m in 0.0f64..1.0,
    ) {
        let unit = |v: &[f64]| {
            let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / s).collect::<Vec<_>>()
        };
        prop_assume!([&a, &p, &n].iter().all(|v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6));
        let (ua, up, un) = (unit(&a), unit(&p), unit(&n));
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        let holds = d(&ua, &up) + m <= d(&ua, &un);
        let loss = triplet_loss(&a, &p, &n, m).unwrap();
        prop_assert_eq!(loss == 0.0, holds);
    }

    #[test]
    fn batch_loss_ignores_order(mut v in prop::collection::vec(0.0f64..10.0, 1..20), seed in any::<u64>()) {
        let before = batch_loss(&v).unwrap();
        Rng::new(seed).shuffle(&mut v);
        prop_assert!((batch_loss(&v).unwrap() - before).abs() < 1e-12);
    }

    #[test]
    fn lr_is_a_halving_of_the_initial_value(metrics in prop::collection::vec(0.0f64..1.0, 1..80), patience in 1usize..6) {
        let mut s = PlateauScheduler::new(1e-3, patience, Monitor::Max);
        let mut last = 1e-3;
        for m in metrics {
            let lr = s.step(m).unwrap();
            prop_assert!(lr <= last);
            let k = (1e-3 / lr).log2();
            prop_assert!((k - k.round()).abs() < 1e-9);
            last = lr;
        }
    }
}

#[test]
fn fragment_loss_examples() {
    let y0 = smooth_labels(1, 3, 0.0).unwrap();
    assert!(fragment_loss(&[0.0, 1.0, 0.0], &y0).abs() < 1e-12);
    let y = smooth_labels(0, 2, 0.0).unwrap();
    assert!((fragment_loss(&[0.5, 0.5], &y) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn tape_loss_matches_scalar_oracle() {
    let logits = [0.3f64, -1.2, 2.0, 0.1, 0.0, -0.5];
    let labels = [2usize, 0];
    let mut tape = Tape::<f64>::with_grad(false);
    let z = tape.constant(Tensor::new(&[2, 3], logits.to_vec()).unwrap());
    let loss = smoothed_ce(&mut tape, z, &labels, 0.1).unwrap();
    let mut per = Vec::new();
    for (row, &l) in logits.chunks(3).zip(&labels) {
        let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / s).collect();
        per.push(fragment_loss(&p, &smooth_labels(l, 3, 0.1).unwrap()));
    }
    assert!((tape.value(loss).item() - batch_loss(&per).unwrap()).abs() < 1e-12);
}

#[test]
fn batch_loss_examples() {
    assert_eq!(batch_loss(&[1.0]).unwrap(), 1.0);
    assert_eq!(batch_loss(&[1.0, 3.0]).unwrap(), 2.0);
    assert!(matches!(batch_loss(&[]), Err(Error::InvalidArgument(_))));
}

#[test]
fn smoothed_ce_passes_grad_check() {
    let opts = GradCheckOptions::default();
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let z = Tensor::new(&[4, 5], (0..20).map(|_| rng.range(-3.0, 3.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
        let report = grad_check::<f64, _>(
            |t, v| smoothed_ce(t, v[0], &labels, 0.1),
            &[Parameter::new("logits", z)],
            &opts,
        )
        .unwrap();
        assert!(
            report.passes(GRAD_TOL),
            "seed {seed}: {:.3e}",
            report.max_rel_error
        );
    }
}

#[test]
fn triplet_examples() {
    assert_eq!(
        triplet_loss(&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0], 0.2).unwrap(),
        0.0
    );
    let v = triplet_loss(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], 0.2).unwrap();
    assert!((v - 2.2).abs() < 1e-12);
    assert_eq!(
        triplet_loss(&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], 0.2).unwrap(),
        0.0
    );
    assert!(triplet_loss(&[0.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], 0.2).is_err());
}

#[test]
fn tape_triplets_match_scalar_oracle_and_grad_check() {
    let triplets = [
        Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        },
        Triplet {
            anchor: 1,
            positive: 0,
            negative: 3,
        },
        Triplet {
            anchor: 2,
            positive: 3,
            negative: 0,
        },
    ];
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let e = Tensor::new(&[4, 6], (0..24).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let rows: Vec<Vec<f64>> = e
            .data()
            .chunks(6)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let oracle = triplets
            .iter()
            .map(|t| {
                triplet_loss(&rows[t.anchor], &rows[t.positive], &rows[t.negative], 0.2).unwrap()
            })
            .sum::<f64>()
            / 3.0;
        let mut tape = Tape::<f64>::with_grad(false);
        let v = tape.constant(e.cast());
        let l = triplet_batch(&mut tape, v, &triplets, 0.2).unwrap();
        assert!((tape.value(l).item() - oracle).abs() < 1e-6);

        let report = grad_check::<f64, _>(
            |t, v| triplet_batch(t, v[0], &triplets, 0.2),
            &[Parameter::new("emb", e)],
            &GradCheckOptions {
                eps: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            report.passes(GRAD_TOL),
            "seed {seed}: {:.3e}",
            report.max_rel_error
        );
    }
}

fn store_with(values: &[(&str, Vec<f32>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, v) in values {
        s.add(n, Tensor::from_vec(v.clone()));
    }
    s
}

#[test]
fn adam_first_step_moves_by_lr_against_the_gradient_sign() {
    let mut s = store_with(&[("w", vec![0.5, -0.5, 1.0])]);
    let id = s.id("w").unwrap();
    let mut adam = Adam::new(1e-3);
    adam.step(&mut s, &[(id, Tensor::from_vec(vec![0.3, -2.0, 1e-3]))])
        .unwrap();
    let w = s.get(id).tensor.data();
    for (got, want) in w.iter().zip([0.5 - 1e-3, -0.5 + 1e-3, 1.0 - 1e-3]) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert_eq!(adam.t, 1);
}

#[test]
fn adam_matches_hand_rolled_recurrence() {
    let mut s = store_with(&[("w", vec![0.2])]);
    let id = s.id("w").unwrap();
    let mut adam = Adam::new(0.01);
    let (mut w, mut m, mut v) = (0.2f64, 0.0f64, 0.0f64);
    for t in 1..=25 {
        let g = (t as f64 * 0.7).sin();
        adam.step(&mut s, &[(id, Tensor::from_vec(vec![g as f32]))])
            .unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 0.01 * mh / (vh.sqrt() + 1e-8);
    }
    assert!((s.get(id).tensor.data()[0] as f64 - w).abs() < 1e-6);
}

#[test]
fn adam_zero_grads_frozen_and_twins() {
    let mut s = store_with(&[
        ("a", vec![1.0, 2.0]),
        ("b", vec![1.0, 2.0]),
        ("c", vec![3.0]),
    ]);
    s.freeze_prefixes(&["c"]).unwrap();
    let (a, b, c) = (s.id("a").unwrap(), s.id("b").unwrap(), s.id("c").unwrap());
    let mut adam = Adam::new(1e-3);
    adam.step(&mut s, &[(a, Tensor::from_vec(vec![0.0, 0.0]))])
        .unwrap();
    assert_eq!(s.get(a).tensor.data(), &[1.0, 2.0]);
    assert_eq!(adam.t, 1);
    for _ in 0..3 {
        let g = Tensor::from_vec(vec![0.4, -0.1]);
        adam.step(
            &mut s,
            &[(a, g.clone()), (b, g), (c, Tensor::from_vec(vec![5.0]))],
        )
        .unwrap();
    }
    assert_eq!(s.get(a).tensor.data(), s.get(b).tensor.data());
    assert_eq!(s.get(c).tensor.data(), &[3.0]);
    assert_eq!(adam.t, 4);
    assert!(adam
        .step(&mut s, &[(a, Tensor::from_vec(vec![1.0]))])
        .is_err());
}

#[test]
fn plateau_examples() {
    let mut s = PlateauScheduler::new(1e-3, 10, Monitor::Max);
    for m in [0.5, 0.6, 0.7] {
        assert_eq!(s.step(m).unwrap(), 1e-3);
    }
    for i in 0..10 {
        let lr = s.step(0.7).unwrap();
        assert_eq!(lr, if i < 9 { 1e-3 } else { 5e-4 });
    }
    let mut p = PlateauScheduler::new(1e-3, 5, Monitor::Min);
    p.step(1.0).unwrap();
    let lrs: Vec<f64> = (0..5).map(|_| p.step(1.5).unwrap()).collect();
    assert_eq!(lrs, [1e-3, 1e-3, 1e-3, 1e-3, 5e-4]);
    assert_eq!(p.step(0.9).unwrap(), 5e-4);
    assert!(p.step(f64::NAN).is_err());
}

#[test]
fn config_defaults_and_validation() {
    let c = TrainConfig::default();
    assert_eq!(
        (
            c.batch_size,
            c.epochs,
            c.learning_rate,
            c.label_smoothing,
            c.patience
        ),
        (16, 150, 1e-3, 0.1, 10)
    );
    let p = TrainConfig::pretrain();
    assert_eq!((p.epochs, p.patience), (100, 5));
    assert!(TrainConfig {
        batch_size: 0,
        ..c.clone()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        label_smoothing: 1.0,
        ..c
    }
    .validate()
    .is_err());
}

#[test]
fn metrics_serialize_as_json_lines() {
    let m = EpochMetrics {
        epoch: 3,
        lr: 5e-4,
        train_loss: 0.25,
        val_top1: Some(80.0),
        val_top5: None,
    };
    let line = jsonl(&m);
    assert!(!line.contains('\n'));
    assert_eq!(serde_json::from_str::<EpochMetrics>(&line).unwrap(), m);
}

fn micro(mode: StreamMode, k: usize) -> ModelConfig {
    ModelConfig {
        num_writers: k,
        channel_scale: 16,
        mode,
        attention_placement: AttentionPlacement::PostFusion,
        attention: AttentionConfig {
            heads: 2,
            head_dim: 4,
        },
        fragment_side: 35,
        ..ModelConfig::default()
    }
}

fn train_mode_loss(model: &Model, x: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::<f64>::with_grad(false);
    let xv = tape.constant(x.cast());
    let out = model
        .forward(&mut tape, xv, &mut Ctx::train(Rng::new(0)))
        .unwrap();
    let l = smoothed_ce(&mut tape, out.logits, labels, 0.1).unwrap();
    tape.value(l).item()
}

#[test]
fn one_small_step_lowers_the_loss_of_its_example() {
    for seed in 0..5 {
        let cfg = ModelConfig {
            dropout_rate: 0.0,
            ..micro(StreamMode::WdOnly, 3)
        };
        let mut model = Model::new(cfg, seed).unwrap();
        let mut rng = Rng::new(seed);
        let x = Tensor::new(
            &[1, 35, 35, 1],
            (0..35 * 35).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let labels = [seed as usize % 3];
        let before = train_mode_loss(&model, &x, &labels);
        train_step(
            &mut model,
            &mut Adam::new(1e-4),
            &x,
            &labels,
            0.1,
            Rng::new(1),
        )
        .unwrap();
        let after = train_mode_loss(&model, &x, &labels);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn zero_epochs_is_a_no_op() {
    let ds = gen_identification_dataset(3, 6, 0).unwrap();
    let mut model = Model::new(micro(StreamMode::WdOnly, 3), 0).unwrap();
    let before = model.store.clone();
    let h = train(
        &mut model,
        &ds,
        &TrainConfig {
            epochs: 0,
            ..Default::default()
        },
        |_, _| ControlFlow::Continue(()),
    )
    .unwrap();
    assert!(h.is_empty());
    for ((_, a), (_, b)) in model.store.iter().zip(before.iter()) {
        assert_eq!(a.tensor, b.tensor);
    }
}

#[test]
fn dual_training_requires_pretrained_wi_and_matching_writers() {
    let ds = gen_identification_dataset(3, 6, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let mut dual = Model::new(micro(StreamMode::Dual, 3), 0).unwrap();
    let err = train(&mut dual, &ds, &cfg, |_, _| ControlFlow::Continue(())).unwrap_err();
    assert!(err.to_string().contains("pretrained"), "{err}");
    let mut wrong = Model::new(micro(StreamMode::WdOnly, 4), 0).unwrap();
    assert!(train(&mut wrong, &ds, &cfg, |_, _| ControlFlow::Continue(())).is_err());
}

fn pretrained_dual(seed: u64) -> Model {
    let source = Model::new(
        ModelConfig {
            fragment_side: 35,
            ..ModelConfig::embedder(16, 32)
        },
        seed + 100,
    )
    .unwrap();
    let mut m = Model::new(micro(StreamMode::Dual, 3), seed).unwrap();
    m.load_prefix(&source.store, "wi").unwrap();
    m.apply_freeze(&FreezeMask::default_for(StreamMode::Dual))
        .unwrap();
    m
}

#[test]
fn dual_training_keeps_frozen_prefixes_and_moves_res3() {
    let ds = gen_identification_dataset(3, 6, 1).unwrap();
    let mut model = pretrained_dual(0);
    let before = model.store.clone();
    train(
        &mut model,
        &ds,
        &TrainConfig {
            epochs: 1,
            ..Default::default()
        },
        |_, _| ControlFlow::Continue(()),
    )
    .unwrap();
    let mut res3_changed = false;
    for ((_, b), (_, a)) in before.iter().zip(model.store.iter()) {
        let frozen = ["wi.stem", "wi.res1", "wi.res2"]
            .iter()
            .any(|p| wrid::params::has_prefix(&b.name, p));
        if frozen {
            assert_eq!(a.tensor, b.tensor, "{} moved", b.name);
        }
        if wrid::params::has_prefix(&b.name, "wi.res3") && a.tensor != b.tensor {
            res3_changed = true;
        }
    }
    assert!(res3_changed);
}

#[test]
fn same_seed_same_history() {
    let ds = gen_identification_dataset(3, 6, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let mut m = Model::new(micro(StreamMode::WdOnly, 3), 4).unwrap();
        let h = train(&mut m, &ds, &cfg, |_, _| ControlFlow::Continue(())).unwrap();
        (h.iter().map(jsonl).collect::<Vec<_>>(), m.store)
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(h1, h2);
    assert_eq!(h1.len(), 2);
    for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
        assert_eq!(a.tensor, b.tensor);
    }
}

#[test]
fn observer_can_stop_training() {
    let ds = gen_identification_dataset(3, 6, 2).unwrap();
    let mut m = Model::new(micro(StreamMode::WdOnly, 3), 4).unwrap();
    let h = train(
        &mut m,
        &ds,
        &TrainConfig {
            epochs: 5,
            ..Default::default()
        },
        |e, _| {
            if e.epoch == 2 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        },
    )
    .unwrap();
    assert_eq!(h.len(), 2);
}

fn blob(cx: usize, cy: usize) -> GrayImage {
    let mut img = GrayImage::filled(20, 20, 255);
    for y in cy - 3..cy + 3 {
        for x in cx - 3..cx + 3 {
            img.set(x, y, 0);
        }
    }
    img
}

fn embedder() -> Model {
    Model::new(
        ModelConfig {
            fragment_side: 21,
            dropout_rate: 0.0,
            ..ModelConfig::embedder(8, 16)
        },
        3,
    )
    .unwrap()
}

#[test]
fn pretraining_separates_two_trivial_classes() {
    let glyphs = GlyphDataset {
        num_classes: 2,
        images: vec![blob(5, 5), blob(5, 5), blob(14, 14), blob(14, 14)],
        labels: vec![0, 0, 1, 1],
    };
    let mut model = embedder();
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::pretrain()
    };
    let h = pretrain_wi(&mut model, &glyphs, &cfg, true, |m| {
        if m.train_loss == 0.0 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert_eq!(h.last().unwrap().train_loss, 0.0, "{:?}", h.last());
}

fn small_glyphs() -> GlyphDataset {
    let mut g = GlyphDataset {
        num_classes: 3,
        images: Vec::new(),
        labels: Vec::new(),
    };
    for c in 0..3 {
        for i in 0..20 {
            g.images.push(blob(4 + 5 * c + i % 2, 6 + c * 4));
            g.labels.push(c);
        }
    }
    g
}

#[test]
fn pretraining_is_seeded_and_validation_is_isolated() {
    let glyphs = small_glyphs();
    // patience large enough that neither schedule ever halves
    let cfg = TrainConfig {
        epochs: 3,
        patience: 1000,
        ..TrainConfig::pretrain()
    };
    let run = |val: bool| {
        let mut m = embedder();
        let h = pretrain_wi(&mut m, &glyphs, &cfg, val, |_| ControlFlow::Continue(())).unwrap();
        (h, m.store)
    };
    let (h1, s1) = run(true);
    let (h2, _) = run(true);
    let (h3, s3) = run(false);
    assert_eq!(h1, h2);
    assert!(h1.iter().all(|m| m.val_loss.is_some()));
    assert!(h3.iter().all(|m| m.val_loss.is_none()));
    for ((_, a), (_, b)) in s1.iter().zip(s3.iter()) {
        assert_eq!(a.tensor, b.tensor, "{}", a.name);
    }
}

#[test]
fn pretraining_rejects_datasets_without_triplets() {
    let glyphs = GlyphDataset {
        num_classes: 2,
        images: vec![blob(5, 5), blob(5, 5), blob(14, 14)],
        labels: vec![0, 0, 1],
    };
    let err = pretrain_wi(
        &mut embedder(),
        &glyphs,
        &TrainConfig::pretrain(),
        false,
        |_| ControlFlow::Continue(()),
    );
    assert!(matches!(err, Err(Error::Dataset(_))));
    let mut classifier = Model::new(micro(StreamMode::WdOnly, 3), 0).unwrap();
    assert!(pretrain_wi(
        &mut classifier,
        &small_glyphs(),
        &TrainConfig::pretrain(),
        false,
        |_| ControlFlow::Continue(())
    )
    .is_err());
}
