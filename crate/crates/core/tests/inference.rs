use proptest::prelude::*;

use wrid::infer::{
    aggregate, aggregate_tensor, concat_batches, heatmap, identify, postprocess_heat, rank_of,
    word_scores,
};
use wrid::infer::{EvalReport, HeatmapOptions, WordOutcome};
use wrid::synth::{gen_writer_style, render_word};
use wrid::{
    AttentionConfig, AttentionPlacement, Error, GrayImage, Model, ModelConfig, Rng, StreamMode,
    Tensor,
};

/// Every `n×k` matrix over `values`, row-major.
fn all_matrices(n: usize, k: usize, values: &[f32]) -> impl Iterator<Item = Vec<Vec<f32>>> + '_ {
    let cells = n * k;
    let total = values.len().pow(cells as u32);
    (0..total).map(move |mut code| {
        let mut flat = Vec::with_capacity(cells);
        for _ in 0..cells {
            flat.push(values[code % values.len()]);
            code /= values.len();
        }
        flat.chunks(k).map(<[f32]>::to_vec).collect()
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn value_set(n: usize, k: usize) -> &'static [f32] {
    // keep each case below ~70k matrices
    if n * k <= 9 {
        &[0.0, 0.3, 0.7]
    } else {
        &[0.1, 0.6]
    }
}

#[test]
fn aggregation_laws_by_enumeration() {
    let mut checked = 0usize;
    for n in 1..=4 {
        let perms = permutations(n);
        for k in 1..=4 {
            for s in all_matrices(n, k, value_set(n, k)) {
                let p = aggregate(&s).unwrap();

                // mean against a plain left-to-right oracle
                for j in 0..k {
                    let oracle = s.iter().map(|r| r[j] as f64).sum::<f64>() / n as f64;
                    assert!((p[j] - oracle).abs() < 1e-12);
                }

                // fragment order never changes the bits
                for perm in &perms {
                    let shuffled: Vec<Vec<f32>> = perm.iter().map(|&i| s[i].clone()).collect();
                    assert_eq!(aggregate(&shuffled).unwrap(), p);
                }

                // tie rule: first index holding the maximum
                let max = p.iter().cloned().fold(f64::MIN, f64::max);
                let first = p.iter().position(|&v| v == max).unwrap();
                assert_eq!(identify(&p), first);
                assert_eq!(rank_of(&p, first), 0);

                // dominance
                for w in 0..k {
                    if s.iter().all(|r| (0..k).all(|j| j == w || r[w] > r[j])) {
                        assert_eq!(identify(&p), w);
                    }
                }
                checked += 1;
            }
            // idempotent mean
            for row in all_matrices(1, k, value_set(n, k)) {
                let rows = vec![row[0].clone(); n];
                let p = aggregate(&rows).unwrap();
                let expect: Vec<f64> = row[0].iter().map(|&v| v as f64).collect();
                assert_eq!(p, expect);
            }
        }
    }
    assert!(checked > 100_000);
}

#[test]
fn spec_examples() {
    assert_eq!(
        aggregate(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        [0.5, 0.5]
    );
    assert!(matches!(aggregate(&[]), Err(Error::InvalidArgument(_))));
    assert!(aggregate(&[vec![1.0], vec![0.5, 0.5]]).is_err());
    assert_eq!(identify(&[0.1, 0.7, 0.2]), 1);
    assert_eq!(identify(&[0.25; 4]), 0);
    assert_eq!(rank_of(&[0.25; 4], 2), 2);
    let t = Tensor::new(&[2, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap();
    let p = aggregate_tensor(&t).unwrap();
    assert!((p[0] - 0.4).abs() < 1e-7 && (p[1] - 0.6).abs() < 1e-7);
}

fn outcome(label: usize, p: &[f64]) -> WordOutcome {
    WordOutcome {
        path: String::new(),
        label,
        predicted: identify(p),
        rank: rank_of(p, label),
    }
}

#[test]
fn rank_three_counts_for_top5_only() {
    let p = [0.5, 0.2, 0.15, 0.1, 0.05];
    assert_eq!(rank_of(&p, 2), 2);
    let r = EvalReport::from_outcomes(5, vec![outcome(2, &p)]);
    assert_eq!((r.top1, r.top5), (0.0, 100.0));
    assert_eq!(r.confusion[2][0], 1);
}

#[test]
fn perfect_scorer_hits_everything() {
    let outcomes = (0..30).map(|i| {
        let mut p = vec![0.0; 6];
        p[i % 6] = 1.0;
        outcome(i % 6, &p)
    });
    let r = EvalReport::from_outcomes(6, outcomes.collect());
    assert_eq!((r.top1, r.top5), (100.0, 100.0));
    let json = r.to_json();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    let table = EvalReport::table(&[("perfect".into(), &r)]);
    assert!(table.contains("Top 1") && table.contains("100.00"));
}

#[test]
fn uniform_random_scorer_on_two_writers_is_a_coin_flip() {
    let mut rng = Rng::new(77);
    let outcomes: Vec<WordOutcome> = (0..4000)
        .map(|i| {
            let a = rng.uniform_f64();
            outcome(i % 2, &[a, 1.0 - a])
        })
        .collect();
    let r = EvalReport::from_outcomes(2, outcomes);
    assert!((r.top1 - 50.0).abs() < 5.0, "top1 {}", r.top1);
    assert_eq!(r.top5, 100.0);
}

proptest! {
    #[test]
    fn top_k_is_monotone_and_bounded(ps in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 7), 0usize..7), 1..40)) {
        let outcomes: Vec<WordOutcome> = ps.iter().map(|(p, l)| outcome(*l, p)).collect();
        let r = EvalReport::from_outcomes(7, outcomes);
        let mut last = 0.0;
        for k in 1..=7 {
            let t = r.top_k(k);
            prop_assert!((0.0..=100.0).contains(&t));
            prop_assert!(t >= last);
            last = t;
        }
        prop_assert_eq!(r.top_k(7), 100.0);
        prop_assert!(r.top1 <= r.top5);
    }

    #[test]
    fn argmax_ignores_positive_scaling(p in prop::collection::vec(0.0f64..1.0, 1..12), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = p.iter().map(|v| v * c).collect();
        prop_assert_eq!(identify(&scaled), identify(&p));
    }

    #[test]
    fn aggregate_of_distributions_is_a_distribution(seed in any::<u64>(), n in 1usize..12, k in 2usize..9) {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                let raw: Vec<f32> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
                let s: f32 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let total: f64 = aggregate(&rows).unwrap().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }
}

fn tiny_model(placement: AttentionPlacement) -> Model {
    let cfg = ModelConfig {
        num_writers: 3,
        channel_scale: 16,
        mode: StreamMode::WdOnly,
        attention_placement: placement,
        attention: AttentionConfig {
            heads: 2,
            head_dim: 4,
        },
        fragment_side: 35,
        ..ModelConfig::default()
    };
    Model::new(cfg, 4).unwrap()
}

fn word() -> GrayImage {
    render_word(&gen_writer_style(2, 3), "wave", &mut Rng::new(3)).unwrap()
}

#[test]
fn heatmap_matches_word_and_spans_full_range() {
    let model = tiny_model(AttentionPlacement::PostFusion);
    let w = word();
    let heat = heatmap(&model, &w, HeatmapOptions::default()).unwrap();
    assert_eq!((heat.width(), heat.height()), (w.width(), w.height()));
    assert_eq!(heat.pixels().iter().min(), Some(&0));
    assert_eq!(heat.pixels().iter().max(), Some(&255));
}

#[test]
fn word_scores_are_per_fragment_distributions() {
    let model = tiny_model(AttentionPlacement::None);
    let s = word_scores(&model, &word()).unwrap();
    assert_eq!(s.shape(), &[9, 3]);
    for row in s.data().chunks(3) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn two_distant_blocks_keep_their_order() {
    let (w, h) = (90, 30);
    let mut raw = vec![0.0f32; w * h];
    for y in 8..22 {
        for x in 6..26 {
            raw[y * w + x] = 2.0;
        }
        for x in 60..80 {
            raw[y * w + x] = 1.0;
        }
    }
    for sigma in [0.5, 1.75, 3.0] {
        let heat = postprocess_heat(&raw, w, h, sigma, w, h).unwrap();
        let hot = heat.get(16, 15);
        let warm = heat.get(70, 15);
        let cold = heat.get(43, 2);
        assert!(
            hot > warm && warm > cold,
            "sigma {sigma}: {hot} {warm} {cold}"
        );
        assert_eq!(hot, 255);
    }
}

#[test]
fn constant_activations_give_a_constant_heat_image() {
    let heat = postprocess_heat(&[0.37; 12 * 9], 12, 9, 1.0, 10, 7).unwrap();
    assert_eq!((heat.width(), heat.height()), (10, 7));
    assert!(heat.pixels().iter().all(|&v| v == heat.pixels()[0]));
}

#[test]
fn non_finite_activations_are_rejected() {
    let mut raw = vec![0.0f32; 16];
    raw[3] = f32::NAN;
    assert!(matches!(
        postprocess_heat(&raw, 4, 4, 1.0, 4, 4),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn batches_join_along_the_first_axis() {
    let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let j = concat_batches(&[a.clone(), b]).unwrap();
    assert_eq!(j.shape(), &[3, 2]);
    assert_eq!(j.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert!(concat_batches(&[a, Tensor::new(&[1, 3], vec![0.0; 3]).unwrap()]).is_err());
}
