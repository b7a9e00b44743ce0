use proptest::prelude::*;

use wrid::checkpoint::{decode, encode, load, save};
use wrid::experiments::{ablation_grid, ablation_table, orderings, run_ablation};
use wrid::synth::{gen_identification_dataset, DataSource};
use wrid::{
    AttentionConfig, AttentionPlacement, Error, FreezeMask, Fusion, Model, ModelConfig, Rng,
    RunConfig, StreamMode, Tensor, TrainConfig,
};

fn micro(mode: StreamMode) -> ModelConfig {
    ModelConfig {
        num_writers: 3,
        channel_scale: 16,
        mode,
        attention: AttentionConfig {
            heads: 2,
            head_dim: 4,
        },
        fragment_side: 35,
        ..ModelConfig::default()
    }
}

fn batch(seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(
        &[3, 35, 35, 1],
        (0..3 * 35 * 35).map(|_| rng.uniform()).collect(),
    )
    .unwrap()
}

/// A dual model with nonzero decoders, a freeze mask and a pretrained mark.
fn busy_model() -> Model {
    let emb = Model::new(
        ModelConfig {
            fragment_side: 35,
            ..ModelConfig::embedder(16, 8)
        },
        1,
    )
    .unwrap();
    let mut m = Model::new(micro(StreamMode::Dual), 2).unwrap();
    m.load_prefix(&emb.store, "wi").unwrap();
    m.apply_freeze(&FreezeMask::default_for(StreamMode::Dual))
        .unwrap();
    let mut rng = Rng::new(3);
    for id in m.attention_decoders() {
        for v in m.store.get_mut(id).tensor.data_mut() {
            *v = rng.range(-0.1, 0.1);
        }
    }
    m
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = busy_model();
    let bytes = encode(&m);
    assert_eq!(&bytes[..4], b"FDWI");
    let back = decode(&bytes).unwrap();
    assert_eq!(encode(&back), bytes);
    assert_eq!(back.config, m.config);
    assert_eq!(back.pretrained, m.pretrained);
    for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
        assert_eq!((&a.name, a.frozen, a.kind), (&b.name, b.frozen, b.kind));
    }
    for seed in 0..3 {
        let x = batch(seed);
        assert_eq!(
            m.scores(&x).unwrap().data(),
            back.scores(&x).unwrap().data()
        );
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::new(micro(StreamMode::WdOnly), 5).unwrap();
    save(&m, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(encode(&back), encode(&m));
    assert!(matches!(
        load(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = encode(&Model::new(micro(StreamMode::WdOnly), 5).unwrap());
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(decode(&flipped)
        .unwrap_err()
        .to_string()
        .contains("checksum"));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(decode(&magic).unwrap_err().to_string().contains("magic"));
    assert!(decode(&bytes[..bytes.len() - 9]).is_err());
    assert!(decode(&[]).is_err());
}

#[test]
fn architecture_mismatch_is_a_load_error() {
    // a checkpoint whose header disagrees with its tensors
    let m = Model::new(micro(StreamMode::WdOnly), 5).unwrap();
    let mut other = Model::new(micro(StreamMode::WdOnly), 5).unwrap();
    other.config.num_writers = 4;
    let good = encode(&m);
    let header_of = |b: &[u8]| {
        let n = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        b[12..12 + n].to_vec()
    };
    let (h_good, h_other) = (header_of(&good), header_of(&encode(&other)));
    let mut spliced = good[..8].to_vec();
    spliced.extend_from_slice(&(h_other.len() as u32).to_le_bytes());
    spliced.extend_from_slice(&h_other);
    spliced.extend_from_slice(&good[12 + h_good.len()..good.len() - 4]);
    let crc = crc32(&spliced);
    spliced.extend_from_slice(&crc.to_le_bytes());
    let err = decode(&spliced).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

/// Bitwise CRC-32 (IEEE), independent of the library's implementation.
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

#[test]
fn checksum_matches_reference_crc() {
    let bytes = encode(&Model::new(micro(StreamMode::WdOnly), 1).unwrap());
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    assert_eq!(u32::from_le_bytes(tail.try_into().unwrap()), crc32(body));
}

fn run_config(seed: u64, scale: usize, mode: StreamMode, fusion: Fusion, lr: f64) -> RunConfig {
    RunConfig {
        seed,
        data: DataSource::Synthetic {
            classes: 4,
            per_class: 12,
            seed,
        },
        out_dir: "runs/a".into(),
        model: ModelConfig {
            channel_scale: scale,
            mode,
            fusion,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            learning_rate: lr,
            seed,
            ..TrainConfig::default()
        },
    }
}

proptest! {
    #[test]
    fn run_config_text_round_trip(
        seed in any::<u32>(),
        scale in prop::sample::select(vec![1usize, 2, 4, 8, 16]),
        mode in prop::sample::select(StreamMode::ALL.to_vec()),
        fusion in prop::sample::select(Fusion::ALL.to_vec()),
        lr in 1e-6f64..1.0,
    ) {
        let mode_ok = mode == StreamMode::Dual;
        let mut cfg = run_config(seed as u64, scale, mode, fusion, lr);
        if !mode_ok {
            cfg.model.attention_placement = AttentionPlacement::None;
        }
        let text = cfg.to_toml();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}

#[test]
fn run_config_rejects_unknown_and_invalid_values() {
    let text = run_config(1, 4, StreamMode::Dual, Fusion::Concat, 1e-3).to_toml();
    assert!(text.contains("data = \"synth:4,12,1\""));
    assert!(RunConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
    let bad = text.replace("fusion = \"concat\"", "fusion = \"sum\"");
    assert!(RunConfig::from_toml(&bad).is_err());
    let bad = text.replace("batch_size = 16", "batch_size = 0");
    assert!(RunConfig::from_toml(&bad).is_err());
}

#[test]
fn grid_has_eleven_distinct_coherent_variants() {
    let grid = ablation_grid();
    assert_eq!(grid.len(), 11);
    for (i, v) in grid.iter().enumerate() {
        assert!(
            v.apply(&ModelConfig::default()).validate().is_ok(),
            "{}",
            v.label()
        );
        assert!(grid[i + 1..].iter().all(|w| w != v));
    }
    assert_eq!(
        grid.iter().filter(|v| v.mode == StreamMode::Dual).count(),
        9
    );
}

#[test]
fn ablation_runner_emits_one_row_per_variant() {
    let ds = gen_identification_dataset(3, 6, 4).unwrap();
    let emb = Model::new(
        ModelConfig {
            fragment_side: 35,
            ..ModelConfig::embedder(16, 8)
        },
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let mut ticks = 0;
    let rows = run_ablation(
        &micro(StreamMode::Dual),
        &cfg,
        0,
        &ds,
        &emb.store,
        &ablation_grid(),
        |_, _| ticks += 1,
    )
    .unwrap();
    assert_eq!(rows.len(), 11);
    assert_eq!(ticks, 11);
    let table = ablation_table(&rows);
    assert_eq!(table.lines().count(), 13);
    for r in &rows {
        assert!(r.report.top1 <= r.report.top5);
    }
    let ord = orderings(&rows);
    assert_eq!(ord.len(), 3);
}
