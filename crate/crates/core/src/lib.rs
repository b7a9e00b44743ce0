//! Offline writer identification from word-image fragments.
//!
//! A word image is cut into a `P×P` grid of fragments, every fragment is
//! scored by a dual-stream CNN (a writer-dependent stream fused with a
//! triplet-pretrained writer-independent stream, optionally refined by
//! multi-head self-attention), and the fragment scores are averaged to
//! decide the writer.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod image;
pub mod infer;
pub mod kernels;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use attention::{AttentionConfig, AttentionLayer};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use image::{extract_fragments, load_pgm, resize_with_padding, to_tensor, Fragment, GrayImage};
pub use infer::{aggregate, evaluate, heatmap, identify, rank_of, EvalReport, HeatmapOptions};
pub use kernels::Padding;
pub use model::{
    AttentionPlacement, Ctx, FreezeMask, Fusion, Model, ModelConfig, Role, StreamKind, StreamMode,
};
pub use params::{Builder, Init, ParamId, ParamKind, ParamStore, Parameter};
pub use rng::Rng;
pub use tape::{BatchStats, Mode, RunningStats, Tape, Var};
pub use tensor::{Real, Tensor};
pub use train::{pretrain_wi, train, TrainConfig};
