//! The dual-stream fragment classifier.
//!
//! ```text
//! fragment ─ WD stream ─┐                 ┌─ attention? ─ GAP ─ dropout ─ FC(K)
//!                        ├─ fuse (max|add|concat) ┘
//! fragment ─ WI stream ─┘
//! ```
//!
//! Each stream is a 5×5 stride-2 stem followed by three stride-2 residual
//! blocks. The writer-independent stream can instead carry an embedding
//! head, which is how it is pretrained.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_block_traced, AttentionConfig, AttentionLayer};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::params::{has_prefix, Builder, Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{BatchStats, Mode, RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Real, Tensor};

/// Channel widths of the stem and the three residual blocks at scale 1.
pub const BASE_CHANNELS: [usize; 4] = [64, 128, 256, 512];

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        /// Accepts the snake_case name, with `-` allowed in place of `_`,
        /// or just its first word (`wd` for `wd_only`).
        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let norm = s.trim().replace('-', "_");
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == norm || v.as_str().split('_').next() == Some(&norm))
                    .ok_or_else(|| {
                        let names: Vec<&str> = $name::ALL.iter().map(|v| v.as_str()).collect();
                        Error::Config(format!(
                            "unknown {} `{s}` (expected one of {})",
                            stringify!($name),
                            names.join(", ")
                        ))
                    })
            }
        }
    };
}

named_enum!(
    /// Which streams the classifier runs.
    StreamMode { WdOnly => "wd_only", WiOnly => "wi_only", Dual => "dual" }
);
named_enum!(
    /// How the two stream outputs are combined.
    Fusion { Max => "max", Add => "add", Concat => "concat" }
);
named_enum!(
    /// Where the self-attention block sits.
    AttentionPlacement { None => "none", PerStream => "per_stream", PostFusion => "post_fusion" }
);
named_enum!(
    /// A writer classifier, or the writer-independent stream with an
    /// embedding head (pretraining).
    Role { Classifier => "classifier", Embedder => "embedder" }
);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_writers: usize,
    /// Divides every entry of [`BASE_CHANNELS`].
    pub channel_scale: usize,
    pub mode: StreamMode,
    pub fusion: Fusion,
    pub attention_placement: AttentionPlacement,
    pub attention: AttentionConfig,
    pub dropout_rate: f32,
    pub fragment_side: usize,
    pub grid: usize,
    pub embed_dim: usize,
    pub role: Role,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_writers: 10,
            channel_scale: 1,
            mode: StreamMode::Dual,
            fusion: Fusion::Concat,
            attention_placement: AttentionPlacement::PostFusion,
            attention: AttentionConfig::default(),
            dropout_rate: 0.5,
            fragment_side: 105,
            grid: 3,
            embed_dim: 512,
            role: Role::Classifier,
        }
    }
}

impl ModelConfig {
    /// The pretraining network: writer-independent stream plus embedding head.
    pub fn embedder(channel_scale: usize, embed_dim: usize) -> Self {
        Self {
            mode: StreamMode::WiOnly,
            attention_placement: AttentionPlacement::None,
            role: Role::Embedder,
            channel_scale,
            embed_dim,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> [usize; 4] {
        BASE_CHANNELS.map(|c| c / self.channel_scale.max(1))
    }

    pub fn final_channels(&self) -> usize {
        self.channels()[3]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channel_scale == 0 || BASE_CHANNELS.iter().any(|c| c % self.channel_scale != 0) {
            return bad(format!(
                "channel_scale {} must divide {BASE_CHANNELS:?}",
                self.channel_scale
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if self.fragment_side == 0 || self.grid == 0 {
            return bad("fragment_side and grid must be positive".into());
        }
        if self.attention_placement != AttentionPlacement::None {
            self.attention.validate()?;
        }
        match self.role {
            Role::Classifier => {
                if self.num_writers < 2 {
                    return bad(format!(
                        "num_writers must be at least 2, got {}",
                        self.num_writers
                    ));
                }
                if self.attention_placement == AttentionPlacement::PerStream
                    && self.mode != StreamMode::Dual
                {
                    return bad(format!(
                        "per_stream attention needs both streams, but mode is {}",
                        self.mode
                    ));
                }
            }
            Role::Embedder => {
                if self.mode != StreamMode::WiOnly
                    || self.attention_placement != AttentionPlacement::None
                {
                    return bad("the embedder is the wi stream alone, without attention".into());
                }
                if self.embed_dim == 0 {
                    return bad("embed_dim must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn uses_wd(&self) -> bool {
        self.mode != StreamMode::WiOnly
    }

    pub fn uses_wi(&self) -> bool {
        self.mode != StreamMode::WdOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Wd,
    Wi,
}

impl StreamKind {
    pub fn prefix(self) -> &'static str {
        match self {
            StreamKind::Wd => "wd",
            StreamKind::Wi => "wi",
        }
    }
}

/// Parameter-name prefixes excluded from optimization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    pub prefixes: Vec<String>,
}

impl FreezeMask {
    /// Stem and first two residual blocks of the pretrained stream, for any
    /// mode that uses it.
    pub fn default_for(mode: StreamMode) -> Self {
        match mode {
            StreamMode::WdOnly => Self::default(),
            StreamMode::WiOnly | StreamMode::Dual => Self {
                prefixes: ["wi.stem", "wi.res1", "wi.res2"].map(String::from).to_vec(),
            },
        }
    }
}

/// State threaded through one forward pass: mode, dropout randomness and
/// the batch statistics that training-mode batchnorms observed.
pub struct Ctx {
    pub mode: Mode,
    pub rng: Rng,
    pub bn_updates: Vec<BnUpdate>,
}

impl Ctx {
    pub fn infer() -> Self {
        Self {
            mode: Mode::Infer,
            rng: Rng::new(0),
            bn_updates: Vec::new(),
        }
    }

    pub fn train(rng: Rng) -> Self {
        Self {
            mode: Mode::Train,
            rng,
            bn_updates: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl Bn {
    fn build(b: &mut Builder<'_>, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.weight(&format!("{prefix}.gamma"), &[c], Init::Ones)?,
            beta: b.weight(&format!("{prefix}.beta"), &[c], Init::Zeros)?,
            mean: b.buffer(&format!("{prefix}.running_mean"), &[c], Init::Zeros)?,
            var: b.buffer(&format!("{prefix}.running_var"), &[c], Init::Ones)?,
        })
    }
}

fn conv_weight(
    b: &mut Builder<'_>,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
) -> Result<ParamId> {
    b.weight(
        name,
        &[k, k, cin, cout],
        Init::HeUniform {
            fan_in: k * k * cin,
        },
    )
}

/// `1×1 → BN → ReLU → 3×3 separable (stride s) → BN → ReLU → 1×1 → BN`,
/// plus a `1×1` stride-`s` projection with BN on the skip path, then ReLU
/// after the sum.
#[derive(Clone, Debug)]
struct ResBlock {
    conv_in: ParamId,
    bn_in: Bn,
    depthwise: ParamId,
    pointwise: ParamId,
    bn_mid: Bn,
    conv_out: ParamId,
    bn_out: Bn,
    skip: Option<(ParamId, Bn)>,
    stride: usize,
}

impl ResBlock {
    fn build(b: &mut Builder<'_>, p: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let skip = if stride != 1 || cin != cout {
            Some((
                conv_weight(b, &format!("{p}.skip.conv.weight"), 1, cin, cout)?,
                Bn::build(b, &format!("{p}.skip.bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv_in: conv_weight(b, &format!("{p}.conv_in.weight"), 1, cin, cout)?,
            bn_in: Bn::build(b, &format!("{p}.bn_in"), cout)?,
            depthwise: b.weight(
                &format!("{p}.sep.depthwise"),
                &[3, 3, cout],
                Init::HeUniform { fan_in: 9 },
            )?,
            pointwise: conv_weight(b, &format!("{p}.sep.pointwise"), 1, cout, cout)?,
            bn_mid: Bn::build(b, &format!("{p}.bn_mid"), cout)?,
            conv_out: conv_weight(b, &format!("{p}.conv_out.weight"), 1, cout, cout)?,
            bn_out: Bn::build(b, &format!("{p}.bn_out"), cout)?,
            skip,
            stride,
        })
    }
}

#[derive(Clone, Debug)]
struct Stream {
    stem: ParamId,
    stem_bn: Bn,
    blocks: Vec<ResBlock>,
}

impl Stream {
    fn build(b: &mut Builder<'_>, kind: StreamKind, channels: [usize; 4]) -> Result<Self> {
        let p = kind.prefix();
        let stem = conv_weight(b, &format!("{p}.stem.conv.weight"), 5, 1, channels[0])?;
        let stem_bn = Bn::build(b, &format!("{p}.stem.bn"), channels[0])?;
        let blocks = (0..3)
            .map(|i| {
                ResBlock::build(
                    b,
                    &format!("{p}.res{}", i + 1),
                    channels[i],
                    channels[i + 1],
                    2,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            stem,
            stem_bn,
            blocks,
        })
    }
}

#[derive(Clone, Debug)]
struct Layout {
    wd: Option<Stream>,
    wi: Option<Stream>,
    embed: Option<(ParamId, ParamId)>,
    fuse: Option<(ParamId, Bn)>,
    attn_wd: Option<AttentionLayer>,
    attn_wi: Option<AttentionLayer>,
    attn_fused: Option<AttentionLayer>,
    head: Option<(ParamId, ParamId)>,
}

impl Layout {
    fn build(cfg: &ModelConfig, b: &mut Builder<'_>) -> Result<Self> {
        let ch = cfg.channels();
        let c3 = ch[3];
        let inv = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f32).sqrt());
        let wd = cfg
            .uses_wd()
            .then(|| Stream::build(b, StreamKind::Wd, ch))
            .transpose()?;
        let wi = cfg
            .uses_wi()
            .then(|| Stream::build(b, StreamKind::Wi, ch))
            .transpose()?;
        if cfg.role == Role::Embedder {
            let embed = (
                b.weight("wi.embed.weight", &[c3, cfg.embed_dim], inv(c3))?,
                b.weight("wi.embed.bias", &[cfg.embed_dim], Init::Zeros)?,
            );
            return Ok(Self {
                wd,
                wi,
                embed: Some(embed),
                fuse: None,
                attn_wd: None,
                attn_wi: None,
                attn_fused: None,
                head: None,
            });
        }
        let dual = cfg.mode == StreamMode::Dual;
        let fuse = if dual && cfg.fusion == Fusion::Concat {
            Some((
                conv_weight(b, "fuse.conv.weight", 1, 2 * c3, c3)?,
                Bn::build(b, "fuse.bn", c3)?,
            ))
        } else {
            None
        };
        let mut attn = |name: &str| AttentionLayer::build(b, name, c3, cfg.attention);
        let (attn_wd, attn_wi, attn_fused) = match cfg.attention_placement {
            AttentionPlacement::None => (None, None, None),
            AttentionPlacement::PerStream => (Some(attn("attn.wd")?), Some(attn("attn.wi")?), None),
            AttentionPlacement::PostFusion => (None, None, Some(attn("attn.fused")?)),
        };
        let head = (
            b.weight("head.fc.weight", &[c3, cfg.num_writers], inv(c3))?,
            b.weight("head.fc.bias", &[cfg.num_writers], Init::Zeros)?,
        );
        Ok(Self {
            wd,
            wi,
            embed: None,
            fuse,
            attn_wd,
            attn_wi,
            attn_fused,
            head: Some(head),
        })
    }
}

/// Result of a classifier forward pass.
pub struct Forward {
    /// `[B, K]` pre-softmax scores.
    pub logits: Var,
    /// Final feature map before pooling, `[B, h, w, C3]`.
    pub features: Var,
    /// Attention matrices of every block that ran, `[B, N, N]` each.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// Prefixes filled from another network by [`Model::load_prefix`].
    pub pretrained: Vec<String>,
    layout: Layout,
}

impl Model {
    /// Fresh weights: He-uniform convolutions, unit/zero batchnorm affine
    /// terms with standard running statistics, zero attention decoders.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder::init(&mut store, Rng::new(seed));
        let layout = Layout::build(&config, &mut b)?;
        b.finish()?;
        Ok(Self {
            config,
            store,
            pretrained: Vec::new(),
            layout,
        })
    }

    /// Wraps existing tensors, checking that names and shapes are exactly
    /// those `config` describes.
    pub fn from_store(config: ModelConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::locate(&mut store);
        let layout = Layout::build(&config, &mut b)?;
        b.finish()?;
        Ok(Self {
            config,
            store,
            pretrained: Vec::new(),
            layout,
        })
    }

    /// Number of scalars in optimizable tensors (buffers excluded).
    pub fn num_weights(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.kind == crate::params::ParamKind::Weight)
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    fn bn<T: Real>(&self, tape: &mut Tape<T>, x: Var, l: &Bn, ctx: &mut Ctx) -> Result<Var> {
        let g = tape.param(&self.store, l.gamma);
        let b = tape.param(&self.store, l.beta);
        // frozen layers keep their pretrained statistics
        if ctx.mode == Mode::Train && !self.store.get(l.gamma).frozen {
            let (y, stats) = tape.batch_norm_train(x, g, b, BN_EPS)?;
            ctx.bn_updates.push(BnUpdate {
                mean: l.mean,
                var: l.var,
                stats,
            });
            Ok(y)
        } else {
            let stats = RunningStats {
                mean: self.store.get(l.mean).tensor.data().to_vec(),
                var: self.store.get(l.var).tensor.data().to_vec(),
                initialized: true,
            };
            tape.batch_norm_infer(x, g, b, &stats, BN_EPS)
        }
    }

    fn conv<T: Real>(&self, tape: &mut Tape<T>, x: Var, w: ParamId, stride: usize) -> Result<Var> {
        let w = tape.param(&self.store, w);
        tape.conv2d(x, w, None, stride, Padding::Same)
    }

    fn res_block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        blk: &ResBlock,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let h = self.conv(tape, x, blk.conv_in, 1)?;
        let h = self.bn(tape, h, &blk.bn_in, ctx)?;
        let h = tape.relu(h);
        let dw = tape.param(&self.store, blk.depthwise);
        let pw = tape.param(&self.store, blk.pointwise);
        let h = tape.separable_conv2d(h, dw, pw, None, blk.stride)?;
        let h = self.bn(tape, h, &blk.bn_mid, ctx)?;
        let h = tape.relu(h);
        let h = self.conv(tape, h, blk.conv_out, 1)?;
        let h = self.bn(tape, h, &blk.bn_out, ctx)?;
        let skip = match &blk.skip {
            Some((w, bn)) => {
                let s = self.conv(tape, x, *w, blk.stride)?;
                self.bn(tape, s, bn, ctx)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }

    /// Stem plus three residual blocks: `[B, S, S, 1] → [B, h, w, C3]`.
    pub fn stream_features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        kind: StreamKind,
        x: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let stream = match kind {
            StreamKind::Wd => self.layout.wd.as_ref(),
            StreamKind::Wi => self.layout.wi.as_ref(),
        }
        .ok_or_else(|| {
            Error::Config(format!(
                "model in {} mode has no {} stream",
                self.config.mode,
                kind.prefix()
            ))
        })?;
        let h = self.conv(tape, x, stream.stem, 2)?;
        let h = self.bn(tape, h, &stream.stem_bn, ctx)?;
        let mut h = tape.relu(h);
        for blk in &stream.blocks {
            h = self.res_block(tape, h, blk, ctx)?;
        }
        Ok(h)
    }

    /// Combines the two stream maps per the configured strategy.
    pub fn fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        fwd: Var,
        fwi: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        match self.config.fusion {
            Fusion::Max => tape.maximum(fwd, fwi),
            Fusion::Add => tape.add(fwd, fwi),
            Fusion::Concat => {
                if tape.shape(fwd) != tape.shape(fwi) {
                    return Err(Error::shape(
                        "fuse",
                        format!("{:?} vs {:?}", tape.shape(fwd), tape.shape(fwi)),
                    ));
                }
                let (w, bn) = self
                    .layout
                    .fuse
                    .as_ref()
                    .ok_or_else(|| Error::Config("concat fusion needs both streams".into()))?;
                let cat = tape.concat_last(&[fwd, fwi])?;
                let h = self.conv(tape, cat, *w, 1)?;
                let h = self.bn(tape, h, bn, ctx)?;
                Ok(tape.relu(h))
            }
        }
    }

    fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        layer: &Option<AttentionLayer>,
        maps: &mut Vec<Var>,
    ) -> Result<Var> {
        match layer {
            Some(l) => {
                let p = l.bind(tape, &self.store);
                let (y, m) = attention_block_traced(tape, x, &p, &l.config)?;
                maps.extend(m);
                Ok(y)
            }
            None => Ok(x),
        }
    }

    /// Final feature map (after fusion and attention) and the attention matrices.
    pub fn features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &mut Ctx,
    ) -> Result<(Var, Vec<Var>)> {
        let mut maps = Vec::new();
        let l = &self.layout;
        let fused = match self.config.mode {
            StreamMode::Dual => {
                let a = self.stream_features(tape, StreamKind::Wd, x, ctx)?;
                let a = self.attend(tape, a, &l.attn_wd, &mut maps)?;
                let b = self.stream_features(tape, StreamKind::Wi, x, ctx)?;
                let b = self.attend(tape, b, &l.attn_wi, &mut maps)?;
                self.fuse(tape, a, b, ctx)?
            }
            StreamMode::WdOnly => self.stream_features(tape, StreamKind::Wd, x, ctx)?,
            StreamMode::WiOnly => self.stream_features(tape, StreamKind::Wi, x, ctx)?,
        };
        let out = self.attend(tape, fused, &l.attn_fused, &mut maps)?;
        Ok((out, maps))
    }

    /// `GAP → dropout → FC(K)`; returns logits.
    pub fn head_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        features: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let (w, b) = self
            .layout
            .head
            .ok_or_else(|| Error::Config("an embedder has no classification head".into()))?;
        let pooled = tape.gap(features)?;
        let dropped = tape.dropout(pooled, self.config.dropout_rate, &mut ctx.rng, ctx.mode)?;
        let w = tape.param(&self.store, w);
        let b = tape.param(&self.store, b);
        tape.affine(dropped, w, Some(b))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx) -> Result<Forward> {
        let (features, attention) = self.features(tape, x, ctx)?;
        let logits = self.head_logits(tape, features, ctx)?;
        Ok(Forward {
            logits,
            features,
            attention,
        })
    }

    /// Writer-independent embedding `[B, E]` (embedder role only).
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let (w, b) = self
            .layout
            .embed
            .ok_or_else(|| Error::Config("model has no embedding head".into()))?;
        let f = self.stream_features(tape, StreamKind::Wi, x, ctx)?;
        let pooled = tape.gap(f)?;
        let dropped = tape.dropout(pooled, self.config.dropout_rate, &mut ctx.rng, ctx.mode)?;
        let w = tape.param(&self.store, w);
        let b = tape.param(&self.store, b);
        tape.affine(dropped, w, Some(b))
    }

    /// Inference-mode score vectors `[B, K]` for a batch of fragments.
    pub fn scores(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, x, &mut Ctx::infer())?;
        let p = tape.softmax(out.logits);
        Ok(tape.value(p).clone())
    }

    /// Folds observed batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let mut rs = RunningStats {
                mean: self.store.get(u.mean).tensor.data().to_vec(),
                var: self.store.get(u.var).tensor.data().to_vec(),
                initialized: true,
            };
            rs.update(&u.stats, BN_MOMENTUM);
            self.store
                .get_mut(u.mean)
                .tensor
                .data_mut()
                .copy_from_slice(&rs.mean);
            self.store
                .get_mut(u.var)
                .tensor
                .data_mut()
                .copy_from_slice(&rs.var);
        }
    }

    /// Sets frozen flags from `mask`, replacing any earlier mask. In dual
    /// mode only writer-independent tensors may be frozen.
    pub fn apply_freeze(&mut self, mask: &FreezeMask) -> Result<()> {
        if self.config.mode == StreamMode::Dual {
            if let Some(p) = mask.prefixes.iter().find(|p| !has_prefix(p, "wi")) {
                return Err(Error::Config(format!(
                    "dual mode may only freeze wi.* parameters, got `{p}`"
                )));
            }
        }
        self.store.freeze_prefixes(&mask.prefixes)
    }

    /// Copies every tensor under `prefix` from `source` (for example a
    /// pretrained embedder). Source tensors this model lacks, such as an
    /// embedding head, are ignored; tensors of this model missing from the
    /// source are an error. Returns the number copied.
    pub fn load_prefix(&mut self, source: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in self.store.iter_mut() {
            if !has_prefix(&p.name, prefix) {
                continue;
            }
            let src = source
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("source has no tensor `{}`", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}`: source shape {:?}, model shape {:?}",
                    p.name,
                    src.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = src.tensor.clone();
            copied += 1;
        }
        if copied == 0 {
            return Err(Error::UnknownPrefix {
                prefix: prefix.to_string(),
                known: self.store.known_prefixes().join(", "),
            });
        }
        if !self.pretrained.iter().any(|p| p == prefix) {
            self.pretrained.push(prefix.to_string());
        }
        Ok(copied)
    }

    /// Whether every tensor under `prefix` came from [`Model::load_prefix`].
    pub fn is_pretrained(&self, prefix: &str) -> bool {
        self.pretrained.iter().any(|p| has_prefix(prefix, p))
    }

    /// Attention decoder tensors, which start at zero.
    pub fn attention_decoders(&self) -> Vec<ParamId> {
        [
            &self.layout.attn_wd,
            &self.layout.attn_wi,
            &self.layout.attn_fused,
        ]
        .into_iter()
        .flatten()
        .flat_map(|l| l.decoder_ids())
        .collect()
    }
}
