//! Multi-head self-attention over the positions of a feature map, with the
//! result decoded back to the input channels and added to the input.
//!
//! ```text
//! X [B,H,W,C] ─unfold→ X_U [B,N,C] ─G→ Z [B,N,d] ─MHA→ X_t [B,N,d] ─Ĝ→ [B,N,C] ─fold→ + X
//! ```
//!
//! There is no positional encoding, so the block is equivariant to any
//! permutation of the `N = H·W` tokens before the residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Builder, Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            head_dim: 64,
        }
    }
}

impl AttentionConfig {
    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "attention needs at least one head of positive width, got {}x{}",
                self.heads, self.head_dim
            )));
        }
        Ok(())
    }
}

/// Parameter handles of one attention block, stored under `prefix`.
///
/// Query/key/value matrices are `[d, d]`, head `i` owning columns
/// `i·d_h .. (i+1)·d_h`.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub config: AttentionConfig,
    pub channels: usize,
    enc_w: ParamId,
    enc_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// The layer's parameters bound on a particular tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub enc_w: Var,
    pub enc_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub dec_w: Var,
    pub dec_b: Var,
}

impl AttentionLayer {
    /// Declares the layer's tensors: projections uniform in `±1/√fan_in`,
    /// encoder bias zero, decoder all zero (the block starts as identity).
    pub fn build(
        b: &mut Builder<'_>,
        prefix: &str,
        channels: usize,
        config: AttentionConfig,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim();
        let inv = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f32).sqrt());
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            config,
            channels,
            enc_w: b.weight(&name("enc.weight"), &[channels, d], inv(channels))?,
            enc_b: b.weight(&name("enc.bias"), &[d], Init::Zeros)?,
            wq: b.weight(&name("query"), &[d, d], inv(d))?,
            wk: b.weight(&name("key"), &[d, d], inv(d))?,
            wv: b.weight(&name("value"), &[d, d], inv(d))?,
            wo: b.weight(&name("out"), &[d, d], inv(d))?,
            dec_w: b.weight(&name("dec.weight"), &[d, channels], Init::Zeros)?,
            dec_b: b.weight(&name("dec.bias"), &[channels], Init::Zeros)?,
        })
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore) -> AttentionVars {
        AttentionVars {
            enc_w: tape.param(store, self.enc_w),
            enc_b: tape.param(store, self.enc_b),
            wq: tape.param(store, self.wq),
            wk: tape.param(store, self.wk),
            wv: tape.param(store, self.wv),
            wo: tape.param(store, self.wo),
            dec_w: tape.param(store, self.dec_w),
            dec_b: tape.param(store, self.dec_b),
        }
    }

    pub fn decoder_ids(&self) -> [ParamId; 2] {
        [self.dec_w, self.dec_b]
    }
}

/// `[B,H,W,C] → [B,H·W,C]`; token `n` is position `(n div W, n mod W)`.
pub fn unfold<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [b, h, w, c] => tape.reshape(x, &[b, h * w, c]),
        ref s => Err(Error::shape(
            "unfold",
            format!("expected [B,H,W,C], got {s:?}"),
        )),
    }
}

/// Inverse of [`unfold`].
pub fn fold<T: Real>(tape: &mut Tape<T>, xu: Var, h: usize, w: usize) -> Result<Var> {
    match *tape.shape(xu) {
        [b, n, c] if n == h * w => tape.reshape(xu, &[b, h, w, c]),
        ref s => Err(Error::shape(
            "fold",
            format!("{s:?} does not hold {h}x{w} tokens"),
        )),
    }
}

/// `Z = G(X_U)`: per-token layer normalization, then an affine map to `d`.
pub fn encode<T: Real>(tape: &mut Tape<T>, xu: Var, p: &AttentionVars) -> Result<Var> {
    let normed = tape.layer_norm(xu);
    tape.affine(normed, p.enc_w, Some(p.enc_b))
}

/// Output of [`multi_head_attention`].
pub struct Attended {
    /// `X_t`, `[B, N, d]`.
    pub output: Var,
    /// Per-head attention matrices `A_i`, each `[B, N, N]`.
    pub maps: Vec<Var>,
}

/// `A_i = softmax(Q_i K_iᵀ / √d_h)`, `head_i = A_i V_i`,
/// `X_t = [head_1 … head_h] W^O`.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    p: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<Attended> {
    let d = cfg.embed_dim();
    if tape.value(z).last_dim() != d {
        return Err(Error::Dim {
            op: "multi_head_attention",
            axis: "embedding",
            expected: d,
            actual: tape.value(z).last_dim(),
        });
    }
    let q = tape.affine(z, p.wq, None)?;
    let k = tape.affine(z, p.wk, None)?;
    let v = tape.affine(z, p.wv, None)?;
    let scale = 1.0 / (cfg.head_dim as f32).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let (lo, w) = (i * cfg.head_dim, cfg.head_dim);
        let qi = tape.narrow_last(q, lo, w)?;
        let ki = tape.narrow_last(k, lo, w)?;
        let vi = tape.narrow_last(v, lo, w)?;
        let scores = tape.bmm(qi, ki, true)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores);
        heads.push(tape.bmm(a, vi, false)?);
        maps.push(a);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_last(&heads)?
    };
    let output = tape.affine(cat, p.wo, None)?;
    Ok(Attended { output, maps })
}

/// `X + fold(Ĝ(X_t))`.
pub fn decode_residual<T: Real>(
    tape: &mut Tape<T>,
    xt: Var,
    x: Var,
    p: &AttentionVars,
) -> Result<Var> {
    let (h, w) = match *tape.shape(x) {
        [_, h, w, _] => (h, w),
        ref s => {
            return Err(Error::shape(
                "decode_residual",
                format!("expected [B,H,W,C], got {s:?}"),
            ))
        }
    };
    let dec = tape.affine(xt, p.dec_w, Some(p.dec_b))?;
    let back = fold(tape, dec, h, w)?;
    tape.add(x, back)
}

/// Full block; shape-preserving.
pub fn attention_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    Ok(attention_block_traced(tape, x, p, cfg)?.0)
}

/// [`attention_block`] that also returns the attention matrices.
pub fn attention_block_traced<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    let xu = unfold(tape, x)?;
    let z = encode(tape, xu, p)?;
    let att = multi_head_attention(tape, z, p, cfg)?;
    let out = decode_residual(tape, att.output, x, p)?;
    Ok((out, att.maps))
}
