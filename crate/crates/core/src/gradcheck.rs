//! Finite-difference verification of tape gradients.

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::model::{AttentionPlacement, Ctx, Fusion, Model, ModelConfig, StreamMode};
use crate::params::{ParamId, ParamKind, Parameter};
use crate::rng::Rng;
use crate::tape::{Mode, RunningStats, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f32,
    /// Check at most this many coordinates per input (drawn without
    /// replacement from `seed`); `None` differences every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_input: Option<String>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one leaf per input (in order) and must
/// return a scalar. It is called repeatedly, so any randomness inside it
/// must be re-seeded on every call. Frozen inputs are passed as constants
/// and never checked.
///
/// The tape element type `T` sets the arithmetic of both the analytic and
/// the differenced evaluations; inputs are converted from their stored
/// `f32` values and perturbed in `T`.
pub fn grad_check<T, F>(
    f: F,
    inputs: &[Parameter],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>], with_grad: bool| -> Result<(f64, Vec<Option<Vec<T>>>)> {
        let mut tape = Tape::with_grad(with_grad);
        let vars: Vec<Var> = values
            .iter()
            .zip(inputs)
            .map(|(t, p)| tape.leaf(t.clone(), !p.frozen))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        if with_grad {
            tape.backward(loss)?;
        }
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(<[T]>::to_vec))
            .collect();
        Ok((value, grads))
    };

    let mut values: Vec<Tensor<T>> = inputs.iter().map(|p| p.tensor.cast()).collect();
    let (_, analytic) = eval(&values, true)?;

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: None,
        coords_checked: 0,
    };
    let h = T::c(opts.eps as f64);
    for (i, p) in inputs.iter().enumerate() {
        if p.frozen {
            continue;
        }
        let n = p.tensor.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(limit) = opts.max_coords_per_input {
            if limit < n {
                rng.shuffle(&mut coords);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }
        for j in coords {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + h;
            let (plus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = orig - h;
            let (minus, _) = eval(&values, false)?;
            values[i].data_mut()[j] = orig;

            // divide by the step actually taken after rounding
            let step = ((orig + h) - (orig - h)).f64();
            let fd = (plus - minus) / step;
            let ga = analytic[i].as_ref().map_or(0.0, |g| g[j].f64());
            let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = Some(format!("{}[{j}] analytic {ga:.6e} fd {fd:.6e}", p.name));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Parameter::new("x", Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        let r = grad_check::<f32, _>(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.coords_checked, 3);
        assert!(r.passes(1e-2), "{r:?}");
    }

    #[test]
    fn frozen_inputs_are_skipped() {
        let x = Parameter::new("x", Tensor::from_vec(vec![1.0, 2.0]));
        let y = Parameter::new("y", Tensor::from_vec(vec![3.0, 4.0])).frozen();
        let r = grad_check::<f32, _>(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                Ok(t.sum(p))
            },
            &[x, y],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.coords_checked, 2);
        assert!(r.passes(1e-2));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly 0 has a kink; differencing across it disagrees with
        // the one-sided analytic derivative.
        let x = Parameter::new("x", Tensor::from_vec(vec![0.0]));
        let r = grad_check::<f32, _>(
            |t, v| {
                let r = t.relu(v[0]);
                Ok(t.sum(r))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passes(1e-2));
    }
}

// ------------------------------------------------------------------ suite

/// Tolerance on the maximum relative error.
pub const GRAD_TOL: f64 = 1e-2;

/// Central-difference step for whole-network checks. A ReLU network is only
/// piecewise linear; at 1e-3 the two evaluations regularly land on
/// different sides of some unit's kink, so the step is kept well inside
/// the linear pieces (f64 leaves ample precision at this size).
pub const MODEL_FD_STEP: f32 = 1e-6;

fn uniform_tensor(rng: &mut Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.range(-scale, scale)).collect())
        .expect("size matches shape")
}

/// Projects an output onto fixed pseudo-random weights so that every
/// coordinate gets a non-trivial adjoint.
fn project<T: Real>(tape: &mut Tape<T>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed ^ 0xABCD);
    let w = uniform_tensor(&mut rng, tape.shape(v), 1.0);
    let wv = tape.constant(w.cast());
    let p = tape.mul(v, wv)?;
    Ok(tape.sum(p))
}

/// Every differentiable tape operation, grouped into small objectives.
pub const OPS: [&str; 18] = [
    "affine",
    "conv2d",
    "conv2d_stride2",
    "separable_conv2d",
    "batchnorm_train",
    "batchnorm_infer",
    "relu",
    "add_sub_mul",
    "channel_max",
    "concat_narrow",
    "gap",
    "dropout",
    "softmax",
    "layer_norm",
    "bmm",
    "soft_cross_entropy",
    "l2_gather_sumlast",
    "scale_shift_reshape_mean",
];

/// Random inputs of the objective `op`.
pub fn op_inputs(op: &str, seed: u64) -> Vec<Parameter> {
    let mut rng = Rng::new(seed);
    let mut r = |shape: &[usize]| uniform_tensor(&mut rng, shape, 1.0);
    let p = |name: &str, t: Tensor| Parameter::new(name, t);
    match op {
        "affine" => vec![p("x", r(&[3, 4])), p("w", r(&[4, 5])), p("b", r(&[5]))],
        "conv2d" => vec![
            p("x", r(&[1, 5, 5, 2])),
            p("w", r(&[3, 3, 2, 3])),
            p("b", r(&[3])),
        ],
        "conv2d_stride2" => vec![p("x", r(&[2, 6, 5, 2])), p("w", r(&[5, 5, 2, 2]))],
        "separable_conv2d" => vec![
            p("x", r(&[1, 5, 5, 3])),
            p("dw", r(&[3, 3, 3])),
            p("pw", r(&[1, 1, 3, 2])),
            p("b", r(&[2])),
        ],
        "batchnorm_train" => vec![p("x", r(&[2, 3, 3, 2])), p("g", r(&[2])), p("b", r(&[2]))],
        "batchnorm_infer" => vec![p("x", r(&[1, 3, 3, 2])), p("g", r(&[2])), p("b", r(&[2]))],
        // bounded away from the kink at 0
        "relu" => vec![p(
            "x",
            r(&[12]).map(|v| {
                if v.abs() < 0.1 {
                    v + 0.2f32.copysign(v)
                } else {
                    v
                }
            }),
        )],
        "add_sub_mul" => vec![p("a", r(&[6])), p("b", r(&[6]))],
        "channel_max" => {
            // b differs from a by at least 0.1 in either direction
            let a = r(&[1, 2, 2, 3]);
            let gap = r(&[1, 2, 2, 3]);
            let b = Tensor::new(
                a.shape(),
                a.data()
                    .iter()
                    .zip(gap.data())
                    .map(|(&x, &d)| x + d.signum() * (0.1 + d.abs()))
                    .collect(),
            )
            .unwrap();
            vec![p("a", a), p("b", b)]
        }
        "concat_narrow" => vec![p("a", r(&[1, 2, 2, 2])), p("b", r(&[1, 2, 2, 3]))],
        "gap" => vec![p("x", r(&[2, 3, 2, 3]))],
        "dropout" => vec![p("x", r(&[10]))],
        "softmax" => vec![p("x", r(&[2, 5]))],
        "layer_norm" => vec![p("x", r(&[3, 4]))],
        "bmm" => vec![
            p("a", r(&[2, 3, 4])),
            p("b", r(&[2, 4, 2])),
            p("c", r(&[2, 5, 4])),
        ],
        "soft_cross_entropy" => vec![p("z", r(&[3, 4]).map(|v| 2.0 * v))],
        "l2_gather_sumlast" => vec![p("x", r(&[3, 4]))],
        "scale_shift_reshape_mean" => vec![p("x", r(&[2, 3]))],
        _ => unreachable!("unknown op {op}"),
    }
}

/// Scalar objective exercising `op`; panics on an unknown name.
pub fn op_objective<T: Real>(op: &str, seed: u64, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    match op {
        "affine" => {
            let y = t.affine(v[0], v[1], Some(v[2]))?;
            project(t, y, seed)
        }
        "conv2d" => {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)?;
            project(t, y, seed)
        }
        "conv2d_stride2" => {
            let y = t.conv2d(v[0], v[1], None, 2, Padding::Same)?;
            project(t, y, seed)
        }
        "separable_conv2d" => {
            let y = t.separable_conv2d(v[0], v[1], v[2], Some(v[3]), 2)?;
            project(t, y, seed)
        }
        "batchnorm_train" => {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, seed)
        }
        "batchnorm_infer" => {
            let stats = RunningStats {
                mean: vec![0.1, -0.2],
                var: vec![0.8, 1.7],
                initialized: true,
            };
            let y = t.batch_norm_infer(v[0], v[1], v[2], &stats, 1e-5)?;
            project(t, y, seed)
        }
        "relu" => {
            let y = t.relu(v[0]);
            project(t, y, seed)
        }
        "add_sub_mul" => {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(s, d)?;
            project(t, m, seed)
        }
        "channel_max" => {
            let m = t.maximum(v[0], v[1])?;
            project(t, m, seed)
        }
        "concat_narrow" => {
            let c = t.concat_last(&[v[0], v[1]])?;
            let n = t.narrow_last(c, 1, 3)?;
            project(t, n, seed)
        }
        "gap" => {
            let g = t.gap(v[0])?;
            project(t, g, seed)
        }
        "dropout" => {
            let mut rng = Rng::new(seed);
            let d = t.dropout(v[0], 0.3, &mut rng, Mode::Train)?;
            project(t, d, seed)
        }
        "softmax" => {
            let s = t.softmax(v[0]);
            project(t, s, seed)
        }
        "layer_norm" => {
            let s = t.layer_norm(v[0]);
            project(t, s, seed)
        }
        "bmm" => {
            let ab = t.bmm(v[0], v[1], false)?;
            let act = t.bmm(v[0], v[2], true)?;
            let s1 = project(t, ab, seed)?;
            let s2 = project(t, act, seed + 1)?;
            t.add(s1, s2)
        }
        "soft_cross_entropy" => {
            let targets: Tensor = Tensor::new(
                &[3, 4],
                vec![
                    0.9, 0.025, 0.025, 0.025, 0.025, 0.025, 0.9, 0.025, 1.0, 0.0, 0.0, 0.0,
                ],
            )
            .unwrap();
            let l = t.soft_cross_entropy(v[0], &targets.cast())?;
            Ok(t.mean(l))
        }
        "l2_gather_sumlast" => {
            let n = t.l2_normalize_rows(v[0])?;
            let g = t.gather_rows(n, &[2, 0, 2])?;
            let sq = t.mul(g, g)?;
            let s = t.sum_last(sq);
            let rows = t.gather_rows(v[0], &[1, 1])?;
            let s2 = project(t, rows, seed)?;
            let s1 = project(t, s, seed)?;
            let n2 = project(t, n, seed + 3)?;
            let a = t.add(s1, s2)?;
            t.add(a, n2)
        }
        "scale_shift_reshape_mean" => {
            let s = t.scale(v[0], -1.5);
            let a = t.add_scalar(s, 0.7);
            let rs = t.reshape(a, &[3, 2])?;
            let sq = t.mul(rs, rs)?;
            Ok(t.mean(sq))
        }
        _ => unreachable!("unknown op {op}"),
    }
}

/// Checks every objective in [`OPS`] in f64 with default options.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let opts = GradCheckOptions::default();
    OPS.iter()
        .map(|&op| {
            let inputs = op_inputs(op, seed);
            grad_check::<f64, _>(|t, v| op_objective(op, seed, t, v), &inputs, &opts)
                .map(|r| (op, r))
        })
        .collect()
}

/// Finite-difference check of the whole dual-stream network: a 2-writer
/// model on 21-pixel fragments, concat fusion with post-fusion attention
/// (decoders randomized so the block contributes), training-mode
/// batchnorm and dropout and a smoothed-label loss, in f64. At most
/// `coords` coordinates of every weight tensor are differenced.
pub fn model_check(
    channel_scale: usize,
    seed: u64,
    coords: usize,
    eps: f32,
) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        num_writers: 2,
        channel_scale,
        mode: StreamMode::Dual,
        fusion: Fusion::Concat,
        attention_placement: AttentionPlacement::PostFusion,
        attention: AttentionConfig {
            heads: 2,
            head_dim: 8,
        },
        fragment_side: 21,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, seed)?;
    let mut rng = Rng::derive(seed, 77);
    for id in model.attention_decoders() {
        let p = model.store.get_mut(id);
        p.tensor = uniform_tensor(&mut rng, &p.tensor.shape().to_vec(), 0.3);
    }
    let x = Tensor::new(
        &[2, 21, 21, 1],
        (0..2 * 21 * 21).map(|_| rng.uniform()).collect(),
    )?
    .cast::<f64>();
    let targets = Tensor::<f64>::new(&[2, 2], vec![0.9, 0.05, 0.05, 0.9])?;
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(id, _)| id)
        .collect();
    let inputs: Vec<Parameter> = ids.iter().map(|&id| model.store.get(id).clone()).collect();
    grad_check::<f64, _>(
        |tape, v| {
            for (&id, &var) in ids.iter().zip(v) {
                tape.bind_param(id, var);
            }
            let xv = tape.constant(x.clone());
            let mut ctx = Ctx::train(Rng::new(seed));
            let out = model.forward(tape, xv, &mut ctx)?;
            let losses = tape.soft_cross_entropy(out.logits, &targets)?;
            Ok(tape.mean(losses))
        },
        &inputs,
        &GradCheckOptions {
            eps,
            max_coords_per_input: Some(coords),
            seed,
        },
    )
}
