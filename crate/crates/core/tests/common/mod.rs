//! Test-only oracles, written independently of the library kernels.
#![allow(dead_code)]

use wrid::{Rng, Tensor};

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.range(-scale, scale)).collect()).unwrap()
}

/// Straight nested-loop cross-correlation, NHWC input, `[kh,kw,cin,cout]`
/// weight. `same` uses TF-style zero padding (extra row/col bottom/right).
pub fn naive_conv2d(x: &Tensor, w: &Tensor, bias: &[f32], stride: usize, same: bool) -> Tensor {
    let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (ho, wo, pt, pl) = if same {
        let ho = (h + stride - 1) / stride;
        let wo = (wd + stride - 1) / stride;
        let ph = ((ho - 1) * stride + kh).saturating_sub(h);
        let pw = ((wo - 1) * stride + kw).saturating_sub(wd);
        (ho, wo, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0)
    };
    let mut out = vec![0f32; n * ho * wo * cout];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = bias.get(co).copied().unwrap_or(0.0) as f64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as i64 - pt as i64;
                            let ix = (ox * stride + kx) as i64 - pl as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv =
                                    x.data()[((b * h + iy as usize) * wd + ix as usize) * cin + ci];
                                let wv = w.data()[((ky * kw + kx) * cin + ci) * cout + co];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * ho + oy) * wo + ox) * cout + co] = acc as f32;
                }
            }
        }
    }
    Tensor::new(&[n, ho, wo, cout], out).unwrap()
}

/// Central-difference derivative of a scalar function, in f64.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub use wrid::gradcheck::MODEL_FD_STEP;

pub fn micro_model_grad_check(seed: u64, coords_per_tensor: usize) -> wrid::GradCheckReport {
    micro_model_grad_check_eps(seed, coords_per_tensor, MODEL_FD_STEP)
}

pub fn micro_model_grad_check_eps(
    seed: u64,
    coords_per_tensor: usize,
    eps: f32,
) -> wrid::GradCheckReport {
    wrid::gradcheck::model_check(8, seed, coords_per_tensor, eps).unwrap()
}
