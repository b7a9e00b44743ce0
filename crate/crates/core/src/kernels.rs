//! Raw numeric kernels behind the tape operations.
//!
//! Everything here works on flat slices in NHWC order and is free of
//! autodiff bookkeeping. Reductions run in a fixed order so results are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically `m×k`
/// and `b` logically `k×n`. `trans_a`/`trans_b` say the operand is stored
/// transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    let sa = if trans_a { (1, m) } else { (k, 1) };
    let sb = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_strided(m, k, n, a, sa, b, sb, beta, c);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding so that the output extent is `ceil(input / stride)`.
    Same,
    /// No padding; output extent is `floor((input - kernel) / stride) + 1`.
    Valid,
}

/// Resolved geometry of a 2-D convolution or depthwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        input: [usize; 4],
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [n, h, w, cin] = input;
        if stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "{op}: stride must be positive"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(
                op,
                format!("kernel {kh}x{kw} must have odd extents"),
            ));
        }
        let (ho, pad_top) = out_extent(op, "height", h, kh, stride, padding)?;
        let (wo, pad_left) = out_extent(op, "width", w, kw, stride, padding)?;
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_pixels(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// A 1x1, stride-1 convolution is a plain matrix product over pixels.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

fn out_extent(
    op: &'static str,
    axis: &'static str,
    size: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(size);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if size < kernel {
                return Err(Error::Dim {
                    op,
                    axis,
                    expected: kernel,
                    actual: size,
                });
            }
            Ok(((size - kernel) / stride + 1, 0))
        }
    }
}

/// Unfolds input patches into rows of a `[n·ho·wo, kh·kw·cin]` matrix,
/// zero-filling positions that fall into the padding.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plen = g.patch_len();
    debug_assert_eq!(cols.len(), g.out_pixels() * plen);
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        let off = (ky * g.kw + kx) * g.cin;
                        let seg = &mut dst[off..off + g.cin];
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            seg.fill(T::zero());
                        } else {
                            let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                            seg.copy_from_slice(&x[src..src + g.cin]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into `dx`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plen = g.patch_len();
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src_row = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let off = (ky * g.kw + kx) * g.cin;
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        for (d, s) in dx[dst..dst + g.cin]
                            .iter_mut()
                            .zip(&src_row[off..off + g.cin])
                        {
                            *d = *d + *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Depthwise convolution: one `kh×kw` filter per channel, weight `[kh, kw, c]`.
pub fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom, out: &mut [T]) {
    let c = g.cin;
    out.fill(T::zero());
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((n * g.ho + oy) * g.wo + ox) * c;
                let dst = &mut out[o..o + c];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let i = ((n * g.h + iy as usize) * g.w + ix as usize) * c;
                        let k = (ky * g.kw + kx) * c;
                        for ((d, xv), wv) in dst.iter_mut().zip(&x[i..i + c]).zip(&w[k..k + c]) {
                            *d = *d + *xv * *wv;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`]; either output may be skipped.
pub fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let c = g.cin;
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((n * g.ho + oy) * g.wo + ox) * c;
                let go = &dy[o..o + c];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let i = ((n * g.h + iy as usize) * g.w + ix as usize) * c;
                        let k = (ky * g.kw + kx) * c;
                        if let Some(dx) = dx.as_deref_mut() {
                            for ((d, gv), wv) in dx[i..i + c].iter_mut().zip(go).zip(&w[k..k + c]) {
                                *d = *d + *gv * *wv;
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            for ((d, gv), xv) in dw[k..k + c].iter_mut().zip(go).zip(&x[i..i + c]) {
                                *d = *d + *gv * *xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        let g = ConvGeom::new("t", [1, 105, 105, 1], 5, 5, 2, Padding::Same).unwrap();
        assert_eq!((g.ho, g.wo, g.pad_top), (53, 53, 2));
        let g = ConvGeom::new("t", [1, 14, 14, 1], 3, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.ho, g.pad_top), (7, 0));
        let g = ConvGeom::new("t", [1, 14, 14, 1], 1, 1, 2, Padding::Same).unwrap();
        assert_eq!(g.ho, 7);
    }

    #[test]
    fn valid_padding_extents() {
        let g = ConvGeom::new("t", [1, 9, 7, 1], 3, 3, 2, Padding::Valid).unwrap();
        assert_eq!((g.ho, g.wo), (4, 3));
        assert!(ConvGeom::new("t", [1, 2, 7, 1], 3, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
