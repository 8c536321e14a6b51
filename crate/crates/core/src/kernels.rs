//! Slice-level numeric kernels behind the differentiable ops: GEMM,
//! im2col/col2im convolution, transposed convolution and batch
//! normalization. Layouts are NCHW, row-major.

use crate::error::{Error, Result};
use crate::par;

/// `c = op(a) · op(b) + beta·c` for row-major operands. With `a_t`, `a` is
/// stored as `k×m`; with `b_t`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths are checked by the debug assertion and
    // guaranteed by every caller in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2D cross-correlation from a `cin×h×w` input to a `ho×wo`
/// output grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        cin: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Parameter("stride must be at least 1".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint maps `h×w` to the transposed
    /// output `(h−1)·stride − 2·pad + k + out_pad`.
    pub fn transposed(
        cout: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Parameter("stride must be at least 1".into()));
        }
        if out_pad >= stride {
            return Err(Error::Parameter(format!(
                "output padding {out_pad} must be smaller than stride {stride}"
            )));
        }
        let full_h = (h - 1) * stride + kh + out_pad;
        let full_w = (w - 1) * stride + kw + out_pad;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::Dimension(format!(
                "transposed conv padding {pad} consumes the whole {full_h}x{full_w} output"
            )));
        }
        let g = ConvGeometry::new(
            cout,
            (full_h - 2 * pad, full_w - 2 * pad),
            (kh, kw),
            stride,
            pad,
        )?;
        debug_assert_eq!((g.ho, g.wo), (h, w));
        Ok(g)
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample into a `(cin·kh·kw) × (ho·wo)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let l = g.out_len();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * l;
                let dst = &mut col[row..row + l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix back onto `x`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let l = g.out_len();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * l;
                let src = &col[row..row + l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrix of sample `x`, borrowing the input directly for 1×1 kernels.
fn patches<'a>(x: &'a [f64], g: &ConvGeometry, buf: &'a mut Vec<f64>) -> &'a [f64] {
    if g.is_pointwise() {
        x
    } else {
        buf.resize(g.col_rows() * g.out_len(), 0.0);
        im2col(x, g, buf);
        buf
    }
}

/// Kernel for sample `i`: either a shared `cout×(cin·kh·kw)` kernel or one
/// slice of a per-sample kernel batch.
fn kernel_for(k: &[f64], per_sample: bool, i: usize, len: usize) -> &[f64] {
    if per_sample {
        &k[i * len..(i + 1) * len]
    } else {
        &k[..len]
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    k: &[f64],
    per_sample: bool,
    cout: usize,
    g: &ConvGeometry,
) -> Vec<f64> {
    let (l, ck) = (g.out_len(), g.col_rows());
    let mut out = vec![0.0; n * cout * l];
    par::for_each_chunk_mut(&mut out, cout * l, |i, y| {
        let mut buf = Vec::new();
        let col = patches(&x[i * g.in_len()..(i + 1) * g.in_len()], g, &mut buf);
        let kern = kernel_for(k, per_sample, i, cout * ck);
        gemm(cout, ck, l, kern, false, col, false, 0.0, y);
    });
    out
}

/// Returns `(dx, dk)`; each is computed only when requested. A shared
/// kernel's gradient is reduced over samples in index order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    k: &[f64],
    per_sample: bool,
    cout: usize,
    g: &ConvGeometry,
    dy: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (l, ck) = (g.out_len(), g.col_rows());
    let parts = par::map_indexed(n, |i| {
        let dy_i = &dy[i * cout * l..(i + 1) * cout * l];
        let kern = kernel_for(k, per_sample, i, cout * ck);
        let dk = need_dk.then(|| {
            let mut buf = Vec::new();
            let col = patches(&x[i * g.in_len()..(i + 1) * g.in_len()], g, &mut buf);
            let mut dk = vec![0.0; cout * ck];
            gemm(cout, l, ck, dy_i, false, col, true, 0.0, &mut dk);
            dk
        });
        let dx = need_dx.then(|| {
            let mut dcol = vec![0.0; ck * l];
            gemm(ck, cout, l, kern, true, dy_i, false, 0.0, &mut dcol);
            if g.is_pointwise() {
                dcol
            } else {
                let mut dx = vec![0.0; g.in_len()];
                col2im(&dcol, g, &mut dx);
                dx
            }
        });
        (dx, dk)
    });
    collect_grads(parts, per_sample, cout * ck, need_dx, need_dk)
}

fn collect_grads(
    parts: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)>,
    per_sample: bool,
    k_len: usize,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = need_dx.then(Vec::new);
    let mut dk = need_dk.then(|| {
        if per_sample {
            Vec::new()
        } else {
            vec![0.0; k_len]
        }
    });
    for (pdx, pdk) in parts {
        if let (Some(acc), Some(p)) = (dx.as_mut(), pdx) {
            acc.extend_from_slice(&p);
        }
        if let (Some(acc), Some(p)) = (dk.as_mut(), pdk) {
            if per_sample {
                acc.extend_from_slice(&p);
            } else {
                acc.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
            }
        }
    }
    (dx, dk)
}

/// Transposed convolution. `x` is `n×cin×h×w` with `g.ho×g.wo == h×w`;
/// `k` is `cin × (g.cin·kh·kw)`; output is `n × g.cin × g.h × g.w`.
pub(crate) fn conv_transpose2d_forward(
    x: &[f64],
    n: usize,
    cin: usize,
    k: &[f64],
    g: &ConvGeometry,
) -> Vec<f64> {
    let (l, ck) = (g.out_len(), g.col_rows());
    let mut out = vec![0.0; n * g.in_len()];
    par::for_each_chunk_mut(&mut out, g.in_len(), |i, y| {
        let x_i = &x[i * cin * l..(i + 1) * cin * l];
        let mut col = vec![0.0; ck * l];
        gemm(ck, cin, l, k, true, x_i, false, 0.0, &mut col);
        col2im(&col, g, y);
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    n: usize,
    cin: usize,
    k: &[f64],
    g: &ConvGeometry,
    dy: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (l, ck) = (g.out_len(), g.col_rows());
    let parts = par::map_indexed(n, |i| {
        let mut dcol = vec![0.0; ck * l];
        im2col(&dy[i * g.in_len()..(i + 1) * g.in_len()], g, &mut dcol);
        let dx = need_dx.then(|| {
            let mut dx = vec![0.0; cin * l];
            gemm(cin, ck, l, k, false, &dcol, false, 0.0, &mut dx);
            dx
        });
        let dk = need_dk.then(|| {
            let x_i = &x[i * cin * l..(i + 1) * cin * l];
            let mut dk = vec![0.0; cin * ck];
            gemm(cin, l, ck, x_i, false, &dcol, true, 0.0, &mut dk);
            dk
        });
        (dx, dk)
    });
    collect_grads(parts, false, cin * ck, need_dx, need_dk)
}

/// Per-channel sums over the batch and spatial axes of an `n×c×s` array.
pub(crate) fn channel_sums(x: &[f64], n: usize, c: usize, s: usize) -> Vec<f64> {
    let mut sums = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in sums.iter_mut().enumerate() {
            let off = (b * c + ch) * s;
            *acc += x[off..off + s].iter().sum::<f64>();
        }
    }
    sums
}

/// Batch statistics of an `n×c×s` array: per-channel mean and biased variance.
pub(crate) fn batch_moments(x: &[f64], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * s) as f64;
    let mean: Vec<f64> = channel_sums(x, n, c, s)
        .into_iter()
        .map(|v| v / count)
        .collect();
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            var[ch] += x[off..off + s]
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn geometry_output_sizes() {
        let g = ConvGeometry::new(8, (64, 64), (5, 5), 2, 2).unwrap();
        assert_eq!((g.ho, g.wo), (32, 32));
        let t = ConvGeometry::transposed(8, (32, 32), (5, 5), 2, 2, 1).unwrap();
        assert_eq!((t.h, t.w), (64, 64));
        assert!(matches!(
            ConvGeometry::transposed(8, (32, 32), (5, 5), 2, 2, 2),
            Err(Error::Parameter(_))
        ));
        assert!(ConvGeometry::new(1, (2, 2), (5, 5), 1, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(2, (5, 4), (3, 3), 2, 1).unwrap();
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.out_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
