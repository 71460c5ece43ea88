//! im2col convolution kernels over `[N, C, H, W]` batches.
//!
//! The whole batch is unrolled into one `[C*k*k, N*Ho*Wo]` column matrix so a
//! single GEMM covers every item.

use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Output columns `lo..hi` whose input index `o * stride + kk - pad` lies in
/// `0..len`.
fn valid_range(len: usize, out: usize, stride: usize, kk: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk).div_ceil(stride);
    // largest o with o * stride + kk < len + pad
    let hi = if len + pad > kk {
        ((len + pad - kk - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.c {
        for ki in 0..g.k {
            let (ylo, yhi) = valid_range(g.h, ho, g.stride, ki, g.pad);
            for kj in 0..g.k {
                let (xlo, xhi) = valid_range(g.w, wo, g.stride, kj, g.pad);
                if xlo >= xhi {
                    continue;
                }
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let ix0 = xlo * g.stride + kj - g.pad;
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.pad;
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        let base = (n * ho + oy) * wo;
                        let d = &mut dst[base + xlo..base + xhi];
                        if g.stride == 1 {
                            d.copy_from_slice(&srow[ix0..ix0 + d.len()]);
                        } else {
                            for (j, v) in d.iter_mut().enumerate() {
                                *v = srow[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            let (ylo, yhi) = valid_range(g.h, ho, g.stride, ki, g.pad);
            for kj in 0..g.k {
                let (xlo, xhi) = valid_range(g.w, wo, g.stride, kj, g.pad);
                if xlo >= xhi {
                    continue;
                }
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let ix0 = xlo * g.stride + kj - g.pad;
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.pad;
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let base = (n * ho + oy) * wo;
                        let s = &src[base + xlo..base + xhi];
                        if g.stride == 1 {
                            for (d, v) in drow[ix0..ix0 + s.len()].iter_mut().zip(s) {
                                *d += *v;
                            }
                        } else {
                            for (j, v) in s.iter().enumerate() {
                                drow[ix0 + j * g.stride] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[O, N*Ho*Wo]` <-> `[N, O, Ho*Wo]`.
fn to_batch_major<T: Scalar>(m: &[T], o: usize, n: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for oc in 0..o {
        for b in 0..n {
            out[(b * o + oc) * hw..(b * o + oc + 1) * hw]
                .copy_from_slice(&m[oc * n * hw + b * hw..oc * n * hw + (b + 1) * hw]);
        }
    }
    out
}

fn to_channel_major<T: Scalar>(m: &[T], o: usize, n: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for b in 0..n {
        for oc in 0..o {
            out[oc * n * hw + b * hw..oc * n * hw + (b + 1) * hw]
                .copy_from_slice(&m[(b * o + oc) * hw..(b * o + oc + 1) * hw]);
        }
    }
    out
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let cols = im2col(x, g);
    let (rows, ncols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); g.o * ncols];
    T::gemm(
        g.o,
        rows,
        ncols,
        T::one(),
        w,
        rows as isize,
        1,
        &cols,
        ncols as isize,
        1,
        T::zero(),
        &mut out,
        ncols as isize,
        1,
    );
    if let Some(b) = bias {
        for (oc, row) in out.chunks_mut(ncols).enumerate() {
            for v in row {
                *v += b[oc];
            }
        }
    }
    to_batch_major(&out, g.o, g.n, g.out_h() * g.out_w())
}

/// Returns `(dx, dw, dbias)`; `dx` only when `want_dx`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = g.out_h() * g.out_w();
    let (rows, ncols) = (g.rows(), g.cols());
    let d = to_channel_major(dout, g.o, g.n, hw);
    let cols = im2col(x, g);
    let mut dw = vec![T::zero(); g.o * rows];
    // dW = dOut * cols^T
    T::gemm(
        g.o,
        ncols,
        rows,
        T::one(),
        &d,
        ncols as isize,
        1,
        &cols,
        1,
        ncols as isize,
        T::zero(),
        &mut dw,
        rows as isize,
        1,
    );
    let db = d.chunks(ncols).map(|r| r.iter().copied().sum()).collect();
    let dx = want_dx.then(|| {
        let mut dcols = cols;
        // dcols = W^T * dOut
        T::gemm(
            rows,
            g.o,
            ncols,
            T::one(),
            w,
            1,
            rows as isize,
            &d,
            ncols as isize,
            1,
            T::zero(),
            &mut dcols,
            ncols as isize,
            1,
        );
        let mut dx = vec![T::zero(); x.len()];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.n * g.o * ho * wo];
        for n in 0..g.n {
            for o in 0..g.o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[o];
                        for c in 0..g.c {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        s += x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                            * w[((o * g.c + c) * g.k + ki) * g.k + kj];
                                    }
                                }
                            }
                        }
                        out[((n * g.o + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let g = ConvGeom { n: 2, c: 3, h: 6, w: 5, o: 4, k: 3, stride, pad };
            let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| ((i * 7 % 13) as f64) / 13.0 - 0.4).collect();
            let w: Vec<f64> = (0..g.o * g.c * 9).map(|i| ((i * 5 % 11) as f64) / 11.0 - 0.5).collect();
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&x, &w, Some(&b), &g);
            let slow = naive(&x, &w, &b, &g);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
