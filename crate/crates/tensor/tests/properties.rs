//! Convolution against a direct nested-loop reference, and its adjoint
//! identity, on random geometries.

use cpl_tensor::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use proptest::prelude::*;

fn reference(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.n * g.o * ho * wo];
    for n in 0..g.n {
        for o in 0..g.o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = b[o];
                    for c in 0..g.c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                let ix = (xx * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xi = ((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize;
                                let wi = ((o * g.c + c) * g.k + ky) * g.k + kx;
                                s += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * g.o + o) * ho + y) * wo + xx] = s;
                }
            }
        }
    }
    out
}

fn geometry() -> impl Strategy<Value = ConvGeom> {
    (1usize..3, 1usize..4, 3usize..9, 3usize..9, 1usize..4, prop_oneof![Just(1usize), Just(3)], 1usize..3, 0usize..2)
        .prop_map(|(n, c, h, w, o, k, stride, pad)| ConvGeom { n, c, h, w, o, k, stride, pad })
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn case() -> impl Strategy<Value = (ConvGeom, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    geometry().prop_flat_map(|g| {
        let out = g.n * g.o * g.out_h() * g.out_w();
        (
            Just(g),
            values(g.n * g.c * g.h * g.w),
            values(g.o * g.c * g.k * g.k),
            values(g.o),
            values(out),
        )
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #[test]
    fn forward_matches_direct_convolution((g, x, w, b, _) in case()) {
        let got = conv2d_forward(&x, &w, Some(&b), &g);
        let want = reference(&x, &w, &b, &g);
        prop_assert_eq!(got.len(), want.len());
        for (a, e) in got.iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    /// <dy, conv(x)> = <dx, x> + <dw, w> + <db, 1> since the map is bilinear.
    #[test]
    fn backward_is_the_adjoint((g, x, w, b, dy) in case()) {
        let y = conv2d_forward(&x, &w, Some(&b), &g);
        let (dx, dw, db) = conv2d_backward(&x, &w, &dy, &g, true);
        let lhs = dot(&dy, &y);
        let rhs_w = dot(&dw, &w) + dot(&db, &b);
        let rhs_x = dot(&dx.unwrap(), &x) + dot(&db, &b);
        prop_assert!((lhs - rhs_w).abs() < 1e-9 * (1.0 + lhs.abs()));
        prop_assert!((lhs - rhs_x).abs() < 1e-9 * (1.0 + lhs.abs()));
    }
}
