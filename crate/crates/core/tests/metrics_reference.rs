//! PSNR and SSIM against scikit-image on 100 random pairs, and the
//! Gaussian KL against its closed form on 1,000 random parameter pairs.

mod common;

use common::metric_reference::reference_pairs;
use cpl_core::gaussian::{gaussian_kl, GaussianParams};
use cpl_core::metrics::{psnr, psnr_slice, ssim, ssim_plane};
use cpl_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn psnr_matches_scikit_image() {
    let pairs = reference_pairs();
    assert_eq!(pairs.len(), 100);
    for (i, p) in pairs.iter().enumerate() {
        let got = psnr_slice(&p.a, &p.b, 1.0);
        assert!((got - p.psnr).abs() <= 1e-6, "pair {i}: {got} vs {}", p.psnr);
    }
}

#[test]
fn ssim_matches_scikit_image() {
    for (i, p) in reference_pairs().iter().enumerate() {
        let got = ssim_plane(&p.a, &p.b, p.h, p.w, 1.0).unwrap();
        assert!((got - p.ssim).abs() <= 1e-4, "pair {i}: {got} vs {}", p.ssim);
    }
}

#[test]
fn tensor_entry_points_agree_with_plane_functions() {
    let p = &reference_pairs()[0];
    let a = Tensor::new(&[1, 1, p.h, p.w], p.a.clone());
    let b = Tensor::new(&[1, 1, p.h, p.w], p.b.clone());
    assert!((psnr(&a, &b, 1.0).unwrap() - p.psnr).abs() <= 1e-6);
    assert!((ssim(&a, &b, 1.0).unwrap() - p.ssim).abs() <= 1e-4);
}

/// Independent closed form, written per dimension in terms of variances.
fn kl_oracle(m1: &[f64], lv1: &[f64], m2: &[f64], lv2: &[f64]) -> f64 {
    (0..m1.len())
        .map(|i| {
            let (v1, v2) = (lv1[i].exp(), lv2[i].exp());
            0.5 * ((v2 / v1).ln() + (v1 + (m1[i] - m2[i]).powi(2)) / v2 - 1.0)
        })
        .sum()
}

#[test]
fn gaussian_kl_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let d = rng.gen_range(1..=16);
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        let (m1, lv1, m2, lv2) = (draw(-3.0, 3.0), draw(-4.0, 2.0), draw(-3.0, 3.0), draw(-4.0, 2.0));
        let q = GaussianParams::new(m1.clone(), lv1.clone()).unwrap();
        let p = GaussianParams::new(m2.clone(), lv2.clone()).unwrap();
        let got = gaussian_kl(&q, &p).unwrap();
        let want = kl_oracle(&m1, &lv1, &m2, &lv2);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}
