//! Diagonal Gaussian latents: closed-form KL and reparameterised sampling.

use cpl_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CplError, Result};

/// Log-variances are kept inside this interval.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 6.0;

/// One task-conditioned Gaussian component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GaussianParams<T> {
    pub mean: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn new(mean: Vec<T>, log_var: Vec<T>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(CplError::Shape(format!(
                "mean has {} dims, log_var {}",
                mean.len(),
                log_var.len()
            )));
        }
        if let Some(bad) = log_var.iter().find(|v| !v.is_finite()) {
            return Err(CplError::Numerical {
                term: format!("log_var ({bad})"),
            });
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            log_var: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Splits batched `[N, d]` heads into one component per item.
    pub fn from_batch(mean: &Tensor<T>, log_var: &Tensor<T>) -> Vec<Self> {
        let d = mean.item_len();
        mean.data()
            .chunks(d)
            .zip(log_var.data().chunks(d))
            .map(|(m, l)| Self {
                mean: m.to_vec(),
                log_var: l.to_vec(),
            })
            .collect()
    }
}

/// `KL(q || p)` summed over dimensions.
pub fn gaussian_kl<T: Scalar>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> Result<T> {
    if q.dim() != p.dim() {
        return Err(CplError::Shape(format!(
            "KL between {}-d and {}-d Gaussians",
            q.dim(),
            p.dim()
        )));
    }
    let half = T::lit(0.5);
    Ok((0..q.dim())
        .map(|i| {
            let diff = q.mean[i] - p.mean[i];
            half * (p.log_var[i] - q.log_var[i] + (q.log_var[i].exp() + diff * diff) / p.log_var[i].exp()
                - T::one())
        })
        .sum())
}

/// `mean + exp(log_var / 2) * eps` with `eps ~ N(0, I)` drawn from `rng`.
/// The log-variance is clamped to `[-20, 6]` first.
pub fn reparam_sample<T: Scalar>(params: &GaussianParams<T>, rng: &mut impl Rng) -> Vec<T> {
    params
        .mean
        .iter()
        .zip(&params.log_var)
        .map(|(&m, &lv)| {
            let eps: f64 = rng.sample(StandardNormal);
            let lv = lv.max(T::lit(LOG_VAR_MIN)).min(T::lit(LOG_VAR_MAX));
            m + (lv * T::lit(0.5)).exp() * T::lit(eps)
        })
        .collect()
}

/// `[N, d]` tensor of standard normal draws.
pub fn standard_normal<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(m: f64, lv: f64) -> GaussianParams<f64> {
        GaussianParams::new(vec![m], vec![lv]).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let std = GaussianParams::<f64>::standard(5);
        assert_eq!(gaussian_kl(&std, &std).unwrap(), 0.0);
        assert!((gaussian_kl(&g(1.0, 0.0), &g(0.0, 0.0)).unwrap() - 0.5).abs() < 1e-15);
        // variance e  =>  log_var 1
        let v = gaussian_kl(&g(0.0, 1.0), &g(0.0, 0.0)).unwrap();
        assert!((v - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-15);
        assert!((v - 0.35914).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = GaussianParams::<f32>::standard(2);
        let b = GaussianParams::<f32>::standard(3);
        assert!(matches!(gaussian_kl(&a, &b), Err(CplError::Shape(_))));
    }

    #[test]
    fn zero_variance_sample_is_the_mean() {
        let p = GaussianParams::new(vec![0.3f64, -1.2], vec![-1e9, -1e30]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = reparam_sample(&p, &mut rng);
        assert!((s[0] - 0.3).abs() < 1e-4 && (s[1] + 1.2).abs() < 1e-4);
    }

    #[test]
    fn seeded_samples_reproduce() {
        let p = GaussianParams::new(vec![0.0f32; 4], vec![0.5; 4]).unwrap();
        let a = reparam_sample(&p, &mut ChaCha8Rng::seed_from_u64(9));
        let b = reparam_sample(&p, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_mean_matches_within_three_sigma() {
        let p = GaussianParams::new(vec![1.5f64, -0.5], vec![0.8, -0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let s = reparam_sample(&p, &mut rng);
            sum[0] += s[0];
            sum[1] += s[1];
        }
        for i in 0..2 {
            let sigma = (p.log_var[i] / 2.0).exp();
            let tol = 3.0 * sigma / (n as f64).sqrt();
            assert!((sum[i] / n as f64 - p.mean[i]).abs() < tol);
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            mq in prop::collection::vec(-5.0f64..5.0, 4),
            lq in prop::collection::vec(-6.0f64..4.0, 4),
            mp in prop::collection::vec(-5.0f64..5.0, 4),
            lp in prop::collection::vec(-6.0f64..4.0, 4),
        ) {
            let q = GaussianParams::new(mq, lq).unwrap();
            let p = GaussianParams::new(mp, lp).unwrap();
            prop_assert!(gaussian_kl(&q, &p).unwrap() >= -1e-12);
        }
    }
}
