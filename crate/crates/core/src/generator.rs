//! Initial-frame generator used to seed replayed sequences.
//!
//! A convolutional posterior `q(e | X_1, k)` and a decoder
//! `X_1 = dec(e, emb(k), a_1)` are trained with a learnable Gaussian prior
//! row per task. Generation samples `e` from the prior row and decodes.

use cpl_tensor::{Bound, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_label, CplError, Result};
use crate::gaussian::{standard_normal, GaussianParams, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::nn::{Conv, Embedding, Linear, LEAK};
use crate::world_model::task_mean_weights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub resolution: usize,
    pub num_tasks: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub enc_channels: usize,
    pub action_dim: usize,
    pub action_embed: usize,
    /// KL weight.
    pub beta: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            resolution: 64,
            num_tasks: 3,
            latent_dim: 16,
            embed_dim: 8,
            enc_channels: 16,
            action_dim: 0,
            action_embed: 8,
            beta: 1e-4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return Err(CplError::Config(
                "generator: resolution must be a multiple of 4 and at least 8".into(),
            ));
        }
        if self.num_tasks == 0 || self.latent_dim == 0 || self.enc_channels == 0 {
            return Err(CplError::Config("generator: sizes must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(CplError::Config("generator: beta must be non-negative".into()));
        }
        Ok(())
    }

    fn bottleneck(&self) -> usize {
        2 * self.enc_channels * (self.resolution / 4) * (self.resolution / 4)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GenLayers {
    enc1: Conv,
    enc2: Conv,
    enc_mean: Linear,
    enc_log_var: Linear,
    embedding: Embedding,
    action: Option<Linear>,
    dec_in: Linear,
    dec1: Conv,
    dec2: Conv,
    prior_mean: ParamId,
    prior_log_var: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FrameGenerator<T> {
    config: GeneratorConfig,
    params: ParamStore<T>,
    layers: GenLayers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorReport<T> {
    pub loss: T,
    pub recon: T,
    pub kl: T,
    /// Distinct task labels, one loss block each.
    pub blocks: Vec<usize>,
}

impl<T: Scalar> FrameGenerator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let e = config.enc_channels;
        let flat = config.bottleneck();
        let d = config.latent_dim;
        let enc1 = Conv::new(&mut s, "gen.enc1", config.channels, e, 3, 2, rng);
        let enc2 = Conv::new(&mut s, "gen.enc2", e, 2 * e, 3, 2, rng);
        let enc_mean = Linear::new(&mut s, "gen.enc_mean", flat + config.embed_dim, d, true, rng);
        let enc_log_var = Linear::new(&mut s, "gen.enc_log_var", flat + config.embed_dim, d, true, rng);
        let embedding = Embedding::new(&mut s, "gen.task", config.num_tasks, config.embed_dim, rng);
        let action = (config.action_dim > 0)
            .then(|| Linear::new(&mut s, "gen.action", config.action_dim, config.action_embed, true, rng));
        let act = if config.action_dim > 0 { config.action_embed } else { 0 };
        let dec_in = Linear::new(&mut s, "gen.dec_in", d + config.embed_dim + act, flat, true, rng);
        let dec1 = Conv::new(&mut s, "gen.dec1", 2 * e, e, 3, 1, rng);
        let dec2 = Conv::new(&mut s, "gen.dec2", e, config.channels, 3, 1, rng);
        let prior_mean = s.add_zeros("gen.prior.mean", &[config.num_tasks, d]);
        let prior_log_var = s.add_zeros("gen.prior.log_var", &[config.num_tasks, d]);
        Ok(Self {
            config,
            params: s,
            layers: GenLayers {
                enc1,
                enc2,
                enc_mean,
                enc_log_var,
                embedding,
                action,
                dec_in,
                dec1,
                dec2,
                prior_mean,
                prior_log_var,
            },
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Sets the KL weight of the objective.
    pub fn set_beta(&mut self, beta: f64) {
        self.config.beta = beta;
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.resolution, self.config.resolution]
    }

    /// Learned prior component of task `k` (1-based).
    pub fn prior_row(&self, k: usize) -> Result<GaussianParams<T>> {
        check_label(k, self.config.num_tasks)?;
        let d = self.config.latent_dim;
        let row = |id: ParamId| self.params.get(id).data()[(k - 1) * d..k * d].to_vec();
        let lv = row(self.layers.prior_log_var)
            .into_iter()
            .map(|v| v.max(T::lit(LOG_VAR_MIN)).min(T::lit(LOG_VAR_MAX)))
            .collect();
        GaussianParams::new(row(self.layers.prior_mean), lv)
    }

    fn check_inputs(&self, n: usize, labels: &[usize], actions: Option<&Tensor<T>>) -> Result<()> {
        labels.iter().try_for_each(|&k| check_label(k, self.config.num_tasks))?;
        if labels.len() != n {
            return Err(CplError::Shape(format!("{n} frames but {} labels", labels.len())));
        }
        match (self.config.action_dim, actions) {
            (0, Some(_)) => Err(CplError::Config("action-free generator was given actions".into())),
            (d, None) if d > 0 => Err(CplError::Config("action-conditioned generator needs a_1".into())),
            (d, Some(a)) if a.shape() != [n, d] => {
                Err(CplError::Shape(format!("first actions {:?}, expected [{n}, {d}]", a.shape())))
            }
            _ => Ok(()),
        }
    }

    fn decode(&self, g: &mut Graph<T>, p: &Bound, e: Var, emb: Var, action: Option<Var>) -> Var {
        let l = &self.layers;
        let mut parts = vec![e, emb];
        if let (Some(a), Some(lin)) = (action, &l.action) {
            let ae = lin.apply(g, p, a);
            parts.push(g.tanh(ae));
        }
        let x = g.concat(&parts);
        let h = l.dec_in.apply(g, p, x);
        let h = g.leaky_relu(h, T::lit(LEAK));
        let n = g.shape(h)[0];
        let s = self.config.resolution / 4;
        let h = g.reshape(h, &[n, 2 * self.config.enc_channels, s, s]);
        let h = g.upsample2(h);
        let h = l.dec1.apply(g, p, h);
        let h = g.leaky_relu(h, T::lit(LEAK));
        let h = g.upsample2(h);
        let h = l.dec2.apply(g, p, h);
        g.sigmoid(h)
    }

    fn sample(g: &mut Graph<T>, mean: Var, log_var: Var, eps: Var) -> Var {
        let half = g.scale(log_var, T::lit(0.5));
        let std = g.exp(half);
        let n = g.mul(std, eps);
        g.add(mean, n)
    }

    /// Samples one first frame per label, `[N, C, H, W]`. Reads nothing but
    /// the parameters, the labels, `a_1` and `rng`.
    pub fn generate_initial_frame(
        &self,
        first_action: Option<&Tensor<T>>,
        labels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        self.check_inputs(labels.len(), labels, first_action)?;
        let eps = standard_normal(&[labels.len(), self.config.latent_dim], rng);
        let mut g = Graph::inference();
        let p = g.bind(&self.params);
        let idx: Vec<usize> = labels.iter().map(|k| k - 1).collect();
        let mean = g.gather_rows(p.get(self.layers.prior_mean), &idx);
        let lv = g.gather_rows(p.get(self.layers.prior_log_var), &idx);
        let lv = g.clamp(lv, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        let eps = g.input(eps);
        let e = Self::sample(&mut g, mean, lv, eps);
        let emb = self.layers.embedding.lookup(&mut g, &p, labels);
        let a = first_action.map(|a| g.input(a.clone()));
        let out = self.decode(&mut g, &p, e, emb, a);
        Ok(g.value(out).clone())
    }

    /// Objective graph: for each task label present, the mean over its
    /// frames of `MSE + beta KL(q(e | X_1, k) || p(e | k))`, summed over labels.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        frames: Var,
        actions: Option<Var>,
        labels: &[usize],
        eps: &Tensor<T>,
    ) -> (Var, Var, Var) {
        let l = &self.layers;
        let emb = l.embedding.lookup(g, p, labels);
        let h = l.enc1.apply(g, p, frames);
        let h = g.leaky_relu(h, T::lit(LEAK));
        let h = l.enc2.apply(g, p, h);
        let h = g.leaky_relu(h, T::lit(LEAK));
        let n = labels.len();
        let h = g.reshape(h, &[n, self.config.bottleneck()]);
        let h = g.concat(&[h, emb]);
        let mq = l.enc_mean.apply(g, p, h);
        let lq = l.enc_log_var.apply(g, p, h);
        let lq = g.clamp(lq, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        let idx: Vec<usize> = labels.iter().map(|k| k - 1).collect();
        let mp = g.gather_rows(p.get(l.prior_mean), &idx);
        let lp = g.gather_rows(p.get(l.prior_log_var), &idx);
        let lp = g.clamp(lp, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        let eps = g.input(eps.clone());
        let e = Self::sample(g, mq, lq, eps);
        let recon_frames = self.decode(g, p, e, emb, actions);
        let recon = g.mse_items(recon_frames, frames);
        let kl = g.gaussian_kl(mq, lq, mp, lp);
        let wkl = g.scale(kl, T::lit(self.config.beta));
        let per = g.add(recon, wkl);
        let w = g.input(task_mean_weights(labels));
        let weighted = g.mul(per, w);
        (g.sum_all(weighted), recon, kl)
    }

    /// Evaluates the objective with explicit posterior noise `[N, d_e]`.
    pub fn loss_with_noise(
        &self,
        frames: &Tensor<T>,
        actions: Option<&Tensor<T>>,
        labels: &[usize],
        eps: &Tensor<T>,
        grad: bool,
    ) -> Result<(GeneratorReport<T>, Graph<T>, Var)> {
        let [c, h, w] = self.frame_shape();
        if frames.shape().len() != 4 || frames.shape()[1..] != [c, h, w] {
            return Err(CplError::Shape(format!(
                "first frames {:?} do not match generator frames [N, {c}, {h}, {w}]",
                frames.shape()
            )));
        }
        let n = frames.shape()[0];
        self.check_inputs(n, labels, actions)?;
        if eps.shape() != [n, self.config.latent_dim] {
            return Err(CplError::Shape("generator noise has the wrong shape".into()));
        }
        let mut g = if grad { Graph::new() } else { Graph::inference() };
        let p = g.bind(&self.params);
        let x = g.input(frames.clone());
        let a = actions.map(|a| g.input(a.clone()));
        let (loss, recon, kl) = self.loss_graph(&mut g, &p, x, a, labels, eps);
        let wts = task_mean_weights::<T>(labels);
        let agg = |v: Var| -> T { g.value(v).data().iter().zip(wts.data()).map(|(a, b)| *a * *b).sum() };
        let (recon, kl) = (agg(recon), agg(kl));
        if !recon.is_finite() {
            return Err(CplError::Numerical { term: "generator reconstruction".into() });
        }
        if !kl.is_finite() {
            return Err(CplError::Numerical { term: "generator kl".into() });
        }
        let mut blocks = labels.to_vec();
        blocks.sort_unstable();
        blocks.dedup();
        let report = GeneratorReport {
            loss: g.value(loss).data()[0],
            recon,
            kl,
            blocks,
        };
        Ok((report, g, loss))
    }

    /// Objective over first frames whose labels mark the current task and
    /// any replayed earlier tasks.
    pub fn generator_loss(
        &self,
        frames: &Tensor<T>,
        actions: Option<&Tensor<T>>,
        labels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<GeneratorReport<T>> {
        let eps = standard_normal(&[labels.len(), self.config.latent_dim], rng);
        Ok(self.loss_with_noise(frames, actions, labels, &eps, false)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            resolution: 8,
            num_tasks: 3,
            latent_dim: 4,
            embed_dim: 4,
            enc_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn generated_frames_have_frame_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = FrameGenerator::<f32>::new(tiny(), &mut rng).unwrap();
        let x = g.generate_initial_frame(None, &[1, 2, 3], &mut rng).unwrap();
        assert_eq!(x.shape(), &[3, 1, 8, 8]);
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let a = g.generate_initial_frame(None, &[2], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = g.generate_initial_frame(None, &[2], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            g.generate_initial_frame(None, &[4], &mut rng),
            Err(CplError::TaskLabel { .. })
        ));
    }

    #[test]
    fn action_conditioning_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = FrameGenerator::<f32>::new(GeneratorConfig { action_dim: 2, ..tiny() }, &mut rng).unwrap();
        assert!(g.generate_initial_frame(None, &[1], &mut rng).is_err());
        let a = Tensor::from_fn(&[1, 2], |i| i as f32);
        assert!(g.generate_initial_frame(Some(&a), &[1], &mut rng).is_ok());
    }

    #[test]
    fn one_block_per_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = FrameGenerator::<f64>::new(tiny(), &mut rng).unwrap();
        let x = Tensor::from_fn(&[4, 1, 8, 8], |i| (i % 5) as f64 / 5.0);
        let r1 = g.generator_loss(&x, None, &[1, 1, 1, 1], &mut rng).unwrap();
        assert_eq!(r1.blocks, vec![1]);
        let r3 = g.generator_loss(&x, None, &[3, 1, 2, 3], &mut rng).unwrap();
        assert_eq!(r3.blocks, vec![1, 2, 3]);
        assert!(g.generator_loss(&x, None, &[1, 2], &mut rng).is_err());
    }

    #[test]
    fn blocks_sum_to_the_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = FrameGenerator::<f64>::new(tiny(), &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i * 7) % 11) as f64 / 11.0);
        let eps = standard_normal(&[3, 4], &mut rng);
        let labels = [2, 1, 2];
        let (all, _, _) = g.loss_with_noise(&x, None, &labels, &eps, false).unwrap();
        let mut sum = 0.0;
        for k in [1, 2] {
            let idx: Vec<usize> = (0..3).filter(|&i| labels[i] == k).collect();
            let lab = vec![k; idx.len()];
            let (r, _, _) = g.loss_with_noise(&x.select(&idx), None, &lab, &eps.select(&idx), false).unwrap();
            sum += r.loss;
        }
        assert!((all.loss - sum).abs() <= 1e-12 * sum.abs());
    }

    #[test]
    fn perfect_reconstruction_with_matching_prior_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = FrameGenerator::<f64>::new(tiny(), &mut rng).unwrap();
        let ids: Vec<_> = g.params().ids().collect();
        for id in ids {
            g.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::full(&[2, 1, 8, 8], 0.5);
        let r = g.generator_loss(&x, None, &[1, 3], &mut rng).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn prior_rows_start_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = FrameGenerator::<f32>::new(tiny(), &mut rng).unwrap();
        assert_eq!(g.prior_row(2).unwrap(), GaussianParams::standard(4));
        assert!(g.prior_row(0).is_err());
    }
}
