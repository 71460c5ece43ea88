//! Mixture world model.
//!
//! Three networks share a convolutional frame encoder:
//!
//! * the posterior (representation) network `q(z_t | X_1:t, k)`,
//! * the prior (encoding) network `p(z_t | X_1:t-1, k)`,
//! * the dynamics stack of ST-LSTM layers that turns the previous frame, the
//!   optional previous action, `z_t` and the task embedding into `X_t`.
//!
//! The task label enters only through one row of a learned embedding table,
//! so every task owns one Gaussian component of the latent mixture.
//! Training minimises `sum_t [MSE(X^_t, X_t) + alpha * KL(q_t || p_t)]`;
//! testing samples latents from the prior only.

use cpl_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{check_label, CplError, Result};
use crate::gaussian::{standard_normal, GaussianParams, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::nn::{Conv, Embedding, Linear, LstmCell, LstmState, StLstmCell, LEAK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldModelConfig {
    pub channels: usize,
    /// Frame side in pixels; must be a multiple of 4.
    pub resolution: usize,
    pub num_tasks: usize,
    pub hidden: usize,
    pub layers: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub action_dim: usize,
    pub action_embed: usize,
    pub enc_channels: usize,
    pub summary_dim: usize,
    pub kernel: usize,
    /// KL weight.
    pub alpha: f64,
    /// Give the posterior and prior their own frame encoders.
    pub separate_latent_encoders: bool,
    /// Feed ground truth over the whole horizon during training.
    pub full_teacher_forcing: bool,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            resolution: 64,
            num_tasks: 3,
            hidden: 32,
            layers: 2,
            latent_dim: 16,
            embed_dim: 8,
            action_dim: 0,
            action_embed: 8,
            enc_channels: 16,
            summary_dim: 64,
            kernel: 3,
            alpha: 1e-4,
            separate_latent_encoders: false,
            full_teacher_forcing: false,
        }
    }
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CplError::Config(format!("world model: {m}")));
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return bad("resolution must be a multiple of 4 and at least 8");
        }
        if self.num_tasks == 0 || self.layers == 0 || self.hidden == 0 || self.latent_dim == 0 {
            return bad("num_tasks, layers, hidden and latent_dim must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        Ok(())
    }

    fn feat_side(&self) -> usize {
        self.resolution / 4
    }

    fn summary_side(&self) -> usize {
        self.feat_side().div_ceil(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Latents from the posterior; needs ground truth through `T+H`.
    TrainPosterior,
    /// Latents from the prior; reads only the context frames.
    TestPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FrameEncoder {
    c1: Conv,
    c2: Conv,
}

impl FrameEncoder {
    fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, cfg: &WorldModelConfig, rng: &mut impl Rng) -> Self {
        let e = cfg.enc_channels;
        Self {
            c1: Conv::new(s, &format!("{name}.c1"), cfg.channels, e, 3, 2, rng),
            c2: Conv::new(s, &format!("{name}.c2"), e, e, 3, 2, rng),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let h = self.c1.apply(g, p, x);
        let h = g.leaky_relu(h, T::lit(LEAK));
        let h = self.c2.apply(g, p, h);
        g.leaky_relu(h, T::lit(LEAK))
    }
}

/// Recurrent Gaussian head shared in shape by the posterior and the prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LatentNet {
    encoder: Option<FrameEncoder>,
    down: Conv,
    proj: Linear,
    lstm: LstmCell,
    mean: Linear,
    log_var: Linear,
}

impl LatentNet {
    fn new<T: Scalar>(s: &mut ParamStore<T>, name: &str, cfg: &WorldModelConfig, rng: &mut impl Rng) -> Self {
        let e = cfg.enc_channels;
        let flat = e * cfg.summary_side() * cfg.summary_side();
        let sd = cfg.summary_dim;
        Self {
            encoder: cfg
                .separate_latent_encoders
                .then(|| FrameEncoder::new(s, &format!("{name}.enc"), cfg, rng)),
            down: Conv::new(s, &format!("{name}.down"), e, e, 3, 2, rng),
            proj: Linear::new(s, &format!("{name}.proj"), flat + cfg.embed_dim, sd, true, rng),
            lstm: LstmCell::new(s, &format!("{name}.lstm"), sd, sd, rng),
            mean: Linear::new(s, &format!("{name}.mean"), sd + cfg.embed_dim, cfg.latent_dim, true, rng),
            log_var: Linear::new(s, &format!("{name}.log_var"), sd + cfg.embed_dim, cfg.latent_dim, true, rng),
        }
    }

    /// Consumes one frame (`raw`) or its shared features (`shared`).
    fn step<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, raw: Var, shared: Var, emb: Var, st: LstmState) -> LstmState {
        let f = match &self.encoder {
            Some(enc) => enc.apply(g, p, raw),
            None => shared,
        };
        let d = self.down.apply(g, p, f);
        let d = g.leaky_relu(d, T::lit(LEAK));
        let n = g.shape(d)[0];
        let flat: usize = g.shape(d)[1..].iter().product();
        let d = g.reshape(d, &[n, flat]);
        let x = g.concat(&[d, emb]);
        let x = self.proj.apply(g, p, x);
        let x = g.tanh(x);
        self.lstm.step(g, p, x, st)
    }

    fn heads<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, h: Var, emb: Var) -> (Var, Var) {
        let x = g.concat(&[h, emb]);
        let mean = self.mean.apply(g, p, x);
        let lv = self.log_var.apply(g, p, x);
        let lv = g.clamp(lv, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        (mean, lv)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layers {
    encoder: FrameEncoder,
    posterior: LatentNet,
    prior: LatentNet,
    embedding: Embedding,
    action: Option<Linear>,
    cells: Vec<StLstmCell>,
    dec1: Conv,
    dec2: Conv,
}

/// Parameters and architecture of the mixture world model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct WorldModel<T> {
    config: WorldModelConfig,
    params: ParamStore<T>,
    layers: Layers,
}

/// Hidden/cell state per ST-LSTM layer plus the spatiotemporal memory.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub hidden: Vec<Tensor<T>>,
    pub cell: Vec<Tensor<T>>,
    pub memory: Tensor<T>,
}

/// Summary state of the posterior or prior network.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryState<T> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

/// Standard-normal draws used to sample `z_t`, one `[N, d_z]` tensor per
/// predicted step. Fixing the noise fixes the whole rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise<T> {
    pub steps: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentNoise<T> {
    pub fn sample(batch: usize, steps: usize, latent_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            steps: (0..steps)
                .map(|_| standard_normal(&[batch, latent_dim], rng))
                .collect(),
        }
    }

    pub fn zeros(batch: usize, steps: usize, latent_dim: usize) -> Self {
        Self {
            steps: vec![Tensor::zeros(&[batch, latent_dim]); steps],
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            steps: self.steps.iter().map(|t| t.select(idx)).collect(),
        }
    }
}

/// Graph nodes of one unrolled sequence.
pub struct RolloutVars {
    /// Predictions for steps `2..=T+H`.
    pub preds: Vec<Var>,
    /// Per-item KL at every step (training mode only).
    pub kls: Vec<Var>,
}

/// Graph nodes of the objective for one batch.
pub struct ElboVars {
    /// Weighted objective, a scalar.
    pub loss: Var,
    /// Per-sequence `sum_t MSE_t`, `[N]`.
    pub recon: Var,
    /// Per-sequence `sum_t KL_t`, `[N]`.
    pub kl: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboReport<T> {
    pub loss: T,
    pub recon: T,
    pub kl: T,
    /// `sum_t [MSE_t + alpha KL_t]` of every sequence.
    pub per_sequence: Vec<T>,
}

struct DynState {
    h: Vec<Var>,
    c: Vec<Var>,
    m: Var,
}

/// Weights that turn per-sequence losses into a sum of per-task means.
pub fn task_mean_weights<T: Scalar>(labels: &[usize]) -> Tensor<T> {
    let w = labels
        .iter()
        .map(|l| T::one() / T::from_usize(labels.iter().filter(|m| *m == l).count()).unwrap())
        .collect();
    Tensor::new(&[labels.len()], w)
}

impl<T: Scalar> WorldModel<T> {
    pub fn new(config: WorldModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let encoder = FrameEncoder::new(&mut s, "enc", &config, rng);
        let posterior = LatentNet::new(&mut s, "posterior", &config, rng);
        let prior = LatentNet::new(&mut s, "prior", &config, rng);
        let embedding = Embedding::new(&mut s, "task", config.num_tasks, config.embed_dim, rng);
        let action = (config.action_dim > 0)
            .then(|| Linear::new(&mut s, "action", config.action_dim, config.action_embed, true, rng));
        let act = if config.action_dim > 0 { config.action_embed } else { 0 };
        let cin = config.enc_channels + config.latent_dim + config.embed_dim + act;
        let cells = (0..config.layers)
            .map(|l| {
                let cin = if l == 0 { cin } else { config.hidden };
                StLstmCell::new(&mut s, &format!("stlstm{l}"), cin, config.hidden, config.kernel, rng)
            })
            .collect();
        let dec1 = Conv::new(&mut s, "dec1", config.hidden, config.enc_channels, 3, 1, rng);
        let dec2 = Conv::new(&mut s, "dec2", config.enc_channels, config.channels, 3, 1, rng);
        Ok(Self {
            config,
            params: s,
            layers: Layers {
                encoder,
                posterior,
                prior,
                embedding,
                action,
                cells,
                dec1,
                dec2,
            },
        })
    }

    pub fn config(&self) -> &WorldModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_tasks(&self) -> usize {
        self.config.num_tasks
    }

    /// Sets the KL weight of the objective.
    pub fn set_alpha(&mut self, alpha: f64) {
        self.config.alpha = alpha;
    }

    /// Names of the posterior network's parameters; the test-time path never
    /// reads them.
    pub fn posterior_param_names(&self) -> Vec<String> {
        self.params
            .ids()
            .map(|id| self.params.name(id).to_string())
            .filter(|n| n.starts_with("posterior."))
            .collect()
    }

    pub fn embedding_table_name(&self) -> &str {
        self.params.name(self.layers.embedding.table())
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.resolution, self.config.resolution]
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        labels.iter().try_for_each(|&k| check_label(k, self.config.num_tasks))
    }

    fn check_frame(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.frame_shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(CplError::Shape(format!(
                "frame batch {shape:?} does not match model frames [N, {c}, {h}, {w}]"
            )));
        }
        Ok(())
    }

    fn check_actions(&self, present: bool) -> Result<()> {
        match (self.config.action_dim > 0, present) {
            (true, false) => Err(CplError::Config("action-conditioned model needs actions".into())),
            (false, true) => Err(CplError::Config("action-free model was given actions".into())),
            _ => Ok(()),
        }
    }

    fn zero_dyn<G: Scalar>(&self, g: &mut Graph<G>, n: usize) -> DynState {
        let s = self.config.feat_side();
        let z = |g: &mut Graph<G>| g.input(Tensor::zeros(&[n, self.config.hidden, s, s]));
        DynState {
            h: (0..self.config.layers).map(|_| z(g)).collect(),
            c: (0..self.config.layers).map(|_| z(g)).collect(),
            m: z(g),
        }
    }

    fn dyn_step(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        feat: Var,
        action: Option<Var>,
        z: Var,
        emb: Var,
        st: DynState,
    ) -> (Var, DynState) {
        let s = self.config.feat_side();
        let zb = g.broadcast_spatial(z, s, s);
        let eb = g.broadcast_spatial(emb, s, s);
        let mut parts = vec![feat, zb, eb];
        if let (Some(a), Some(lin)) = (action, &self.layers.action) {
            let ae = lin.apply(g, p, a);
            let ae = g.tanh(ae);
            parts.push(g.broadcast_spatial(ae, s, s));
        }
        let mut x = g.concat(&parts);
        let mut m = st.m;
        let mut next = DynState {
            h: Vec::with_capacity(self.config.layers),
            c: Vec::with_capacity(self.config.layers),
            m,
        };
        for (l, cell) in self.layers.cells.iter().enumerate() {
            let out = cell.step(g, p, x, st.h[l], st.c[l], m);
            m = out.m;
            x = out.h;
            next.h.push(out.h);
            next.c.push(out.c);
        }
        next.m = m;
        let d = g.upsample2(x);
        let d = self.layers.dec1.apply(g, p, d);
        let d = g.leaky_relu(d, T::lit(LEAK));
        let d = g.upsample2(d);
        let d = self.layers.dec2.apply(g, p, d);
        (g.sigmoid(d), next)
    }

    /// Unrolls the model over `frames` (graph nodes `[N, C, H, W]`, one per
    /// time step). Steps `t <= context_len` consume ground truth, later steps
    /// their own previous prediction. In `TestPrior` mode only
    /// `frames[..context_len]` are read.
    #[allow(clippy::too_many_arguments)]
    pub fn unroll(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        frames: &[Var],
        actions: Option<&[Var]>,
        labels: &[usize],
        context_len: usize,
        total_len: usize,
        mode: RolloutMode,
        noise: &LatentNoise<T>,
    ) -> Result<RolloutVars> {
        self.check_labels(labels)?;
        self.check_actions(actions.is_some())?;
        if context_len < 1 || total_len <= context_len {
            return Err(CplError::Config(format!(
                "rollout needs 1 <= context ({context_len}) < total length ({total_len})"
            )));
        }
        let need = match mode {
            RolloutMode::TrainPosterior => total_len,
            RolloutMode::TestPrior => context_len,
        };
        if frames.len() < need {
            return Err(CplError::Shape(format!("{} frames given, {need} needed", frames.len())));
        }
        if let Some(a) = actions {
            if a.len() < total_len - 1 {
                return Err(CplError::Shape(format!("{} actions given, {} needed", a.len(), total_len - 1)));
            }
        }
        if noise.steps.len() < total_len - 1 {
            return Err(CplError::Shape("latent noise shorter than the rollout".into()));
        }
        let n = labels.len();
        for f in &frames[..need] {
            self.check_frame(g.shape(*f))?;
            if g.shape(*f)[0] != n {
                return Err(CplError::Shape("frame batch and labels disagree".into()));
            }
        }
        let l = &self.layers;
        let emb = l.embedding.lookup(g, p, labels);
        let mut dyn_st = self.zero_dyn(g, n);
        let mut prior_st = l.prior.lstm.zero_state(g, n);
        let mut post_st = l.posterior.lstm.zero_state(g, n);
        let train = mode == RolloutMode::TrainPosterior;
        let teacher_all = train && self.config.full_teacher_forcing;

        let mut feats: Vec<Option<Var>> = vec![None; total_len];
        let mut feat_of = |g: &mut Graph<T>, i: usize, x: Var, ground_truth: bool| -> Var {
            if ground_truth {
                *feats[i].get_or_insert_with(|| l.encoder.apply(g, p, x))
            } else {
                l.encoder.apply(g, p, x)
            }
        };

        if train {
            let f0 = feat_of(g, 0, frames[0], true);
            post_st = l.posterior.step(g, p, frames[0], f0, emb, post_st);
        }
        let mut preds: Vec<Var> = Vec::with_capacity(total_len - 1);
        let mut kls = Vec::new();
        for t in 1..total_len {
            // predicting frame index t (0-based) from index t-1
            let gt_input = t <= context_len || teacher_all;
            let x_in = if gt_input { frames[t - 1] } else { *preds.last().unwrap() };
            let f_in = feat_of(g, t - 1, x_in, gt_input);
            prior_st = l.prior.step(g, p, x_in, f_in, emb, prior_st);
            let (mp, lp) = l.prior.heads(g, p, prior_st.h, emb);
            let eps = g.input(noise.steps[t - 1].clone());
            let z = if train {
                let f_t = feat_of(g, t, frames[t], true);
                post_st = l.posterior.step(g, p, frames[t], f_t, emb, post_st);
                let (mq, lq) = l.posterior.heads(g, p, post_st.h, emb);
                kls.push(g.gaussian_kl(mq, lq, mp, lp));
                sample_latent(g, mq, lq, eps)
            } else {
                sample_latent(g, mp, lp, eps)
            };
            let a = actions.map(|a| a[t - 1]);
            let (pred, st) = self.dyn_step(g, p, f_in, a, z, emb, dyn_st);
            dyn_st = st;
            preds.push(pred);
        }
        Ok(RolloutVars { preds, kls })
    }

    /// Objective graph for a batch whose items may carry different labels.
    /// The loss is the sum over tasks present of the per-task mean of
    /// `sum_t [MSE_t + alpha KL_t]`; for a single-task batch this is the
    /// plain batch mean.
    pub fn elbo_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        frames: &[Var],
        actions: Option<&[Var]>,
        labels: &[usize],
        context_len: usize,
        noise: &LatentNoise<T>,
    ) -> Result<ElboVars> {
        let total = frames.len();
        let r = self.unroll(
            g,
            p,
            frames,
            actions,
            labels,
            context_len,
            total,
            RolloutMode::TrainPosterior,
            noise,
        )?;
        let mut recon: Option<Var> = None;
        let mut kl: Option<Var> = None;
        for (i, (pred, k)) in r.preds.iter().zip(&r.kls).enumerate() {
            let mse = g.mse_items(*pred, frames[i + 1]);
            recon = Some(match recon {
                Some(acc) => g.add(acc, mse),
                None => mse,
            });
            kl = Some(match kl {
                Some(acc) => g.add(acc, *k),
                None => *k,
            });
        }
        let (recon, kl) = (recon.unwrap(), kl.unwrap());
        let weighted_kl = g.scale(kl, T::lit(self.config.alpha));
        let per_seq = g.add(recon, weighted_kl);
        let w = g.input(task_mean_weights(labels));
        let wl = g.mul(per_seq, w);
        let loss = g.sum_all(wl);
        Ok(ElboVars { loss, recon, kl })
    }

    fn batch_vars(&self, g: &mut Graph<T>, batch: &Batch<T>) -> (Vec<Var>, Option<Vec<Var>>) {
        let frames = batch.frames.iter().map(|f| g.input(f.clone())).collect();
        let actions = batch
            .actions
            .as_ref()
            .map(|a| a.iter().map(|t| g.input(t.clone())).collect());
        (frames, actions)
    }

    /// Evaluates the objective with explicit latent noise and returns the
    /// report together with the graph and loss node for differentiation.
    pub fn elbo_with_noise(
        &self,
        batch: &Batch<T>,
        context_len: usize,
        noise: &LatentNoise<T>,
        grad: bool,
    ) -> Result<(ElboReport<T>, Graph<T>, Var)> {
        let mut g = if grad { Graph::new() } else { Graph::inference() };
        let p = g.bind(&self.params);
        let (frames, actions) = self.batch_vars(&mut g, batch);
        let e = self.elbo_graph(&mut g, &p, &frames, actions.as_deref(), &batch.labels, context_len, noise)?;
        let w = task_mean_weights::<T>(&batch.labels);
        let agg = |v: &Tensor<T>| v.data().iter().zip(w.data()).map(|(a, b)| *a * *b).sum::<T>();
        let recon_v = g.value(e.recon).clone();
        let kl_v = g.value(e.kl).clone();
        let recon = agg(&recon_v);
        let kl = agg(&kl_v);
        if !recon.is_finite() {
            return Err(CplError::Numerical { term: "reconstruction".into() });
        }
        if !kl.is_finite() {
            return Err(CplError::Numerical { term: "kl".into() });
        }
        let alpha = T::lit(self.config.alpha);
        let per_sequence = recon_v.data().iter().zip(kl_v.data()).map(|(r, k)| *r + alpha * *k).collect();
        let report = ElboReport {
            loss: g.value(e.loss).data()[0],
            recon,
            kl,
            per_sequence,
        };
        Ok((report, g, e.loss))
    }

    /// Objective on a full batch `X_1:T+H`, latent noise drawn from `rng`.
    pub fn elbo_loss(&self, batch: &Batch<T>, context_len: usize, rng: &mut impl Rng) -> Result<ElboReport<T>> {
        let noise = LatentNoise::sample(batch.len(), batch.seq_len() - 1, self.config.latent_dim, rng);
        Ok(self.elbo_with_noise(batch, context_len, &noise, false)?.0)
    }

    /// Predictions `X^_2..X^_{T+H}` for `context_len + horizon` steps.
    pub fn rollout(
        &self,
        batch: &Batch<T>,
        context_len: usize,
        horizon: usize,
        mode: RolloutMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<Tensor<T>>> {
        if horizon < 1 {
            return Err(CplError::Config("horizon must be >= 1".into()));
        }
        let total = context_len + horizon;
        let noise = LatentNoise::sample(batch.len(), total - 1, self.config.latent_dim, rng);
        self.rollout_with_noise(batch, context_len, horizon, mode, &noise)
    }

    pub fn rollout_with_noise(
        &self,
        batch: &Batch<T>,
        context_len: usize,
        horizon: usize,
        mode: RolloutMode,
        noise: &LatentNoise<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let p = g.bind(&self.params);
        let total = context_len + horizon;
        let visible = match mode {
            RolloutMode::TrainPosterior => total,
            RolloutMode::TestPrior => context_len,
        };
        if batch.frames.len() < visible {
            return Err(CplError::Shape(format!("{} frames given, {visible} needed", batch.frames.len())));
        }
        let frames: Vec<Var> = batch.frames[..visible].iter().map(|f| g.input(f.clone())).collect();
        let actions: Option<Vec<Var>> = match &batch.actions {
            Some(a) => {
                if a.len() < total - 1 {
                    return Err(CplError::Shape(format!("{} actions given, {} needed", a.len(), total - 1)));
                }
                Some(a[..total - 1].iter().map(|t| g.input(t.clone())).collect())
            }
            None => None,
        };
        let r = self.unroll(&mut g, &p, &frames, actions.as_deref(), &batch.labels, context_len, total, mode, noise)?;
        Ok(r.preds.iter().map(|v| g.value(*v).clone()).collect())
    }

    fn summary_inputs(&self, g: &mut Graph<T>, st: &SummaryState<T>) -> LstmState {
        LstmState {
            h: g.input(st.hidden.clone()),
            c: g.input(st.cell.clone()),
        }
    }

    pub fn zero_summary(&self, batch: usize) -> SummaryState<T> {
        SummaryState {
            hidden: Tensor::zeros(&[batch, self.config.summary_dim]),
            cell: Tensor::zeros(&[batch, self.config.summary_dim]),
        }
    }

    pub fn zero_recurrent(&self, batch: usize) -> RecurrentState<T> {
        let s = self.config.feat_side();
        let z = Tensor::zeros(&[batch, self.config.hidden, s, s]);
        RecurrentState {
            hidden: vec![z.clone(); self.config.layers],
            cell: vec![z.clone(); self.config.layers],
            memory: z,
        }
    }

    fn latent_step(
        &self,
        net: &LatentNet,
        frame: Option<&Tensor<T>>,
        labels: &[usize],
        state: &SummaryState<T>,
    ) -> Result<(Vec<GaussianParams<T>>, SummaryState<T>)> {
        self.check_labels(labels)?;
        let mut g = Graph::inference();
        let p = g.bind(&self.params);
        let emb = self.layers.embedding.lookup(&mut g, &p, labels);
        let mut st = self.summary_inputs(&mut g, state);
        if let Some(f) = frame {
            self.check_frame(f.shape())?;
            let x = g.input(f.clone());
            let feat = self.layers.encoder.apply(&mut g, &p, x);
            st = net.step(&mut g, &p, x, feat, emb, st);
        }
        let (m, lv) = net.heads(&mut g, &p, st.h, emb);
        let params = GaussianParams::from_batch(g.value(m), g.value(lv));
        let next = SummaryState {
            hidden: g.value(st.h).clone(),
            cell: g.value(st.c).clone(),
        };
        Ok((params, next))
    }

    /// Posterior component after consuming frame `X_t`; `state` summarises
    /// `X_1:t-1`.
    pub fn posterior_params(
        &self,
        frame: &Tensor<T>,
        labels: &[usize],
        state: &SummaryState<T>,
    ) -> Result<(Vec<GaussianParams<T>>, SummaryState<T>)> {
        self.latent_step(&self.layers.posterior, Some(frame), labels, state)
    }

    /// Prior component for step `t`. `prev_frame` is `X_t-1`, or `None` at
    /// `t = 1` where the summary stays at `state` (zero for a fresh start).
    pub fn prior_params(
        &self,
        prev_frame: Option<&Tensor<T>>,
        labels: &[usize],
        state: &SummaryState<T>,
    ) -> Result<(Vec<GaussianParams<T>>, SummaryState<T>)> {
        self.latent_step(&self.layers.prior, prev_frame, labels, state)
    }

    /// One dynamics step from `X_t-1` to `X^_t`.
    pub fn predict_frame(
        &self,
        state: &RecurrentState<T>,
        prev_frame: &Tensor<T>,
        prev_action: Option<&Tensor<T>>,
        z: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(Tensor<T>, RecurrentState<T>)> {
        self.check_labels(labels)?;
        self.check_actions(prev_action.is_some())?;
        self.check_frame(prev_frame.shape())?;
        let mut g = Graph::inference();
        let p = g.bind(&self.params);
        let emb = self.layers.embedding.lookup(&mut g, &p, labels);
        let x = g.input(prev_frame.clone());
        let feat = self.layers.encoder.apply(&mut g, &p, x);
        let a = prev_action.map(|a| g.input(a.clone()));
        let zv = g.input(z.clone());
        let st = DynState {
            h: state.hidden.iter().map(|t| g.input(t.clone())).collect(),
            c: state.cell.iter().map(|t| g.input(t.clone())).collect(),
            m: g.input(state.memory.clone()),
        };
        let (pred, next) = self.dyn_step(&mut g, &p, feat, a, zv, emb, st);
        let next = RecurrentState {
            hidden: next.h.iter().map(|v| g.value(*v).clone()).collect(),
            cell: next.c.iter().map(|v| g.value(*v).clone()).collect(),
            memory: g.value(next.m).clone(),
        };
        Ok((g.value(pred).clone(), next))
    }
}

fn sample_latent<T: Scalar>(g: &mut Graph<T>, mean: Var, log_var: Var, eps: Var) -> Var {
    let half = g.scale(log_var, T::lit(0.5));
    let std = g.exp(half);
    let noise = g.mul(std, eps);
    g.add(mean, noise)
}
