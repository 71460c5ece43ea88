//! Finite-difference verification of the training objectives on a tiny
//! double-precision instance (8x8 frames, one recurrent layer).

use cpl_tensor::{Gradients, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::gaussian::standard_normal;
use crate::generator::{FrameGenerator, GeneratorConfig};
use crate::world_model::{LatentNoise, WorldModel, WorldModelConfig};
use crate::Result;

pub const STEP: f64 = 1e-6;
/// Round-off in the central difference is about `f64::EPSILON * |loss| / STEP`,
/// roughly 1e-9 here. Derivatives below this scale are compared absolutely.
pub const ZERO_SCALE: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-8;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Entries compared by relative error.
    pub checked: usize,
    /// Entries below `ZERO_SCALE` compared absolutely.
    pub near_zero: usize,
    pub worst_relative: f64,
    pub worst_entry: String,
    /// Near-zero entries whose absolute mismatch exceeded `ABS_TOL`.
    pub absolute_failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.worst_relative <= rel_tol && self.absolute_failures.is_empty() && self.checked > 0
    }
}

pub fn tiny_world_model(action_dim: usize, rng: &mut impl Rng) -> Result<WorldModel<f64>> {
    WorldModel::new(
        WorldModelConfig {
            channels: 1,
            resolution: 8,
            num_tasks: 3,
            hidden: 8,
            layers: 1,
            latent_dim: 4,
            embed_dim: 3,
            action_dim,
            action_embed: 3,
            enc_channels: 4,
            summary_dim: 8,
            alpha: 0.3,
            ..Default::default()
        },
        rng,
    )
}

/// Learnable priors are moved off their zero initialisation so their
/// gradient paths are exercised away from the symmetric point.
pub fn tiny_generator(action_dim: usize, rng: &mut impl Rng) -> Result<FrameGenerator<f64>> {
    let mut g = FrameGenerator::new(
        GeneratorConfig {
            channels: 1,
            resolution: 8,
            num_tasks: 3,
            latent_dim: 4,
            embed_dim: 3,
            enc_channels: 4,
            action_dim,
            action_embed: 3,
            beta: 0.3,
        },
        rng,
    )?;
    for name in ["gen.prior.mean", "gen.prior.log_var"] {
        let id = g.params().find(name).expect("generator prior table");
        for v in g.params_mut().get_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    Ok(g)
}

fn random_batch(n: usize, len: usize, action_dim: usize, rng: &mut impl Rng) -> Batch<f64> {
    Batch {
        frames: (0..len).map(|_| Tensor::from_fn(&[n, 1, 8, 8], |_| rng.gen_range(0.0..1.0))).collect(),
        actions: (action_dim > 0).then(|| {
            (0..len - 1)
                .map(|_| Tensor::from_fn(&[n, action_dim], |_| rng.gen_range(-1.0..1.0)))
                .collect()
        }),
        labels: (0..n).map(|i| i % 3 + 1).collect(),
    }
}

/// Central differences of `loss` on `per_tensor` sampled entries of every
/// parameter tensor.
pub fn compare(
    store: &ParamStore<f64>,
    grads: &Gradients<f64>,
    loss: impl Fn(&ParamStore<f64>) -> f64,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let mut rep = GradCheckReport {
        checked: 0,
        near_zero: 0,
        worst_relative: 0.0,
        worst_entry: String::new(),
        absolute_failures: Vec::new(),
    };
    for id in store.ids() {
        let len = store.get(id).len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for j in picks {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[j] += STEP;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[j] -= STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let scale = analytic.abs().max(numeric.abs());
            let diff = (analytic - numeric).abs();
            let entry = format!("{}[{j}] analytic {analytic:e} numeric {numeric:e}", store.name(id));
            if scale < ZERO_SCALE {
                rep.near_zero += 1;
                if diff > ABS_TOL {
                    rep.absolute_failures.push(entry);
                }
                continue;
            }
            rep.checked += 1;
            let rel = diff / scale;
            if rel > rep.worst_relative {
                rep.worst_relative = rel;
                rep.worst_entry = entry;
            }
        }
    }
    rep
}

/// Checks the world-model objective with fixed latent noise.
pub fn check_elbo(action_dim: usize, seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = tiny_world_model(action_dim, &mut rng)?;
    let batch = random_batch(3, 5, action_dim, &mut rng);
    let noise = LatentNoise::sample(3, 4, 4, &mut rng);
    let (_, graph, loss) = model.elbo_with_noise(&batch, 3, &noise, true)?;
    let grads = graph.backward(loss).into_params();
    let eval = |store: &ParamStore<f64>| {
        let mut m = model.clone();
        *m.params_mut() = store.clone();
        m.elbo_with_noise(&batch, 3, &noise, false).map_or(f64::NAN, |r| r.0.loss)
    };
    Ok(compare(model.params(), &grads, eval, per_tensor, &mut rng))
}

/// Checks the generator objective with fixed reparameterisation noise.
pub fn check_generator(action_dim: usize, seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = tiny_generator(action_dim, &mut rng)?;
    let frames = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
    let actions = (action_dim > 0).then(|| Tensor::from_fn(&[4, action_dim], |_| rng.gen_range(-1.0..1.0)));
    let labels = [1, 2, 3, 2];
    let eps = standard_normal(&[4, 4], &mut rng);
    let (_, graph, loss) = gen.loss_with_noise(&frames, actions.as_ref(), &labels, &eps, true)?;
    let grads = graph.backward(loss).into_params();
    let eval = |store: &ParamStore<f64>| {
        let mut g = gen.clone();
        *g.params_mut() = store.clone();
        g.loss_with_noise(&frames, actions.as_ref(), &labels, &eps, false)
            .map_or(f64::NAN, |r| r.0.loss)
    };
    Ok(compare(gen.params(), &grads, eval, per_tensor, &mut rng))
}
