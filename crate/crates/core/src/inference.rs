//! Trial-and-error task inference, test-time adaptation and deployment.

use cpl_tensor::{Adam, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{check_label, CplError, Result};
use crate::world_model::{LatentNoise, RolloutMode, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    /// Chosen label, 1-based.
    pub task: usize,
    /// Probe error of every candidate label.
    pub probe_errors: Vec<f64>,
    pub adapted: bool,
    pub adapt_steps: usize,
}

/// One observed window: frames `[1, C, H, W]` per step and optional actions
/// `[1, d_a]` per transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<'a, T> {
    pub frames: &'a [Tensor<T>],
    pub actions: Option<&'a [Tensor<T>]>,
}

fn window_batch<T: Scalar>(frames: &[Tensor<T>], actions: Option<&[Tensor<T>]>, label: usize) -> Batch<T> {
    Batch {
        frames: frames.to_vec(),
        actions: actions.map(<[Tensor<T>]>::to_vec),
        labels: vec![label],
    }
}

fn frame_mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// Index of the smallest error; ties go to the lowest index.
pub fn argmin_lowest(errors: &[f64]) -> usize {
    let mut best = 0;
    for (i, e) in errors.iter().enumerate() {
        if *e < errors[best] {
            best = i;
        }
    }
    best
}

/// Probes every label in `1..=candidates` on the observed window `X_1:T`:
/// the first `floor(T/2)` frames seed a prior rollout whose predictions of
/// the remaining observed frames are scored by per-frame MSE averaged over
/// probe steps. Every probe draws its latents from a clone of `rng`; `rng`
/// itself is advanced as one probe would advance it.
pub fn infer_task<T: Scalar, R: Rng + Clone>(
    model: &WorldModel<T>,
    window: &Window<'_, T>,
    candidates: usize,
    rng: &mut R,
) -> Result<InferenceReport> {
    let t = window.frames.len();
    if t < 2 {
        return Err(CplError::Config(format!(
            "task inference needs at least 2 observed frames, got {t}"
        )));
    }
    if candidates == 0 || candidates > model.num_tasks() {
        return Err(CplError::Config(format!(
            "{candidates} candidate labels for a model with {} tasks",
            model.num_tasks()
        )));
    }
    let s = t / 2;
    let mut probe_errors = Vec::with_capacity(candidates);
    let mut after = rng.clone();
    for k in 1..=candidates {
        let mut r = rng.clone();
        let preds = deploy_predict(model, &window.frames[..s], window.actions, k, t - s, &mut r)?;
        let err = preds
            .iter()
            .zip(&window.frames[s..])
            .map(|(p, x)| frame_mse(p, x))
            .sum::<f64>()
            / (t - s) as f64;
        probe_errors.push(err);
        after = r;
    }
    *rng = after;
    Ok(InferenceReport {
        task: argmin_lowest(&probe_errors) + 1,
        probe_errors,
        adapted: false,
        adapt_steps: 0,
    })
}

/// Test-time adaptation: optimises a clone of `model` for `steps` Adam steps
/// of the training objective on the observed window only. The first
/// `floor(T/2)` frames are teacher-forced, the rest are predicted freely.
pub fn adapt<T: Scalar>(
    model: &WorldModel<T>,
    window: &Window<'_, T>,
    label: usize,
    steps: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<WorldModel<T>> {
    check_label(label, model.num_tasks())?;
    let mut m = model.clone();
    if steps == 0 {
        return Ok(m);
    }
    let t = window.frames.len();
    if t < 2 {
        return Err(CplError::Config("adaptation needs at least 2 observed frames".into()));
    }
    let actions = window.actions.map(|a| &a[..a.len().min(t - 1)]);
    let batch = window_batch(window.frames, actions, label);
    let context = (t / 2).max(1);
    let mut opt = Adam::new(m.params(), T::lit(lr), T::lit(0.9), T::lit(0.999));
    for _ in 0..steps {
        let noise = LatentNoise::sample(1, t - 1, m.config().latent_dim, rng);
        let (_, g, loss) = m.elbo_with_noise(&batch, context, &noise, true)?;
        let grads = g.backward(loss).into_params();
        opt.step(m.params_mut(), &grads);
    }
    Ok(m)
}

/// Prior rollout from the context `X_1:T` returning exactly the `horizon`
/// future frames. `actions`, when present, must cover `a_1:T+H-1`.
pub fn deploy_predict<T: Scalar>(
    model: &WorldModel<T>,
    context: &[Tensor<T>],
    actions: Option<&[Tensor<T>]>,
    label: usize,
    horizon: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<T>>> {
    let t = context.len();
    if t == 0 {
        return Err(CplError::Shape("empty context".into()));
    }
    let total = t + horizon;
    let actions = match actions {
        Some(a) if a.len() < total - 1 => {
            return Err(CplError::Shape(format!(
                "{} actions for a rollout of {total} frames",
                a.len()
            )))
        }
        Some(a) => Some(&a[..total - 1]),
        None => None,
    };
    let batch = window_batch(context, actions, label);
    let noise = LatentNoise::sample(1, total - 1, model.config().latent_dim, rng);
    let preds = model.rollout_with_noise(&batch, t, horizon, RolloutMode::TestPrior, &noise)?;
    Ok(preds[t - 1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world_model::WorldModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(k: usize) -> WorldModelConfig {
        WorldModelConfig {
            resolution: 8,
            num_tasks: k,
            hidden: 8,
            layers: 1,
            latent_dim: 4,
            embed_dim: 4,
            enc_channels: 4,
            summary_dim: 8,
            ..Default::default()
        }
    }

    fn frames(n: usize, seed: u64) -> Vec<Tensor<f64>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Tensor::from_fn(&[1, 1, 8, 8], |_| r.gen_range(0.0..1.0))).collect()
    }

    #[test]
    fn single_task_model_always_infers_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = WorldModel::<f64>::new(tiny(1), &mut rng).unwrap();
        let f = frames(5, 1);
        let w = Window { frames: &f, actions: None };
        let r = infer_task(&m, &w, 1, &mut rng).unwrap();
        assert_eq!(r.task, 1);
        assert_eq!(r.probe_errors.len(), 1);
    }

    #[test]
    fn ties_pick_the_lowest_label_and_offsets_do_not_matter() {
        assert_eq!(argmin_lowest(&[0.3, 0.3, 0.3]), 0);
        assert_eq!(argmin_lowest(&[0.5, 0.2, 0.2]), 1);
        let e = [0.4, 0.1, 0.7];
        let shifted: Vec<f64> = e.iter().map(|v| v + 12.5).collect();
        assert_eq!(argmin_lowest(&e), argmin_lowest(&shifted));
    }

    #[test]
    fn equal_embedding_rows_tie_to_label_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = WorldModel::<f64>::new(tiny(3), &mut rng).unwrap();
        let name = m.embedding_table_name().to_string();
        let id = m.params().find(&name).unwrap();
        let t = m.params_mut().get_mut(id);
        let row: Vec<f64> = t.data()[..4].to_vec();
        for k in 1..3 {
            t.data_mut()[k * 4..(k + 1) * 4].copy_from_slice(&row);
        }
        let f = frames(5, 3);
        let r = infer_task(&m, &Window { frames: &f, actions: None }, 3, &mut rng).unwrap();
        assert_eq!(r.probe_errors[0], r.probe_errors[2]);
        assert_eq!(r.task, 1);
    }

    #[test]
    fn too_short_window_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = WorldModel::<f64>::new(tiny(2), &mut rng).unwrap();
        let f = frames(1, 1);
        assert!(infer_task(&m, &Window { frames: &f, actions: None }, 2, &mut rng).is_err());
    }

    #[test]
    fn probe_matches_deploy_on_the_same_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = WorldModel::<f64>::new(tiny(3), &mut rng).unwrap();
        let f = frames(6, 5);
        let start = ChaCha8Rng::seed_from_u64(77);
        let r = infer_task(&m, &Window { frames: &f, actions: None }, 3, &mut start.clone()).unwrap();
        for k in 1..=3 {
            let preds = deploy_predict(&m, &f[..3], None, k, 3, &mut start.clone()).unwrap();
            let err = preds.iter().zip(&f[3..]).map(|(p, x)| frame_mse(p, x)).sum::<f64>() / 3.0;
            assert_eq!(err, r.probe_errors[k - 1]);
        }
    }

    #[test]
    fn deploy_returns_horizon_frames_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = WorldModel::<f64>::new(tiny(2), &mut rng).unwrap();
        let f = frames(5, 7);
        let a = deploy_predict(&m, &f, None, 2, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = deploy_predict(&m, &f, None, 2, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert!(deploy_predict(&m, &f, None, 3, 10, &mut rng).is_err());
    }

    #[test]
    fn adapt_leaves_the_base_model_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = WorldModel::<f64>::new(tiny(2), &mut rng).unwrap();
        let before = m.params().fingerprint();
        let f = frames(5, 9);
        let w = Window { frames: &f, actions: None };
        let same = adapt(&m, &w, 1, 0, 5e-4, &mut rng).unwrap();
        assert_eq!(same.params().fingerprint(), before);
        let moved = adapt(&m, &w, 1, 5, 5e-4, &mut rng).unwrap();
        assert_ne!(moved.params().fingerprint(), before);
        assert_eq!(m.params().fingerprint(), before);
    }
}
