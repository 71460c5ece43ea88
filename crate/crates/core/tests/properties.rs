//! Property tests for the model invariants: task-conditioning locality,
//! prior-only testing, state purity, mixed-loss decomposition and replay
//! volume accounting.

use cpl_core::data::Batch;
use cpl_core::gaussian::standard_normal;
use cpl_core::gradcheck::{tiny_generator, tiny_world_model};
use cpl_core::replay::{ceil_count, replay_volumes};
use cpl_core::world_model::{LatentNoise, RolloutMode, WorldModel};
use cpl_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn batch(n: usize, len: usize, action_dim: usize, labels: Vec<usize>, rng: &mut ChaCha8Rng) -> Batch<f64> {
    Batch {
        frames: (0..len).map(|_| Tensor::from_fn(&[n, 1, 8, 8], |_| rng.gen_range(0.0..1.0))).collect(),
        actions: (action_dim > 0).then(|| {
            (0..len - 1)
                .map(|_| Tensor::from_fn(&[n, action_dim], |_| rng.gen_range(-1.0..1.0)))
                .collect()
        }),
        labels,
    }
}

fn overwrite_row(m: &mut WorldModel<f64>, name: &str, row: usize, rng: &mut ChaCha8Rng) {
    let id = m.params().find(name).unwrap();
    let t = m.params_mut().get_mut(id);
    let d = t.shape()[1];
    for v in &mut t.data_mut()[(row - 1) * d..row * d] {
        *v = rng.gen_range(-3.0..3.0);
    }
}

/// Every output the model exposes for a batch labelled `k`.
fn outputs(m: &WorldModel<f64>, k: usize, b: &Batch<f64>, noise: &LatentNoise<f64>) -> Vec<Vec<f64>> {
    let b = b.relabeled(k);
    let labels = b.labels.clone();
    let mut out = Vec::new();
    let (q, _) = m.posterior_params(&b.frames[0], &labels, &m.zero_summary(b.len())).unwrap();
    let (p, _) = m.prior_params(None, &labels, &m.zero_summary(b.len())).unwrap();
    let (p2, _) = m.prior_params(Some(&b.frames[0]), &labels, &m.zero_summary(b.len())).unwrap();
    for g in q.iter().chain(&p).chain(&p2) {
        out.push(g.mean.clone());
        out.push(g.log_var.clone());
    }
    let z = Tensor::from_fn(&[b.len(), m.config().latent_dim], |i| (i as f64 * 0.37).sin());
    let a0 = b.actions.as_ref().map(|a| &a[0]);
    let (x, _) = m.predict_frame(&m.zero_recurrent(b.len()), &b.frames[0], a0, &z, &labels).unwrap();
    out.push(x.data().to_vec());
    for mode in [RolloutMode::TrainPosterior, RolloutMode::TestPrior] {
        for f in m.rollout_with_noise(&b, 2, 2, mode, noise).unwrap() {
            out.push(f.data().to_vec());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn embedding_rows_of_other_tasks_do_not_matter(seed in any::<u64>(), k in 1usize..=3, shift in 1usize..=2, actions in prop::bool::ANY) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_a = if actions { 2 } else { 0 };
        let m = tiny_world_model(d_a, &mut rng).unwrap();
        let b = batch(2, 4, d_a, vec![1, 1], &mut rng);
        let noise = LatentNoise::sample(2, 3, 4, &mut rng);
        let j = (k - 1 + shift) % 3 + 1;
        let mut other = m.clone();
        let name = other.embedding_table_name().to_string();
        overwrite_row(&mut other, &name, j, &mut rng);
        prop_assert_eq!(outputs(&m, k, &b, &noise), outputs(&other, k, &b, &noise));
        // The row of task k itself is a live pathway.
        let mut own = m.clone();
        overwrite_row(&mut own, &name, k, &mut rng);
        prop_assert_ne!(outputs(&m, k, &b, &noise), outputs(&own, k, &b, &noise));
    }

    #[test]
    fn generator_rows_of_other_tasks_do_not_matter(seed in any::<u64>(), k in 1usize..=3, shift in 1usize..=2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = tiny_generator(0, &mut rng).unwrap();
        let j = (k - 1 + shift) % 3 + 1;
        let mut other = g.clone();
        for name in ["gen.task.table", "gen.prior.mean", "gen.prior.log_var"] {
            let id = other.params().find(name).unwrap();
            let t = other.params_mut().get_mut(id);
            let d = t.shape()[1];
            for v in &mut t.data_mut()[(j - 1) * d..j * d] {
                *v = rng.gen_range(-3.0..3.0);
            }
        }
        let a = g.generate_initial_frame(None, &[k, k], &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        let b = other.generate_initial_frame(None, &[k, k], &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn prior_rollout_ignores_the_posterior_network(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = tiny_world_model(0, &mut rng).unwrap();
        let b = batch(3, 5, 0, vec![1, 2, 3], &mut rng);
        let noise = LatentNoise::sample(3, 4, 4, &mut rng);
        let mut perturbed = m.clone();
        let names = perturbed.posterior_param_names();
        prop_assert!(!names.is_empty());
        for name in names {
            let id = perturbed.params().find(&name).unwrap();
            for v in perturbed.params_mut().get_mut(id).data_mut() {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
        }
        let a = m.rollout_with_noise(&b, 3, 2, RolloutMode::TestPrior, &noise).unwrap();
        let c = perturbed.rollout_with_noise(&b, 3, 2, RolloutMode::TestPrior, &noise).unwrap();
        prop_assert_eq!(a, c);
        // The training path does read the posterior.
        let a = m.rollout_with_noise(&b, 3, 2, RolloutMode::TrainPosterior, &noise).unwrap();
        let c = perturbed.rollout_with_noise(&b, 3, 2, RolloutMode::TrainPosterior, &noise).unwrap();
        prop_assert_ne!(a, c);
    }

    #[test]
    fn step_functions_are_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = tiny_world_model(0, &mut rng).unwrap();
        let b = batch(2, 2, 0, vec![2, 3], &mut rng);
        let labels = b.labels.clone();
        let mut summary = m.zero_summary(2);
        summary.hidden = Tensor::from_fn(summary.hidden.shape(), |_| rng.gen_range(-1.0..1.0));
        let before = summary.clone();
        let first = m.posterior_params(&b.frames[1], &labels, &summary).unwrap();
        let second = m.posterior_params(&b.frames[1], &labels, &summary).unwrap();
        prop_assert_eq!(&summary, &before);
        prop_assert_eq!(first, second);
        let first = m.prior_params(Some(&b.frames[0]), &labels, &summary).unwrap();
        let second = m.prior_params(Some(&b.frames[0]), &labels, &summary).unwrap();
        prop_assert_eq!(&summary, &before);
        prop_assert_eq!(first, second);

        let mut state = m.zero_recurrent(2);
        state.memory = Tensor::from_fn(state.memory.shape(), |_| rng.gen_range(-1.0..1.0));
        let before = state.clone();
        let z = standard_normal(&[2, 4], &mut rng);
        let first = m.predict_frame(&state, &b.frames[0], None, &z, &labels).unwrap();
        let second = m.predict_frame(&state, &b.frames[0], None, &z, &labels).unwrap();
        prop_assert_eq!(&state, &before);
        prop_assert_eq!(first, second);
    }

    #[test]
    fn mixed_loss_is_the_sum_of_per_task_losses(seed in any::<u64>(), labels in prop::collection::vec(1usize..=3, 1..7)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = tiny_world_model(0, &mut rng).unwrap();
        let n = labels.len();
        let b = batch(n, 4, 0, labels.clone(), &mut rng);
        let noise = LatentNoise::sample(n, 3, 4, &mut rng);
        let mixed = m.elbo_with_noise(&b, 2, &noise, false).unwrap().0.loss;
        let mut sum = 0.0;
        for k in 1..=3 {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            if !idx.is_empty() {
                sum += m.elbo_with_noise(&b.select(&idx), 2, &noise.select(&idx), false).unwrap().0.loss;
            }
        }
        prop_assert!((mixed - sum).abs() <= 1e-6 * sum.abs().max(1e-12), "{} vs {}", mixed, sum);

        let g = tiny_generator(0, &mut rng).unwrap();
        let frames = Tensor::stack(&(0..n).map(|i| b.frames[0].item(i)).collect::<Vec<_>>());
        let eps = standard_normal(&[n, 4], &mut rng);
        let mixed = g.loss_with_noise(&frames, None, &labels, &eps, false).unwrap().0.loss;
        let mut sum = 0.0;
        for k in 1..=3 {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
            if !idx.is_empty() {
                let sub = vec![k; idx.len()];
                sum += g.loss_with_noise(&frames.select(&idx), None, &sub, &eps.select(&idx), false).unwrap().0.loss;
            }
        }
        prop_assert!((mixed - sum).abs() <= 1e-6 * sum.abs().max(1e-12), "{} vs {}", mixed, sum);
    }
}

proptest! {
    #[test]
    fn replay_volume_is_split_evenly(current in 1usize..8, n in 0usize..2000, ratio in 0.001f64..=1.0) {
        let v = replay_volumes(current, n, ratio);
        if current == 1 {
            prop_assert!(v.is_empty());
        } else {
            prop_assert_eq!(v.len(), current - 1);
            prop_assert_eq!(v.iter().map(|x| x.1).sum::<usize>(), ceil_count(ratio * n as f64));
            prop_assert!(v.iter().enumerate().all(|(i, x)| x.0 == i + 1));
            let (lo, hi) = (v.iter().map(|x| x.1).min().unwrap(), v.iter().map(|x| x.1).max().unwrap());
            prop_assert!(hi - lo <= 1);
            prop_assert!(v.windows(2).all(|w| w[0].1 >= w[1].1));
        }
    }

    #[test]
    fn kl_weighted_loss_is_finite_and_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = tiny_world_model(0, &mut rng).unwrap();
        let b = batch(2, 4, 0, vec![1, 3], &mut rng);
        let rep = m.elbo_loss(&b, 2, &mut rng).unwrap();
        prop_assert!(rep.loss.is_finite() && rep.recon >= 0.0 && rep.kl >= -1e-12);
    }
}
