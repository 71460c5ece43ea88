//! Analytic gradients of both training objectives against central finite
//! differences, in double precision on a tiny instance.

use cpl_core::data::Batch;
use cpl_core::gradcheck::{check_elbo, check_generator, tiny_world_model, GradCheckReport};
use cpl_core::world_model::LatentNoise;
use cpl_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;
const PER_TENSOR: usize = 4;

fn assert_passes(rep: GradCheckReport) {
    assert!(rep.absolute_failures.is_empty(), "{:?}", rep.absolute_failures);
    assert!(rep.worst_relative <= REL_TOL, "{}", rep.worst_entry);
    // Most sampled entries must carry measurable gradient, or the check is vacuous.
    assert!(rep.checked > 2 * rep.near_zero, "{rep:?}");
}

#[test]
fn elbo_gradients_match_finite_differences() {
    assert_passes(check_elbo(0, 11, PER_TENSOR).unwrap());
}

#[test]
fn elbo_gradients_match_with_actions() {
    assert_passes(check_elbo(2, 12, PER_TENSOR).unwrap());
}

#[test]
fn generator_gradients_match_finite_differences() {
    assert_passes(check_generator(0, 13, PER_TENSOR).unwrap());
}

#[test]
fn generator_gradients_match_with_actions() {
    assert_passes(check_generator(2, 14, PER_TENSOR).unwrap());
}

#[test]
fn every_parameter_receives_a_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let model = tiny_world_model(2, &mut rng).unwrap();
    let batch = Batch {
        frames: (0..5).map(|_| Tensor::from_fn(&[3, 1, 8, 8], |_| rng.gen_range(0.0..1.0))).collect(),
        actions: Some((0..4).map(|_| Tensor::from_fn(&[3, 2], |_| rng.gen_range(-1.0..1.0))).collect()),
        labels: vec![1, 2, 3],
    };
    let noise = LatentNoise::sample(3, 4, 4, &mut rng);
    let (_, graph, loss) = model.elbo_with_noise(&batch, 3, &noise, true).unwrap();
    let grads = graph.backward(loss).into_params();
    for id in model.params().ids() {
        assert!(grads.get(id).is_some(), "{} has no gradient", model.params().name(id));
    }
}
