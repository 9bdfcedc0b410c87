use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::cross_entropy_loss;
use super::model::{Mode, Model};
use super::train::targets;
use crate::autodiff::{check_gradients, GradCheckReport};
use crate::error::Result;
use crate::geometry::PointCloud;
use crate::nn::Binding;
use crate::tensor::Tensor;

/// Finite-difference check of the training loss of `model` on `clouds` over
/// every parameter coordinate.
///
/// Parameters are first moved by seeded uniform noise in `±jitter`: freshly
/// initialized biases are zero, which parks ReLUs exactly on their kink where
/// central differences are meaningless.
pub fn model_gradient_check(
    model: &Model,
    clouds: &[&PointCloud],
    eps: f64,
    jitter: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let cfg = model.config();
    let mut labels = Vec::new();
    for c in clouds {
        labels.extend(targets(cfg.task, cfg.num_classes, c)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor> = model
        .params()
        .values()
        .iter()
        .map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.random_range(-jitter..=jitter)))
        .collect();
    check_gradients(
        |tape, vars| {
            let binding = Binding::from_vars(vars.to_vec());
            let pass = model.forward_on_tape(tape, &binding, clouds, Mode::Train)?;
            cross_entropy_loss(tape, pass.logits, &labels)
        },
        &params,
        eps,
    )
}
