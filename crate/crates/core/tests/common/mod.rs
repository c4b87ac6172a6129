//! Shared end-to-end gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shooting_core::datasets::Dataset;
use shooting_core::integrator::IntegratorSpec;
use shooting_core::objective::{total_objective, ObjectiveSpec};
use shooting_core::parameterizations::{Mode, ModeSpec, Params};
use shooting_core::trainer::{objective_and_grad, OptimSpec, TrainSpec};
use shooting_core::{Activation, Tensor};

/// Largest entrywise relative error (floor 1e-6 on the denominator) between
/// the taped gradient of the objective and central differences with step
/// `1e-4`, on d = 1, α = 2, K = 2, 3 samples, T = 1, h = 0.25.
pub fn fd_gradient_error(mode: Mode, activation: Activation, seed: u64) -> f64 {
    let mut spec = ModeSpec::new(mode, 1, 2, 2);
    spec.activation = activation;
    if mode == Mode::DynamicDirect {
        spec.blocks = 2;
    }
    let integ = IntegratorSpec::rk4(0.25, 1.0).unwrap();
    let objective = ObjectiveSpec::default();
    let optim = OptimSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::zeros(&spec).unwrap();
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let x = Tensor::matrix(3, 1, (0..3).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let y = x.map(|v| v * v + 3.0 / (1.0 + v * v));
    let batch = Dataset::new(x.clone(), y.clone()).unwrap();
    let train = TrainSpec {
        mode: &spec,
        objective: &objective,
        optim: &optim,
        integrator: &integ,
    };
    let (_, grads) = objective_and_grad(&train, &params, &batch).unwrap();
    let f = |p: &Params| total_objective(&objective, &spec, p, &x, &y, &integ).unwrap().total;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[k].data_mut()[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[k].data_mut()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}
