use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Activation;
use crate::dynamics::{hamiltonian, UpDownModel, UpDownWeights};
use crate::parameterizations::{evaluate, Core, Mode};

fn updown(d: usize, alpha: usize, act: Activation, weights: UpDownWeights) -> FieldModel {
    UpDownModel::new(d, alpha, act, weights).unwrap().into()
}

/// A log with `θ(t)` given on a uniform grid over `[0, T]`.
fn synthetic_log(horizon: f64, steps: usize, theta: impl Fn(f64) -> Vec<Tensor>) -> TrajectoryLog {
    let times: Vec<f64> = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
    TrajectoryLog {
        theta: times.iter().map(|&t| theta(t)).collect(),
        states: vec![vec![Tensor::zeros(&[1, 1])]],
        theta_breaks: Vec::new(),
        stage_theta: Vec::new(),
        hamiltonian: None,
        times,
        recorded: false,
    }
}

fn theta_with(model: &FieldModel, component: usize, values: Vec<f64>) -> Vec<Tensor> {
    let mut th = model.zero_theta();
    let shape = th[component].shape().to_vec();
    th[component] = Tensor::new(&shape, values).unwrap();
    th
}

#[test]
fn regularizer_of_zero_theta_is_zero() {
    let m = updown(1, 2, Activation::Relu, UpDownWeights::default());
    let log = synthetic_log(1.0, 10, |_| m.zero_theta());
    assert_eq!(regularizer_integral(&m, &log).unwrap(), 0.0);
}

#[test]
fn regularizer_of_constant_theta() {
    // ‖θ₁‖² = 2, w₁ = 1 → R = 1 → ∫₀¹ R = 1
    let m = updown(1, 2, Activation::Relu, UpDownWeights::default());
    let log = synthetic_log(1.0, 10, |_| theta_with(&m, 0, vec![1.0, 1.0]));
    assert!((regularizer_integral(&m, &log).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn regularizer_is_second_order_in_the_grid() {
    // R(t) = ½ sin²(t)·2 = sin²(t), ∫₀¹ = ½ − sin(2)/4
    let m = updown(1, 2, Activation::Relu, UpDownWeights::default());
    let exact = 0.5 - (2.0f64).sin() / 4.0;
    let err = |steps| {
        let log = synthetic_log(1.0, steps, |t| theta_with(&m, 0, vec![t.sin(), t.sin()]));
        (regularizer_integral(&m, &log).unwrap() - exact).abs()
    };
    let ratio = err(10) / err(20);
    assert!((3.8..4.2).contains(&ratio), "{ratio}");
}

#[test]
fn empty_log_is_rejected() {
    let m = updown(1, 2, Activation::Relu, UpDownWeights::default());
    let mut log = synthetic_log(1.0, 1, |_| m.zero_theta());
    log.times.truncate(1);
    log.theta.truncate(1);
    assert_eq!(regularizer_integral(&m, &log).unwrap_err(), Error::EmptyLog);
    assert_eq!(complexity_metric(&log).unwrap_err(), Error::EmptyLog);
}

#[test]
fn complexity_of_constant_theta() {
    let m = updown(1, 2, Activation::Relu, UpDownWeights::default());
    let two = synthetic_log(1.0, 10, |_| theta_with(&m, 1, vec![2.0]));
    assert!((complexity_metric(&two).unwrap() - 1.0).abs() < 1e-15);
    let one = synthetic_log(1.0, 10, |_| theta_with(&m, 4, vec![0.6, 0.0, 0.0, 0.8]));
    assert!(complexity_metric(&one).unwrap().abs() < 1e-15);
}

#[test]
fn complexity_of_zero_theta_is_undefined() {
    let m = updown(1, 2, Activation::Relu, UpDownWeights::default());
    let log = synthetic_log(1.0, 4, |t| {
        if t > 0.6 {
            m.zero_theta()
        } else {
            theta_with(&m, 1, vec![1.0])
        }
    });
    assert_eq!(
        complexity_metric(&log).unwrap_err(),
        Error::UndefinedMetric { index: 3 }
    );
}

fn random_params(spec: &ModeSpec, seed: u64, scale: f64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::zeros(spec).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = scale * rng.random_range(-1.0..1.0);
        }
    }
    p
}

#[test]
fn shooting_regularizer_equals_horizon_times_energy() {
    let mut spec = ModeSpec::new(Mode::DynamicWithParticles, 2, 2, 4);
    spec.activation = Activation::Tanh;
    let p = random_params(&spec, 1, 0.8);
    let integ = IntegratorSpec::rk4(0.01, 1.0).unwrap();
    let log = evaluate(&spec, &p, &Tensor::zeros(&[1, 2]), &integ, false).unwrap();
    let model = spec.model().unwrap();
    let Core::Particles(e) = &p.core else { unreachable!() };
    let theta0 = model.eval_solve_theta(e).unwrap();
    let h0 = hamiltonian(&model, e, &theta0).unwrap();
    let reg = regularizer_integral(&model, &log).unwrap();
    // with H = R − pᵀf the reduced Hamiltonian is −R
    assert!((reg + 1.0 * h0).abs() < 1e-6, "{reg} vs {}", -h0);
}

#[test]
fn shooting_complexity_integrand_is_constant_for_uniform_weights() {
    let mut spec = ModeSpec::new(Mode::DynamicWithParticles, 1, 3, 3);
    spec.activation = Activation::Tanh;
    spec.weights = UpDownWeights::uniform(1.0);
    let p = random_params(&spec, 2, 0.8);
    let integ = IntegratorSpec::rk4(0.01, 1.0).unwrap();
    let log = evaluate(&spec, &p, &Tensor::zeros(&[1, 1]), &integ, false).unwrap();
    let integrand: Vec<f64> = log
        .theta
        .iter()
        .map(|th| th.iter().map(Tensor::frobenius_sq).sum::<f64>().sqrt().log2())
        .collect();
    let spread =
        integrand.iter().cloned().fold(f64::MIN, f64::max) - integrand.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 1e-5, "{spread}");
    let metric = complexity_metric(&log).unwrap();
    assert!((metric - integrand[0]).abs() < 1e-5);
}

#[test]
fn perfect_fit_with_zero_theta_costs_nothing() {
    let spec = ModeSpec::new(Mode::StaticDirect, 1, 2, 0);
    let p = Params::zeros(&spec).unwrap();
    let x = Tensor::from_rows(&[vec![0.5], vec![-1.0]]);
    let integ = IntegratorSpec::rk4(0.1, 1.0).unwrap();
    let parts = total_objective(&ObjectiveSpec::default(), &spec, &p, &x, &x, &integ).unwrap();
    assert_eq!(parts.total, 0.0);
}

#[test]
fn weighted_single_sample_error() {
    // identity map, one sample, error 0.1, γ = 100 → 100 · 0.01 = 1
    let spec = ModeSpec::new(Mode::StaticDirect, 1, 2, 0);
    let p = Params::zeros(&spec).unwrap();
    let obj = ObjectiveSpec {
        loss: LossKind::Mse,
        gamma: 100.0,
        lambda_reg: 0.0,
    };
    let integ = IntegratorSpec::rk4(0.1, 1.0).unwrap();
    let parts = total_objective(
        &obj,
        &spec,
        &p,
        &Tensor::from_rows(&[vec![0.3]]),
        &Tensor::from_rows(&[vec![0.4]]),
        &integ,
    )
    .unwrap();
    assert!((parts.total - 1.0).abs() < 1e-12);
}

#[test]
fn total_matches_sum_of_parts() {
    let integ = IntegratorSpec::rk4(0.1, 1.0).unwrap();
    for (i, mode) in Mode::ALL.into_iter().enumerate() {
        let spec = ModeSpec::new(mode, 1, 3, 3);
        let p = random_params(&spec, 10 + i as u64, 0.5);
        let x = Tensor::from_rows(&[vec![0.2], vec![-0.7], vec![1.1]]);
        let y = Tensor::from_rows(&[vec![1.0], vec![0.0], vec![-0.5]]);
        let obj = ObjectiveSpec {
            loss: LossKind::Mse,
            gamma: 7.0,
            lambda_reg: 0.3,
        };
        let parts = total_objective(&obj, &spec, &p, &x, &y, &integ).unwrap();
        // recompute the parts independently from the tensor-level log
        let log = evaluate(&spec, &p, &x, &integ, false).unwrap();
        let pred = &log.final_state()[0];
        let mse: f64 = pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 3.0;
        let model = spec.model().unwrap();
        let w = spec.weights.as_array();
        let r = |th: &[Tensor]| th.iter().zip(w).map(|(t, wk)| 0.5 * wk * t.frobenius_sq()).sum::<f64>();
        let mut reg = 0.0;
        for n in 0..log.times.len() - 1 {
            let (l, rt) = log.step_theta(n);
            reg += 0.5 * (log.times[n + 1] - log.times[n]) * (r(l) + r(rt));
        }
        assert!((parts.data - mse).abs() < 1e-12, "{mode}");
        assert!((parts.regularizer - reg).abs() < 1e-12, "{mode}");
        assert!((parts.total - (0.3 * reg + 7.0 * mse)).abs() < 1e-12, "{mode}");
        assert!((regularizer_integral(&model, &log).unwrap() - reg).abs() < 1e-12);
    }
}

#[test]
fn zero_lambda_is_pure_data_loss() {
    let spec = ModeSpec::new(Mode::DynamicWithParticles, 1, 2, 2);
    let p = random_params(&spec, 20, 0.5);
    let x = Tensor::from_rows(&[vec![0.2], vec![-0.7]]);
    let y = Tensor::from_rows(&[vec![1.0], vec![0.0]]);
    let integ = IntegratorSpec::rk4(0.1, 1.0).unwrap();
    let obj = ObjectiveSpec {
        loss: LossKind::Mse,
        gamma: 3.0,
        lambda_reg: 0.0,
    };
    let parts = total_objective(&obj, &spec, &p, &x, &y, &integ).unwrap();
    assert_eq!(parts.total, 3.0 * parts.data);
}

#[test]
fn trajectory_loss_uses_every_grid_point() {
    let spec = ModeSpec::new(Mode::StaticDirect, 2, 2, 0);
    let p = Params::zeros(&spec).unwrap();
    let integ = IntegratorSpec::rk4(0.05, 0.25).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
    // identity flow; targets off by 0.1 in one entry at each of 5 points
    let mut y = Tensor::zeros(&[1, 10]);
    for s in 0..5 {
        y.data_mut()[2 * s] = 1.1;
        y.data_mut()[2 * s + 1] = 2.0;
    }
    let obj = ObjectiveSpec {
        loss: LossKind::MseTrajectory,
        gamma: 1.0,
        lambda_reg: 1.0,
    };
    let parts = total_objective(&obj, &spec, &p, &x, &y, &integ).unwrap();
    assert!((parts.data - 0.01 / 2.0).abs() < 1e-15);
    assert!(total_objective(&obj, &spec, &p, &x, &Tensor::zeros(&[1, 8]), &integ).is_err());
}

#[test]
fn cross_entropy_with_readout() {
    let spec = ModeSpec::new(Mode::StaticDirect, 2, 2, 0);
    let readout = Readout {
        weight: Tensor::from_rows(&[vec![1.0, 0.0]]),
        bias: Tensor::vector(vec![-0.5]),
    };
    let p = Params::zeros(&spec).unwrap().with_readout(readout.clone());
    let x = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]);
    let labels = Tensor::from_rows(&[vec![1.0], vec![0.0]]);
    let integ = IntegratorSpec::rk4(0.1, 1.0).unwrap();
    let obj = ObjectiveSpec {
        loss: LossKind::BinaryCrossEntropy,
        gamma: 1.0,
        lambda_reg: 0.0,
    };
    let parts = total_objective(&obj, &spec, &p, &x, &labels, &integ).unwrap();
    // logits 1.5 and −0.5
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let want = -(sig(1.5).ln() + (1.0 - sig(-0.5)).ln()) / 2.0;
    assert!((parts.data - want).abs() < 1e-14);
    assert_eq!(accuracy(&readout, &x, &labels).unwrap(), 1.0);
    let flipped = Tensor::from_rows(&[vec![0.0], vec![0.0]]);
    assert_eq!(accuracy(&readout, &x, &flipped).unwrap(), 0.5);
    let no_readout = Params::zeros(&spec).unwrap();
    assert!(total_objective(&obj, &spec, &no_readout, &x, &labels, &integ).is_err());
}

#[test]
fn dynamic_direct_regularizer_is_exact_for_blocks() {
    let spec = ModeSpec::new(Mode::DynamicDirect, 1, 2, 0);
    let mut p = Params::zeros(&spec).unwrap();
    let model = spec.model().unwrap();
    if let Core::Direct(blocks) = &mut p.core {
        for (b, th) in blocks.iter_mut().enumerate() {
            th[1] = Tensor::vector(vec![b as f64 + 1.0]);
        }
    }
    let integ = IntegratorSpec::rk4(0.1, 1.0).unwrap();
    let log = evaluate(&spec, &p, &Tensor::zeros(&[1, 1]), &integ, false).unwrap();
    // Σ_b 0.2 · ½ (b+1)²
    let want: f64 = (1..=5).map(|b| 0.2 * 0.5 * (b * b) as f64).sum();
    assert!((regularizer_integral(&model, &log).unwrap() - want).abs() < 1e-12);
}
