//! Weights from the Hamiltonian alone: `θ = argmin_θ H(p, q, θ)`, assembled
//! with the differentiation engine instead of the hand-derived closed form.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::shooting::hamiltonian_var;
use super::{Ensemble, FieldModel};

fn flatten(parts: &[Tensor]) -> Vec<f64> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, flat[off..off + n].to_vec()).expect("shape product matches slice");
            off += n;
            t
        })
        .collect()
}

/// Minimizes a scalar function `h(θ)` that is a strictly convex quadratic in
/// `θ` (a list of tensors with the given shapes).
///
/// The gradient at `θ = 0` and the Hessian (by differentiating the recorded
/// gradient once more) are taken from the tape, then `∇h = 0` is solved by
/// Cholesky. The quadratic assumption is verified at a random probe point;
/// anything else is reported as an unsupported model.
pub fn auto_solve_quadratic<F>(shapes: &[Vec<usize>], h: F) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let tape = Tape::new();
    let theta0: Vec<Var> = shapes.iter().map(|s| tape.var(Tensor::zeros(s))).collect();
    let h0 = h(&tape, &theta0);
    let grad_vars = tape.grad_graph(h0, &theta0)?;
    let g0 = flatten(&grad_vars.iter().map(Var::value).collect::<Vec<_>>());

    let mut hess = DMatrix::<f64>::zeros(n, n);
    let mut row = 0;
    for (gs, shape) in grad_vars.iter().zip(shapes) {
        let len: usize = shape.iter().product();
        for i in 0..len {
            let mut e = Tensor::zeros(shape);
            e.data_mut()[i] = 1.0;
            let component = gs.dot(tape.var(e));
            let col = flatten(&tape.grad(component, &theta0)?);
            for (j, v) in col.into_iter().enumerate() {
                hess[(row, j)] = v;
            }
            row += 1;
        }
    }

    // quadratic check: ∇h(θ_r) must equal G θ_r + ∇h(0)
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let probe: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe_tape = Tape::new();
    let probe_vars: Vec<Var> = unflatten(&probe, shapes)
        .into_iter()
        .map(|t| probe_tape.var(t))
        .collect();
    let hp = h(&probe_tape, &probe_vars);
    let gp = flatten(&probe_tape.grad(hp, &probe_vars)?);
    let predicted = &hess * DVector::from_column_slice(&probe) + DVector::from_column_slice(&g0);
    let scale = 1.0 + gp.iter().fold(0.0f64, |m, v| m.max(v.abs())) + hess.amax();
    let mismatch = gp
        .iter()
        .zip(predicted.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    // negated so that NaN is rejected
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(mismatch <= 1e-9 * scale) {
        return Err(Error::UnsupportedModel(format!(
            "Hamiltonian is not quadratic in θ (gradient mismatch {mismatch:.3e})"
        )));
    }
    let sym = (&hess - hess.transpose()).amax();
    if sym > 1e-9 * (1.0 + hess.amax()) {
        return Err(Error::UnsupportedModel("Hessian in θ is not symmetric".into()));
    }

    let chol = hess
        .clone()
        .cholesky()
        .ok_or_else(|| Error::UnsupportedModel("Hamiltonian is not strictly convex in θ".into()))?;
    let rhs = -DVector::from_column_slice(&g0);
    let sol = chol.solve(&rhs);
    Ok(unflatten(sol.as_slice(), shapes))
}

/// `θ = argmin_θ H(p, q, θ)` for the given ensemble, via
/// [`auto_solve_quadratic`]. Agrees with [`FieldModel::solve_theta`].
pub fn auto_solve_theta(model: &FieldModel, ensemble: &Ensemble) -> Result<Vec<Tensor>> {
    ensemble.check(model)?;
    auto_solve_quadratic(&model.theta_shapes(), |tape, theta| {
        let (q, p) = ensemble.leaves(tape);
        hamiltonian_var(model, &q, &p, theta)
    })
}

/// `‖∂_θ R(θ) − Σ_j ∂_θ f(q_j, θ)ᵀ p_j‖_∞`, i.e. the sup-norm of `∂H/∂θ`,
/// computed by a reverse sweep.
pub fn compatibility_residual(model: &FieldModel, ensemble: &Ensemble, theta: &[Tensor]) -> Result<f64> {
    ensemble.check(model)?;
    model.check_theta(theta)?;
    let tape = Tape::new();
    let (q, p) = ensemble.leaves(&tape);
    let th: Vec<Var> = theta.iter().map(|t| tape.var(t.clone())).collect();
    let h = hamiltonian_var(model, &q, &p, &th);
    let g = tape.grad(h, &th)?;
    Ok(g.iter().map(Tensor::max_abs).fold(0.0, f64::max))
}
