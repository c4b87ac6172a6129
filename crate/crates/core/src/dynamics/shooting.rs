use crate::autodiff::{Tape, Var};
use crate::error::Result;

use super::{Ensemble, FieldModel};

/// Slot layout of a shooting bundle: optional data slots, then particle
/// positions, then particle momenta. Each group has one slot per model state
/// slot (`[x]` or `[x, v]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BundleLayout {
    pub with_data: bool,
    pub slots: usize,
}

impl BundleLayout {
    pub fn new(model: &FieldModel, with_data: bool) -> Self {
        Self {
            with_data,
            slots: model.state_widths().len(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots * if self.with_data { 3 } else { 2 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits a bundle into `(data, q, p)`.
    pub fn split<'a, T>(&self, bundle: &'a [T]) -> (&'a [T], &'a [T], &'a [T]) {
        let s = self.slots;
        let off = if self.with_data { s } else { 0 };
        (&bundle[..off], &bundle[off..off + s], &bundle[off + s..off + 2 * s])
    }

    pub fn assemble<T: Clone>(&self, data: &[T], q: &[T], p: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        if self.with_data {
            out.extend_from_slice(data);
        }
        out.extend_from_slice(q);
        out.extend_from_slice(p);
        out
    }
}

/// Side-channel output of [`shooting_rhs`]: the weights at the evaluation
/// point and the Hamiltonian value.
#[derive(Debug, Clone)]
pub struct ShootingAux<'t> {
    pub theta: Vec<Var<'t>>,
    pub hamiltonian: Var<'t>,
}

pub(crate) fn hamiltonian_var<'t>(model: &FieldModel, q: &[Var<'t>], p: &[Var<'t>], theta: &[Var<'t>]) -> Var<'t> {
    let f = model.field(q, theta);
    let mut h = model.penalty(theta);
    for (ps, fs) in p.iter().zip(&f) {
        h = h - ps.dot(*fs);
    }
    h
}

/// `H(p, q, θ) = R(θ) − Σ_j p_jᵀ f(q_j, θ)`.
pub fn hamiltonian(model: &FieldModel, ensemble: &Ensemble, theta: &[crate::Tensor]) -> Result<f64> {
    ensemble.check(model)?;
    model.check_theta(theta)?;
    let tape = Tape::untaped();
    let (q, p) = ensemble.leaves(&tape);
    let th: Vec<Var> = theta.iter().map(|t| tape.var(t.clone())).collect();
    Ok(hamiltonian_var(model, &q, &p, &th).item())
}

/// Right-hand side of the particle shooting system.
///
/// `θ` is recovered from the particles by the closed-form compatibility
/// solve. Data states and particle positions move along `f(·, θ)`; momenta
/// follow `ṗ = −(∂_q f)ᵀ p`, which for `H = R − pᵀf` is `+∂H/∂q` and is
/// obtained by a recorded reverse sweep of `H`, so the result stays
/// differentiable.
pub fn shooting_rhs<'t>(
    model: &FieldModel,
    layout: &BundleLayout,
    bundle: &[Var<'t>],
) -> Result<(Vec<Var<'t>>, ShootingAux<'t>)> {
    let (data, q, p) = layout.split(bundle);
    let theta = model.solve_theta(q, p)?;
    let h = hamiltonian_var(model, q, p, &theta);
    let tape = h.tape();
    let p_dot = tape.grad_graph(h, q)?;
    let q_dot = model.field(q, &theta);
    let data_dot = if layout.with_data {
        model.field(data, &theta)
    } else {
        Vec::new()
    };
    let out = layout.assemble(&data_dot, &q_dot, &p_dot);
    Ok((out, ShootingAux { theta, hamiltonian: h }))
}
