//! Vector fields that are linear in their parameters, quadratic penalties,
//! and the particle shooting system built on them.
//!
//! All states are stored row-wise: a batch of `n` points in `ℝ^w` is an
//! `n × w` matrix, so data states and particle positions go through the same
//! code path. A state is a list of slots (`[x]` for the linear field,
//! `[x, v]` for UpDown); `θ` is likewise a list of tensors whose order is
//! given by [`FieldModel::theta_names`].

mod auto;
mod shooting;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use auto::{auto_solve_quadratic, auto_solve_theta, compatibility_residual};
pub(crate) use shooting::hamiltonian_var;
pub use shooting::{hamiltonian, shooting_rhs, BundleLayout, ShootingAux};

/// Penalty weights of the UpDown parameters, `R = ½ Σ w_k ‖θ_k‖²_F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpDownWeights {
    pub theta1: f64,
    pub b1: f64,
    pub theta2: f64,
    pub b2: f64,
    pub theta3: f64,
}

impl Default for UpDownWeights {
    fn default() -> Self {
        Self {
            theta1: 1.0,
            b1: 1.0,
            theta2: 1.0,
            b2: 1.0,
            theta3: 10.0,
        }
    }
}

impl UpDownWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            theta1: w,
            b1: w,
            theta2: w,
            b2: w,
            theta3: w,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.theta1, self.b1, self.theta2, self.b2, self.theta3]
    }
}

/// The UpDown field on `(x, v) ∈ ℝ^d × ℝ^{αd}`:
///
/// ```text
/// ẋ = θ₁ σ(v) + b₁
/// v̇ = θ₂ x + b₂ + θ₃ σ(v)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct UpDownModel {
    pub d: usize,
    pub alpha: usize,
    pub activation: Activation,
    pub weights: UpDownWeights,
}

impl UpDownModel {
    pub fn new(d: usize, alpha: usize, activation: Activation, weights: UpDownWeights) -> Result<Self> {
        if d == 0 || alpha == 0 {
            return Err(Error::InvalidSpec(format!(
                "UpDown needs d ≥ 1 and α ≥ 1 (got d={d}, α={alpha})"
            )));
        }
        if !weights.as_array().iter().all(|w| *w > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "penalty weights must be positive: {weights:?}"
            )));
        }
        Ok(Self {
            d,
            alpha,
            activation,
            weights,
        })
    }

    pub fn hidden(&self) -> usize {
        self.alpha * self.d
    }
}

/// `f(x) = A σ(x) + b` with `R = ½ tr(Aᵀ M_A A) + ½ bᵀ M_b b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub d: usize,
    pub activation: Activation,
    m_a: Tensor,
    m_b: Tensor,
    m_a_inv: Tensor,
    m_b_inv: Tensor,
}

impl LinearModel {
    /// Penalty matrices `M_A = a·I`, `M_b = b·I`.
    pub fn scalar(d: usize, activation: Activation, a: f64, b: f64) -> Result<Self> {
        Self::new(d, activation, Tensor::eye(d).scale(a), Tensor::eye(d).scale(b))
    }

    pub fn new(d: usize, activation: Activation, m_a: Tensor, m_b: Tensor) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidSpec("linear field needs d ≥ 1".into()));
        }
        let m_a_inv = spd_inverse(&m_a, d, "M_A")?;
        let m_b_inv = spd_inverse(&m_b, d, "M_b")?;
        Ok(Self {
            d,
            activation,
            m_a,
            m_b,
            m_a_inv,
            m_b_inv,
        })
    }

    pub fn m_a(&self) -> &Tensor {
        &self.m_a
    }

    pub fn m_b(&self) -> &Tensor {
        &self.m_b
    }
}

fn spd_inverse(m: &Tensor, d: usize, name: &str) -> Result<Tensor> {
    if m.shape() != [d, d] {
        return Err(Error::InvalidSpec(format!(
            "{name} must be {d}×{d}, got {:?}",
            m.shape()
        )));
    }
    let mat = DMatrix::from_row_slice(d, d, m.data());
    let asym = (&mat - mat.transpose()).amax();
    if asym > 1e-12 * mat.amax().max(1.0) {
        return Err(Error::InvalidSpec(format!("{name} is not symmetric")));
    }
    let chol = mat
        .cholesky()
        .ok_or_else(|| Error::InvalidSpec(format!("{name} is not positive definite")))?;
    let inv = chol.inverse();
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            // symmetrize so M⁻¹ is exactly symmetric
            data.push(0.5 * (inv[(i, j)] + inv[(j, i)]));
        }
    }
    Ok(Tensor::matrix(d, d, data)?)
}

/// A field that is linear in its parameters, with a strictly convex
/// quadratic penalty. Both in-scope models implement the same interface.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldModel {
    Linear(LinearModel),
    UpDown(UpDownModel),
}

impl From<UpDownModel> for FieldModel {
    fn from(m: UpDownModel) -> Self {
        FieldModel::UpDown(m)
    }
}

impl From<LinearModel> for FieldModel {
    fn from(m: LinearModel) -> Self {
        FieldModel::Linear(m)
    }
}

impl FieldModel {
    /// Data dimension `d`.
    pub fn data_dim(&self) -> usize {
        match self {
            FieldModel::Linear(m) => m.d,
            FieldModel::UpDown(m) => m.d,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            FieldModel::Linear(m) => m.activation,
            FieldModel::UpDown(m) => m.activation,
        }
    }

    /// Widths of the state slots; their sum is the particle size `S`.
    pub fn state_widths(&self) -> Vec<usize> {
        match self {
            FieldModel::Linear(m) => vec![m.d],
            FieldModel::UpDown(m) => vec![m.d, m.hidden()],
        }
    }

    pub fn state_names(&self) -> &'static [&'static str] {
        match self {
            FieldModel::Linear(_) => &["x"],
            FieldModel::UpDown(_) => &["x", "v"],
        }
    }

    pub fn particle_size(&self) -> usize {
        self.state_widths().iter().sum()
    }

    pub fn theta_names(&self) -> &'static [&'static str] {
        match self {
            FieldModel::Linear(_) => &["A", "b"],
            FieldModel::UpDown(_) => &["theta1", "b1", "theta2", "b2", "theta3"],
        }
    }

    pub fn theta_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            FieldModel::Linear(m) => vec![vec![m.d, m.d], vec![m.d]],
            FieldModel::UpDown(m) => {
                let (d, h) = (m.d, m.hidden());
                vec![vec![d, h], vec![d], vec![h, d], vec![h], vec![h, h]]
            }
        }
    }

    /// Number of scalar entries in one `θ`.
    pub fn theta_len(&self) -> usize {
        self.theta_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn zero_theta(&self) -> Vec<Tensor> {
        self.theta_shapes().iter().map(|s| Tensor::zeros(s)).collect()
    }

    pub fn check_theta(&self, theta: &[Tensor]) -> Result<()> {
        let shapes = self.theta_shapes();
        if theta.len() != shapes.len() {
            return Err(Error::InvalidSpec(format!(
                "θ has {} components, model expects {}",
                theta.len(),
                shapes.len()
            )));
        }
        for ((t, s), name) in theta.iter().zip(&shapes).zip(self.theta_names()) {
            if t.shape() != s.as_slice() {
                return Err(Error::InvalidSpec(format!(
                    "{name}: expected shape {s:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Checks that `state` is a list of `n × w` matrices matching the slot
    /// widths, with a common `n`. Returns `n`.
    pub fn check_state(&self, state: &[Tensor]) -> Result<usize> {
        let widths = self.state_widths();
        if state.len() != widths.len() {
            return Err(Error::InvalidSpec(format!(
                "state has {} slots, model expects {}",
                state.len(),
                widths.len()
            )));
        }
        let n = state[0].rows();
        for (s, &w) in state.iter().zip(&widths) {
            if s.rank() != 2 || s.cols() != w || s.rows() != n {
                return Err(crate::error::ShapeError::Mismatch {
                    op: "state",
                    lhs: vec![n, w],
                    rhs: s.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(n)
    }

    /// Evaluates the field row-wise.
    pub fn field<'t>(&self, state: &[Var<'t>], theta: &[Var<'t>]) -> Vec<Var<'t>> {
        match self {
            FieldModel::Linear(m) => {
                let s = state[0].activation(m.activation);
                vec![s.matmul(theta[0].t()).add_row(theta[1])]
            }
            FieldModel::UpDown(m) => {
                let (x, v) = (state[0], state[1]);
                let sv = v.activation(m.activation);
                let dx = sv.matmul(theta[0].t()).add_row(theta[1]);
                let dv = x.matmul(theta[2].t()).add_row(theta[3]) + sv.matmul(theta[4].t());
                vec![dx, dv]
            }
        }
    }

    /// `R(θ)`.
    pub fn penalty<'t>(&self, theta: &[Var<'t>]) -> Var<'t> {
        match self {
            FieldModel::Linear(m) => {
                let tape = theta[0].tape();
                let ma = tape.var(m.m_a.clone());
                let mb = tape.var(m.m_b.clone());
                let a = theta[0];
                let b = theta[1].broadcast_rows(1);
                let ra = a.dot(ma.matmul(a));
                let rb = b.dot(b.matmul(mb));
                (ra + rb).scale(0.5)
            }
            FieldModel::UpDown(m) => {
                let w = m.weights.as_array();
                let mut terms = theta.iter().zip(w).map(|(t, wk)| t.sum_sq().scale(0.5 * wk));
                let first = terms.next().expect("UpDown θ has five components");
                terms.fold(first, |acc, t| acc + t)
            }
        }
    }

    /// `R(θ)` for plain tensors.
    pub fn penalty_value(&self, theta: &[Tensor]) -> f64 {
        let tape = Tape::untaped();
        let vars: Vec<Var> = theta.iter().map(|t| tape.var(t.clone())).collect();
        self.penalty(&vars).item()
    }

    /// Closed-form solution of the compatibility equation
    /// `∂_θ R(θ) = Σ_j ∂_θ f(q_j, θ)ᵀ p_j` for particle positions `q` and
    /// momenta `p` (each a list of `K × w` slot matrices).
    pub fn solve_theta<'t>(&self, q: &[Var<'t>], p: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let k = q[0].with_value(Tensor::rows);
        if k == 0 {
            return Err(Error::DegenerateEnsemble);
        }
        Ok(match self {
            FieldModel::Linear(m) => {
                let tape = q[0].tape();
                let sq = q[0].activation(m.activation);
                let pt = p[0].t();
                let a = tape.var(m.m_a_inv.clone()).matmul(pt.matmul(sq));
                let b = p[0]
                    .sum_rows()
                    .broadcast_rows(1)
                    .matmul(tape.var(m.m_b_inv.clone()))
                    .sum_rows();
                vec![a, b]
            }
            FieldModel::UpDown(m) => {
                let w = &m.weights;
                let (qx, qv) = (q[0], q[1]);
                let (px, pv) = (p[0], p[1]);
                let sv = qv.activation(m.activation);
                let pxt = px.t();
                let pvt = pv.t();
                vec![
                    pxt.matmul(sv).scale(1.0 / w.theta1),
                    px.sum_rows().scale(1.0 / w.b1),
                    pvt.matmul(qx).scale(1.0 / w.theta2),
                    pv.sum_rows().scale(1.0 / w.b2),
                    pvt.matmul(sv).scale(1.0 / w.theta3),
                ]
            }
        })
    }

    /// Tensor-level convenience for [`FieldModel::field`].
    pub fn eval_field(&self, state: &[Tensor], theta: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_state(state)?;
        self.check_theta(theta)?;
        let tape = Tape::untaped();
        let s: Vec<Var> = state.iter().map(|t| tape.var(t.clone())).collect();
        let th: Vec<Var> = theta.iter().map(|t| tape.var(t.clone())).collect();
        Ok(self.field(&s, &th).iter().map(Var::value).collect())
    }

    /// Tensor-level convenience for [`FieldModel::solve_theta`].
    pub fn eval_solve_theta(&self, ensemble: &Ensemble) -> Result<Vec<Tensor>> {
        ensemble.check(self)?;
        let tape = Tape::untaped();
        let (q, p) = ensemble.leaves(&tape);
        Ok(self.solve_theta(&q, &p)?.iter().map(Var::value).collect())
    }
}

/// `K` particles: positions `q` and momenta `p`, stored slot-wise as
/// `K × w` matrices (`[x]` or `[x, v]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub q: Vec<Tensor>,
    pub p: Vec<Tensor>,
}

impl Ensemble {
    pub fn new(q: Vec<Tensor>, p: Vec<Tensor>) -> Self {
        Self { q, p }
    }

    pub fn zeros(model: &FieldModel, k: usize) -> Self {
        let slots = |_: ()| model.state_widths().iter().map(|&w| Tensor::zeros(&[k, w])).collect();
        Self {
            q: slots(()),
            p: slots(()),
        }
    }

    pub fn num_particles(&self) -> usize {
        self.q.first().map_or(0, Tensor::rows)
    }

    pub fn check(&self, model: &FieldModel) -> Result<usize> {
        let k = model.check_state(&self.q)?;
        let kp = model.check_state(&self.p)?;
        if k != kp {
            return Err(Error::InvalidSpec(format!("{k} positions but {kp} momenta")));
        }
        if k == 0 {
            return Err(Error::DegenerateEnsemble);
        }
        Ok(k)
    }

    pub fn leaves<'t>(&self, tape: &'t Tape) -> (Vec<Var<'t>>, Vec<Var<'t>>) {
        (
            self.q.iter().map(|t| tape.var(t.clone())).collect(),
            self.p.iter().map(|t| tape.var(t.clone())).collect(),
        )
    }

    /// Momenta multiplied by `c`.
    pub fn scale_momenta(&self, c: f64) -> Self {
        Self {
            q: self.q.clone(),
            p: self.p.iter().map(|t| t.scale(c)).collect(),
        }
    }
}

/// The learned map `v(0) = Θ₁₂ x(0) + b₁₂` that initializes the hidden
/// state of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLift {
    /// `αd × d`
    pub weight: Tensor,
    /// `αd`
    pub bias: Tensor,
}

impl AffineLift {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[hidden, d]),
            bias: Tensor::zeros(&[hidden]),
        }
    }

    pub fn apply<'t>(weight: Var<'t>, bias: Var<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(weight.t()).add_row(bias)
    }
}
