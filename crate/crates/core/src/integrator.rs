//! Fixed-step explicit integration (forward Euler, classical RK4).
//!
//! Stepping is written against the [`State`] trait, so the same code runs on
//! plain numbers, tensors, and taped bundles. With taped bundles the whole
//! rollout is recorded and can be differentiated afterwards
//! (discretize-then-differentiate).

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    #[default]
    Rk4,
}

impl Scheme {
    pub fn stages(self) -> usize {
        match self {
            Scheme::Euler => 1,
            Scheme::Rk4 => 4,
        }
    }
}

const GRID_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub scheme: Scheme,
    pub step: f64,
    pub horizon: f64,
}

impl IntegratorSpec {
    pub fn new(scheme: Scheme, step: f64, horizon: f64) -> Result<Self> {
        let spec = Self { scheme, step, horizon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rk4(step: f64, horizon: f64) -> Result<Self> {
        Self::new(Scheme::Rk4, step, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "integrator step must be positive, got {}",
                self.step
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "integration horizon must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Same scheme and step over a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Self {
        Self { horizon, ..*self }
    }

    /// Grid points `0 = t_0 < … < t_N = T`. When the step does not divide
    /// the horizon, the last step is shortened.
    pub fn grid(&self) -> Vec<f64> {
        let ratio = self.horizon / self.step;
        let nearest = ratio.round();
        let mut times: Vec<f64>;
        if nearest >= 1.0 && (ratio - nearest).abs() <= GRID_TOL * ratio.max(1.0) {
            let n = nearest as usize;
            times = (0..n).map(|k| k as f64 * self.step).collect();
        } else {
            let full = ratio.floor() as usize;
            times = (0..=full).map(|k| k as f64 * self.step).collect();
        }
        times.push(self.horizon);
        times
    }

    /// Length of every step: exactly `step`, except a shortened last one.
    pub fn step_sizes(&self) -> Vec<f64> {
        let times = self.grid();
        let n = times.len() - 1;
        let exact = self.divides_horizon();
        (0..n)
            .map(|k| {
                if exact || k + 1 < n {
                    self.step
                } else {
                    times[n] - times[n - 1]
                }
            })
            .collect()
    }

    pub fn num_steps(&self) -> usize {
        self.grid().len() - 1
    }

    /// True when the step divides the horizon (no shortened last step).
    pub fn divides_horizon(&self) -> bool {
        let ratio = self.horizon / self.step;
        (ratio - ratio.round()).abs() <= GRID_TOL * ratio.max(1.0) && ratio.round() >= 1.0
    }
}

/// Anything that supports `y + c·dy` and a finiteness check.
pub trait State: Clone {
    fn axpy(&self, c: f64, d: &Self) -> Self;
    fn is_finite(&self) -> bool;
}

impl State for f64 {
    fn axpy(&self, c: f64, d: &Self) -> Self {
        self + c * d
    }
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

impl State for Tensor {
    fn axpy(&self, c: f64, d: &Self) -> Self {
        Tensor::axpy(self, c, d).expect("state slot shapes are fixed over a rollout")
    }
    fn is_finite(&self) -> bool {
        Tensor::is_finite(self)
    }
}

impl State for Var<'_> {
    fn axpy(&self, c: f64, d: &Self) -> Self {
        Var::axpy(*self, c, *d)
    }
    fn is_finite(&self) -> bool {
        self.with_value(Tensor::is_finite)
    }
}

impl<S: State> State for Vec<S> {
    fn axpy(&self, c: f64, d: &Self) -> Self {
        debug_assert_eq!(self.len(), d.len());
        self.iter().zip(d).map(|(a, b)| a.axpy(c, b)).collect()
    }
    fn is_finite(&self) -> bool {
        self.iter().all(State::is_finite)
    }
}

/// A taped state: one variable per slot. Slot order is fixed by whoever
/// builds the bundle (see `dynamics::BundleLayout`).
pub type StateBundle<'t> = Vec<Var<'t>>;

/// Output of [`integrate`].
#[derive(Debug, Clone)]
pub struct Trajectory<S, A> {
    /// Grid times `t_0..=t_N`.
    pub times: Vec<f64>,
    /// States on the grid when recorded, otherwise only `[y_N]`.
    pub states: Vec<S>,
    /// Side-channel output of the right-hand side at every grid point.
    pub aux: Vec<A>,
    /// Side-channel output at every stage evaluation, with its time.
    pub stage_aux: Vec<Vec<(f64, A)>>,
    pub recorded: bool,
}

impl<S, A> Trajectory<S, A> {
    pub fn final_state(&self) -> &S {
        self.states.last().expect("trajectory holds at least the final state")
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }
}

/// Integrates `dy/dt = rhs(t, y)` from `y0` over `spec`.
///
/// `rhs` returns the derivative plus an auxiliary value (weights, energy, …)
/// which is collected at every grid point and every stage. The final grid
/// point costs one extra evaluation so that its auxiliary value is available.
pub fn integrate<S, A, F>(mut rhs: F, y0: S, spec: &IntegratorSpec, record: bool) -> Result<Trajectory<S, A>>
where
    S: State,
    A: Clone,
    F: FnMut(f64, &S) -> Result<(S, A)>,
{
    spec.validate()?;
    let times = spec.grid();
    let sizes = spec.step_sizes();
    let n_steps = sizes.len();
    let mut states = Vec::with_capacity(if record { n_steps + 1 } else { 1 });
    let mut aux = Vec::with_capacity(n_steps + 1);
    let mut stage_aux = Vec::with_capacity(n_steps);
    let mut y = y0;
    if record {
        states.push(y.clone());
    }
    for n in 0..n_steps {
        let t = times[n];
        let h = sizes[n];
        let (next, stages) = match spec.scheme {
            Scheme::Euler => {
                let (k1, a1) = rhs(t, &y)?;
                (y.axpy(h, &k1), vec![(t, a1)])
            }
            Scheme::Rk4 => {
                let (k1, a1) = rhs(t, &y)?;
                let (k2, a2) = rhs(t + 0.5 * h, &y.axpy(0.5 * h, &k1))?;
                let (k3, a3) = rhs(t + 0.5 * h, &y.axpy(0.5 * h, &k2))?;
                let (k4, a4) = rhs(t + h, &y.axpy(h, &k3))?;
                let next = y
                    .axpy(h / 6.0, &k1)
                    .axpy(h / 3.0, &k2)
                    .axpy(h / 3.0, &k3)
                    .axpy(h / 6.0, &k4);
                (next, vec![(t, a1), (t + 0.5 * h, a2), (t + 0.5 * h, a3), (t + h, a4)])
            }
        };
        if !next.is_finite() {
            return Err(Error::Divergence { step: n });
        }
        aux.push(stages[0].1.clone());
        stage_aux.push(stages);
        y = next;
        if record {
            states.push(y.clone());
        }
    }
    let (_, a_end) = rhs(times[n_steps], &y)?;
    aux.push(a_end);
    if !record {
        states.push(y);
    }
    Ok(Trajectory {
        times,
        states,
        aux,
        stage_aux,
        recorded: record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn exp_rollout(scheme: Scheme, h: f64) -> f64 {
        let spec = IntegratorSpec::new(scheme, h, 1.0).unwrap();
        let traj = integrate(|_, y: &f64| Ok((*y, ())), 1.0, &spec, false).unwrap();
        *traj.final_state()
    }

    #[test]
    fn zero_field_is_identity() {
        let spec = IntegratorSpec::rk4(0.1, 1.0).unwrap();
        let y0 = Tensor::vector(vec![1.5, -2.0]);
        let traj = integrate(
            |_, y: &Tensor| Ok((Tensor::zeros(y.shape()), ())),
            y0.clone(),
            &spec,
            true,
        )
        .unwrap();
        assert_eq!(traj.final_state(), &y0);
        assert_eq!(traj.states.len(), 11);
    }

    #[test]
    fn rk4_exponential() {
        // per-step factor 1 + h + h²/2 + h³/6 + h⁴/24
        let h: f64 = 0.1;
        let expected = (1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0).powi(10);
        assert!((exp_rollout(Scheme::Rk4, h) - expected).abs() < 1e-13);
        assert!((expected - std::f64::consts::E).abs() < 3e-6);
    }

    #[test]
    fn euler_exponential_is_compound_product() {
        let expected = 1.1f64.powi(10);
        assert!((exp_rollout(Scheme::Euler, 0.1) - expected).abs() < 1e-12);
        assert!((expected - 2.5937424601).abs() < 1e-10);
    }

    #[test]
    fn rk4_convergence_order() {
        let e1 = (exp_rollout(Scheme::Rk4, 0.1) - std::f64::consts::E).abs();
        let e2 = (exp_rollout(Scheme::Rk4, 0.05) - std::f64::consts::E).abs();
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn grid_shortens_last_step() {
        let spec = IntegratorSpec::rk4(0.3, 1.0).unwrap();
        let g = spec.grid();
        assert_eq!(g.len(), 5);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!((g[3] - 0.9).abs() < 1e-15);
        assert!(!spec.divides_horizon());
        let spec = IntegratorSpec::rk4(0.1, 1.0).unwrap();
        assert_eq!(spec.grid().len(), 11);
        assert!(spec.divides_horizon());
        assert_eq!(IntegratorSpec::rk4(0.05, 0.25).unwrap().num_steps(), 5);
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(IntegratorSpec::rk4(0.0, 1.0).is_err());
        assert!(IntegratorSpec::rk4(0.1, -1.0).is_err());
    }

    #[test]
    fn divergence_names_step() {
        let spec = IntegratorSpec::new(Scheme::Euler, 0.1, 1.0).unwrap();
        let err = integrate(
            |t, y: &f64| Ok((if t > 0.25 { f64::INFINITY } else { *y }, ())),
            1.0,
            &spec,
            false,
        )
        .unwrap_err();
        assert_eq!(err, Error::Divergence { step: 3 });
    }

    #[test]
    fn deterministic() {
        let spec = IntegratorSpec::rk4(0.1, 1.0).unwrap();
        let f = |_: f64, y: &Tensor| Ok((y.map(|v| v.sin() * 1.3), ()));
        let y0 = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let a = integrate(f, y0.clone(), &spec, true).unwrap();
        let b = integrate(f, y0, &spec, true).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn taped_rollout_is_differentiable() {
        // x(1) = x0·e^{a} for ẋ = a x, so dx(1)/dx0 ≈ e^{a}
        let tape = Tape::new();
        let x0 = tape.var(Tensor::scalar(2.0));
        let a = tape.var(Tensor::scalar(0.5));
        let spec = IntegratorSpec::rk4(0.05, 1.0).unwrap();
        let traj = integrate(|_, y: &Var| Ok((y.mul_scalar(a), ())), x0, &spec, false).unwrap();
        let g = tape.grad(*traj.final_state(), &[x0, a]).unwrap();
        assert!((g[0].item() - 0.5f64.exp()).abs() < 1e-7);
        assert!((g[1].item() - 2.0 * 0.5f64.exp()).abs() < 1e-6);
    }
}
