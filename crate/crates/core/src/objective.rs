//! Training objective `λ_reg ∫₀ᵀ R(θ(t)) dt + γ · loss`, and the complexity
//! metric `∫₀ᵀ log₂ ‖θ(t)‖_F dt`.
//!
//! Time integrals use the trapezoid rule on the integration grid. The data
//! loss is a mean over samples (and entries), so `γ` does not have to be
//! retuned when the batch size changes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dynamics::FieldModel;
use crate::error::{Error, Result, ShapeError};
use crate::integrator::IntegratorSpec;
use crate::parameterizations::{forward, ModeSpec, Params, Readout, Rollout, TrajectoryLog};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared error of `x(T)` against an `n × d` target.
    #[default]
    Mse,
    /// Squared error at every grid point after `t = 0`; targets are
    /// `n × (steps·d)`, grid point `s` in columns `(s−1)d..sd`.
    MseTrajectory,
    /// Logistic loss of the affine readout of `x(T)`; targets `n × 1` in `{0, 1}`.
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub loss: LossKind,
    pub gamma: f64,
    pub lambda_reg: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            loss: LossKind::Mse,
            gamma: 100.0,
            lambda_reg: 1.0,
        }
    }
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidSpec(format!("γ must be positive, got {}", self.gamma)));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "λ_reg must be non-negative, got {}",
                self.lambda_reg
            )));
        }
        Ok(())
    }
}

/// Value of each term of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts<T> {
    pub data: T,
    pub regularizer: T,
    pub total: T,
}

fn trapezoid<'t, T, F>(log: &TrajectoryLog<T>, mut integrand: F) -> Result<Option<Var<'t>>>
where
    F: FnMut(usize, &[T]) -> Result<Var<'t>>,
{
    let steps = log.times.len().saturating_sub(1);
    if steps == 0 || log.theta.len() != log.times.len() {
        return Err(Error::EmptyLog);
    }
    let mut acc: Option<Var<'t>> = None;
    let mut left = integrand(0, &log.theta[0])?;
    for n in 0..steps {
        let (_, right_theta) = log.step_theta(n);
        let right = integrand(n + 1, right_theta)?;
        let h = log.times[n + 1] - log.times[n];
        let term = (left + right).scale(0.5 * h);
        acc = Some(match acc {
            None => term,
            Some(a) => a + term,
        });
        left = if log.theta_breaks.iter().any(|(i, _)| *i == n + 1) {
            integrand(n + 1, &log.theta[n + 1])?
        } else {
            right
        };
    }
    Ok(acc)
}

/// `∫₀ᵀ R(θ(t)) dt` on the tape of the rollout.
pub fn regularizer_integral_var<'t>(model: &FieldModel, log: &Rollout<'t>) -> Result<Var<'t>> {
    let value = trapezoid(log, |_, th| Ok(model.penalty(th)))?;
    Ok(value.expect("at least one step"))
}

/// `∫₀ᵀ R(θ(t)) dt` of a recorded log.
pub fn regularizer_integral(model: &FieldModel, log: &TrajectoryLog) -> Result<f64> {
    for th in &log.theta {
        model.check_theta(th)?;
    }
    let tape = Tape::untaped();
    let value = trapezoid(log, |_, th: &[Tensor]| {
        let vars: Vec<Var> = th.iter().map(|t| tape.var(t.clone())).collect();
        Ok(model.penalty(&vars))
    })?;
    Ok(value.expect("at least one step").item())
}

/// `∫₀ᵀ log₂ ‖θ(t)‖_F dt`, with `θ(t)` all weight and bias components
/// concatenated and unweighted.
pub fn complexity_metric(log: &TrajectoryLog) -> Result<f64> {
    let tape = Tape::untaped();
    let value = trapezoid(log, |index, th: &[Tensor]| {
        let norm = th.iter().map(Tensor::frobenius_sq).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::UndefinedMetric { index });
        }
        Ok(tape.scalar(norm.log2()))
    })?;
    Ok(value.expect("at least one step").item())
}

fn check_targets(op: &'static str, targets: &Tensor, want: &[usize]) -> Result<()> {
    if targets.shape() != want {
        return Err(ShapeError::Mismatch {
            op,
            lhs: want.to_vec(),
            rhs: targets.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Mean data loss of a rollout.
pub fn data_loss_var<'t>(
    kind: LossKind,
    log: &Rollout<'t>,
    readout: Option<(Var<'t>, Var<'t>)>,
    targets: &Tensor,
) -> Result<Var<'t>> {
    let x_t = log.final_state()[0];
    let tape = x_t.tape();
    let shape = x_t.shape();
    let (n, d) = (shape[0], shape[1]);
    match kind {
        LossKind::Mse => {
            check_targets("mse targets", targets, &[n, d])?;
            let diff = x_t - tape.var(targets.clone());
            Ok(diff.sum_sq().scale(1.0 / (n * d).max(1) as f64))
        }
        LossKind::MseTrajectory => {
            if !log.recorded {
                return Err(Error::InvalidSpec("trajectory loss needs a recorded rollout".into()));
            }
            let steps = log.states.len() - 1;
            check_targets("trajectory targets", targets, &[n, steps * d])?;
            let mut acc: Option<Var<'t>> = None;
            for s in 1..=steps {
                let y = targets.slice_cols((s - 1) * d, s * d)?;
                let term = (log.states[s][0] - tape.var(y)).sum_sq();
                acc = Some(match acc {
                    None => term,
                    Some(a) => a + term,
                });
            }
            Ok(acc
                .expect("at least one step")
                .scale(1.0 / (n * d * steps).max(1) as f64))
        }
        LossKind::BinaryCrossEntropy => {
            check_targets("labels", targets, &[n, 1])?;
            let (w, b) = readout.ok_or_else(|| Error::InvalidSpec("classification needs a readout".into()))?;
            let z = Readout::apply(w, b, x_t);
            // softplus(z) − y·z = −[y log σ(z) + (1−y) log(1−σ(z))]
            let loss = z.softplus() - z.mul_const(targets.clone());
            Ok(loss.sum().scale(1.0 / n.max(1) as f64))
        }
    }
}

/// `λ_reg · ∫R + γ · loss` of a rollout, termwise.
pub fn objective_var<'t>(
    spec: &ObjectiveSpec,
    model: &FieldModel,
    log: &Rollout<'t>,
    readout: Option<(Var<'t>, Var<'t>)>,
    targets: &Tensor,
) -> Result<ObjectiveParts<Var<'t>>> {
    spec.validate()?;
    let data = data_loss_var(spec.loss, log, readout, targets)?;
    let regularizer = regularizer_integral_var(model, log)?;
    let total = if spec.lambda_reg == 0.0 {
        data.scale(spec.gamma)
    } else {
        regularizer.scale(spec.lambda_reg) + data.scale(spec.gamma)
    };
    Ok(ObjectiveParts {
        data,
        regularizer,
        total,
    })
}

/// Runs the model on `(inputs, targets)` and evaluates the objective.
pub fn total_objective(
    objective: &ObjectiveSpec,
    spec: &ModeSpec,
    params: &Params,
    inputs: &Tensor,
    targets: &Tensor,
    integ: &IntegratorSpec,
) -> Result<ObjectiveParts<f64>> {
    params.check(spec)?;
    let tape = Tape::new();
    let (vars, _) = params.leaves(&tape);
    let x = tape.var(inputs.clone());
    let record = objective.loss == LossKind::MseTrajectory;
    let log = forward(spec, &vars, x, integ, record)?;
    let parts = objective_var(objective, &spec.model()?, &log, vars.readout, targets)?;
    Ok(ObjectiveParts {
        data: parts.data.item(),
        regularizer: parts.regularizer.item(),
        total: parts.total.item(),
    })
}

/// Fraction of rows whose readout probability falls on the side of 0.5 given
/// by the label.
pub fn accuracy(readout: &Readout, x_t: &Tensor, labels: &Tensor) -> Result<f64> {
    let z = x_t.matmul(&readout.weight.transpose()?)?.add_row(&readout.bias)?;
    check_targets("labels", labels, &[z.rows(), 1])?;
    if z.rows() == 0 {
        return Ok(1.0);
    }
    let hits = z
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(zi, yi)| (**zi > 0.0) == (**yi > 0.5))
        .count();
    Ok(hits as f64 / z.rows() as f64)
}

#[cfg(test)]
mod tests;
