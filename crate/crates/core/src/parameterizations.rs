//! The four ways of producing `θ(t)` for an UpDown network, behind one
//! forward interface.
//!
//! * `static_direct`: one learned `θ`, constant in time.
//! * `static_with_particles`: `θ` solved once from a particle ensemble.
//! * `dynamic_with_particles`: the ensemble evolves by shooting, `θ(t)`
//!   follows it.
//! * `dynamic_direct`: `[0, T]` split into equal blocks, one learned `θ` each.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::dynamics::{
    hamiltonian_var, shooting_rhs, AffineLift, BundleLayout, Ensemble, FieldModel, UpDownModel, UpDownWeights,
};
use crate::error::{Error, Result, ShapeError};
use crate::integrator::{integrate, IntegratorSpec, Trajectory};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    StaticDirect,
    StaticWithParticles,
    DynamicWithParticles,
    DynamicDirect,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::StaticDirect,
        Mode::StaticWithParticles,
        Mode::DynamicWithParticles,
        Mode::DynamicDirect,
    ];

    pub fn uses_particles(self) -> bool {
        matches!(self, Mode::StaticWithParticles | Mode::DynamicWithParticles)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::StaticDirect => "static_direct",
            Mode::StaticWithParticles => "static_with_particles",
            Mode::DynamicWithParticles => "dynamic_with_particles",
            Mode::DynamicDirect => "dynamic_direct",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown mode `{s}`")))
    }
}

pub const DEFAULT_BLOCKS: usize = 5;

/// Everything that fixes the learnable-parameter layout of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub mode: Mode,
    /// Number of constant-θ blocks; only `dynamic_direct` may use more than one.
    pub blocks: usize,
    pub alpha: usize,
    /// Number of particles, present iff the mode uses particles.
    pub particles: Option<usize>,
    pub d: usize,
    pub activation: Activation,
    pub weights: UpDownWeights,
}

impl ModeSpec {
    /// A spec with default blocks, activation and weights. `k` is ignored
    /// for direct modes.
    pub fn new(mode: Mode, d: usize, alpha: usize, k: usize) -> Self {
        Self {
            mode,
            blocks: if mode == Mode::DynamicDirect { DEFAULT_BLOCKS } else { 1 },
            alpha,
            particles: mode.uses_particles().then_some(k),
            d,
            activation: Activation::Relu,
            weights: UpDownWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.alpha == 0 {
            return Err(Error::InvalidSpec("d and α must be at least 1".into()));
        }
        if self.blocks == 0 || (self.blocks != 1 && self.mode != Mode::DynamicDirect) {
            return Err(Error::InvalidSpec(format!(
                "{} needs blocks = 1, got {}",
                self.mode, self.blocks
            )));
        }
        match (self.mode.uses_particles(), self.particles) {
            (true, None) | (true, Some(0)) => Err(Error::InvalidSpec(format!(
                "{} needs a positive particle count",
                self.mode
            ))),
            (false, Some(_)) => Err(Error::InvalidSpec(format!("{} takes no particles", self.mode))),
            _ => Ok(()),
        }
    }

    pub fn model(&self) -> Result<FieldModel> {
        self.validate()?;
        Ok(UpDownModel::new(self.d, self.alpha, self.activation, self.weights)?.into())
    }

    pub fn hidden(&self) -> usize {
        self.alpha * self.d
    }

    /// Checks that the integration grid can be split into the blocks.
    pub fn check_integrator(&self, integ: &IntegratorSpec) -> Result<()> {
        integ.validate()?;
        if self.blocks > 1 && !integ.with_horizon(integ.horizon / self.blocks as f64).divides_horizon() {
            return Err(Error::InvalidSpec(format!(
                "step {} does not divide the block length {}",
                integ.step,
                integ.horizon / self.blocks as f64
            )));
        }
        Ok(())
    }
}

/// Number of learnable scalars of a model (readout excluded).
pub fn count_parameters(spec: &ModeSpec) -> Result<u64> {
    spec.validate()?;
    let (d, a) = (spec.d as u64, spec.alpha as u64);
    let lift = a * d * (d + 1);
    let theta = a * d * d + d + a * d * d + a * d + a * a * d * d;
    Ok(match spec.mode {
        Mode::StaticDirect => theta + lift,
        Mode::DynamicDirect => spec.blocks as u64 * theta + lift,
        Mode::StaticWithParticles | Mode::DynamicWithParticles => {
            let k = spec.particles.expect("validated") as u64;
            2 * k * (a + 1) * d + lift
        }
    })
}

/// Affine classification head `ℝ^d → ℝ` on `x(T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    /// `1 × d`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl Readout {
    pub fn zeros(d: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[1, d]),
            bias: Tensor::zeros(&[1]),
        }
    }

    /// Logits, `n × 1`.
    pub fn apply<'t>(weight: Var<'t>, bias: Var<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(weight.t()).add_row(bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Core {
    /// One `θ` (five components) per block.
    Direct(Vec<Vec<Tensor>>),
    Particles(Ensemble),
}

/// What a learnable tensor is; the trainer uses this to freeze groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    LiftWeight,
    LiftBias,
    Theta { block: usize, component: usize },
    ParticlePosition { slot: usize },
    ParticleMomentum { slot: usize },
    ReadoutWeight,
    ReadoutBias,
}

/// All learnables of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub lift: AffineLift,
    pub core: Core,
    pub readout: Option<Readout>,
}

impl Params {
    /// All-zero parameters with the layout of `spec`.
    pub fn zeros(spec: &ModeSpec) -> Result<Self> {
        let model = spec.model()?;
        let core = if spec.mode.uses_particles() {
            Core::Particles(Ensemble::zeros(&model, spec.particles.expect("validated")))
        } else {
            Core::Direct(vec![model.zero_theta(); spec.blocks])
        };
        Ok(Self {
            lift: AffineLift::zeros(spec.d, spec.hidden()),
            core,
            readout: None,
        })
    }

    pub fn with_readout(mut self, readout: Readout) -> Self {
        self.readout = Some(readout);
        self
    }

    /// Learnable tensors in a fixed order: lift, core, readout.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.lift.weight, &self.lift.bias];
        match &self.core {
            Core::Direct(blocks) => out.extend(blocks.iter().flatten()),
            Core::Particles(e) => out.extend(e.q.iter().chain(&e.p)),
        }
        if let Some(r) = &self.readout {
            out.extend([&r.weight, &r.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.lift.weight, &mut self.lift.bias];
        match &mut self.core {
            Core::Direct(blocks) => out.extend(blocks.iter_mut().flatten()),
            Core::Particles(e) => out.extend(e.q.iter_mut().chain(e.p.iter_mut())),
        }
        if let Some(r) = &mut self.readout {
            out.extend([&mut r.weight, &mut r.bias]);
        }
        out
    }

    /// Kinds aligned with [`Params::tensors`].
    pub fn kinds(&self) -> Vec<ParamKind> {
        let mut out = vec![ParamKind::LiftWeight, ParamKind::LiftBias];
        match &self.core {
            Core::Direct(blocks) => {
                for (b, theta) in blocks.iter().enumerate() {
                    out.extend((0..theta.len()).map(|c| ParamKind::Theta { block: b, component: c }));
                }
            }
            Core::Particles(e) => {
                out.extend((0..e.q.len()).map(|slot| ParamKind::ParticlePosition { slot }));
                out.extend((0..e.p.len()).map(|slot| ParamKind::ParticleMomentum { slot }));
            }
        }
        if self.readout.is_some() {
            out.extend([ParamKind::ReadoutWeight, ParamKind::ReadoutBias]);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks shapes against `spec`.
    pub fn check(&self, spec: &ModeSpec) -> Result<()> {
        let template = Params::zeros(spec)?;
        let mut template = template;
        if let Some(r) = &self.readout {
            if r.weight.shape() != [1, spec.d] || r.bias.shape() != [1] {
                return Err(ShapeError::Mismatch {
                    op: "readout",
                    lhs: vec![1, spec.d],
                    rhs: r.weight.shape().to_vec(),
                }
                .into());
            }
            template.readout = Some(Readout::zeros(spec.d));
        }
        let ours = self.tensors();
        let want = template.tensors();
        if ours.len() != want.len() || std::mem::discriminant(&self.core) != std::mem::discriminant(&template.core) {
            return Err(Error::InvalidSpec(format!(
                "parameter layout does not match {}",
                spec.mode
            )));
        }
        for (a, b) in ours.iter().zip(&want) {
            if a.shape() != b.shape() {
                return Err(ShapeError::Mismatch {
                    op: "params",
                    lhs: b.shape().to_vec(),
                    rhs: a.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Puts every tensor on `tape`; returns the structured view and the
    /// flat leaf list aligned with [`Params::tensors`].
    pub fn leaves<'t>(&self, tape: &'t Tape) -> (ParamVars<'t>, Vec<Var<'t>>) {
        let flat: Vec<Var<'t>> = self.tensors().into_iter().map(|t| tape.var(t.clone())).collect();
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("layout matches tensors()");
        let lift = (next(), next());
        let core = match &self.core {
            Core::Direct(blocks) => CoreVars::Direct(
                blocks
                    .iter()
                    .map(|theta| theta.iter().map(|_| next()).collect())
                    .collect(),
            ),
            Core::Particles(e) => {
                let q = e.q.iter().map(|_| next()).collect();
                let p = e.p.iter().map(|_| next()).collect();
                CoreVars::Particles { q, p }
            }
        };
        let readout = self.readout.as_ref().map(|_| (next(), next()));
        (ParamVars { lift, core, readout }, flat)
    }
}

#[derive(Debug, Clone)]
pub enum CoreVars<'t> {
    Direct(Vec<Vec<Var<'t>>>),
    Particles { q: Vec<Var<'t>>, p: Vec<Var<'t>> },
}

/// Taped view of [`Params`].
#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    pub lift: (Var<'t>, Var<'t>),
    pub core: CoreVars<'t>,
    pub readout: Option<(Var<'t>, Var<'t>)>,
}

/// Time grid with data states, `θ(t)` and (particle modes) `H(t)`.
///
/// `theta[i]` is the value at `times[i]` used by the step starting there
/// (right-continuous); where `θ` jumps between blocks, the left limit is kept
/// in `theta_breaks`. `stage_theta[n]` lists every evaluation of step `n`
/// with its time, which is enough to replay the data rollout exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog<T = Tensor> {
    pub times: Vec<f64>,
    /// Data slots `[x, v]` at every grid point when recorded, else only the final ones.
    pub states: Vec<Vec<T>>,
    pub theta: Vec<Vec<T>>,
    pub theta_breaks: Vec<(usize, Vec<T>)>,
    pub stage_theta: Vec<Vec<(f64, Vec<T>)>>,
    /// Scalar `H(t)` on the grid for particle modes.
    pub hamiltonian: Option<Vec<T>>,
    pub recorded: bool,
}

impl<T> TrajectoryLog<T> {
    pub fn final_state(&self) -> &[T] {
        self.states.last().expect("log holds at least the final state")
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> TrajectoryLog<U> {
        let all = |v: &Vec<T>| v.iter().map(&f).collect::<Vec<U>>();
        TrajectoryLog {
            times: self.times.clone(),
            states: self.states.iter().map(all).collect(),
            theta: self.theta.iter().map(all).collect(),
            theta_breaks: self.theta_breaks.iter().map(|(i, th)| (*i, all(th))).collect(),
            stage_theta: self
                .stage_theta
                .iter()
                .map(|st| st.iter().map(|(t, th)| (*t, all(th))).collect())
                .collect(),
            hamiltonian: self.hamiltonian.as_ref().map(all),
            recorded: self.recorded,
        }
    }

    /// `(θ at the left end, θ at the right end)` of step `n`.
    pub fn step_theta(&self, n: usize) -> (&[T], &[T]) {
        let right = self
            .theta_breaks
            .iter()
            .find(|(i, _)| *i == n + 1)
            .map_or(&self.theta[n + 1], |(_, th)| th);
        (&self.theta[n], right)
    }
}

impl TrajectoryLog<Tensor> {
    pub fn hamiltonian_values(&self) -> Option<Vec<f64>> {
        self.hamiltonian.as_ref().map(|h| h.iter().map(Tensor::item).collect())
    }
}

pub type Rollout<'t> = TrajectoryLog<Var<'t>>;

fn constant_theta_rollout<'t>(
    model: &FieldModel,
    data: Vec<Var<'t>>,
    theta: &[Var<'t>],
    integ: &IntegratorSpec,
    record: bool,
) -> Result<Trajectory<Vec<Var<'t>>, ()>> {
    integrate(
        |_, y: &Vec<Var<'t>>| Ok((model.field(y, theta), ())),
        data,
        integ,
        record,
    )
}

fn constant_log<'t>(
    traj: Trajectory<Vec<Var<'t>>, ()>,
    theta: &[Var<'t>],
    hamiltonian: Option<Var<'t>>,
) -> Rollout<'t> {
    let n = traj.times.len();
    TrajectoryLog {
        theta: vec![theta.to_vec(); n],
        theta_breaks: Vec::new(),
        stage_theta: traj
            .stage_aux
            .iter()
            .map(|st| st.iter().map(|(t, _)| (*t, theta.to_vec())).collect())
            .collect(),
        hamiltonian: hamiltonian.map(|h| vec![h; n]),
        states: traj.states,
        times: traj.times,
        recorded: traj.recorded,
    }
}

fn check_var_shape(op: &'static str, v: Var<'_>, want: &[usize]) -> Result<()> {
    let got = v.shape();
    if got != want {
        return Err(ShapeError::Mismatch {
            op,
            lhs: want.to_vec(),
            rhs: got,
        }
        .into());
    }
    Ok(())
}

/// Runs the model on the batch `x0` (`n × d`).
///
/// The hidden state starts at `v(0) = g_Θ(x(0))`; the rollout is recorded
/// on the tape of the inputs and can be differentiated w.r.t. every leaf in
/// `params`.
pub fn forward<'t>(
    spec: &ModeSpec,
    params: &ParamVars<'t>,
    x0: Var<'t>,
    integ: &IntegratorSpec,
    record: bool,
) -> Result<Rollout<'t>> {
    let model = spec.model()?;
    spec.check_integrator(integ)?;
    let x_shape = x0.shape();
    if x_shape.len() != 2 || x_shape[1] != spec.d {
        return Err(ShapeError::Mismatch {
            op: "forward",
            lhs: vec![x_shape.first().copied().unwrap_or(0), spec.d],
            rhs: x_shape,
        }
        .into());
    }
    let h = spec.hidden();
    check_var_shape("lift weight", params.lift.0, &[h, spec.d])?;
    check_var_shape("lift bias", params.lift.1, &[h])?;
    let v0 = AffineLift::apply(params.lift.0, params.lift.1, x0);
    let data = vec![x0, v0];
    let shapes = model.theta_shapes();

    match (&params.core, spec.mode) {
        (CoreVars::Direct(blocks), Mode::StaticDirect | Mode::DynamicDirect) => {
            if blocks.len() != spec.blocks {
                return Err(Error::InvalidSpec(format!(
                    "{} blocks of θ for {} requested",
                    blocks.len(),
                    spec.blocks
                )));
            }
            for theta in blocks {
                if theta.len() != shapes.len() {
                    return Err(Error::InvalidSpec("θ has the wrong number of components".into()));
                }
                for (t, s) in theta.iter().zip(&shapes) {
                    check_var_shape("θ", *t, s)?;
                }
            }
            if blocks.len() == 1 {
                let traj = constant_theta_rollout(&model, data, &blocks[0], integ, record)?;
                return Ok(constant_log(traj, &blocks[0], None));
            }
            let block_len = integ.horizon / blocks.len() as f64;
            let sub = integ.with_horizon(block_len);
            let mut y = data;
            let mut log: Option<Rollout<'t>> = None;
            for (b, theta) in blocks.iter().enumerate() {
                let traj = constant_theta_rollout(&model, y, theta, &sub, record)?;
                y = traj.final_state().clone();
                let offset = b as f64 * block_len;
                let mut part = constant_log(traj, theta, None);
                for t in part.times.iter_mut() {
                    *t += offset;
                }
                for st in part.stage_theta.iter_mut() {
                    for (t, _) in st.iter_mut() {
                        *t += offset;
                    }
                }
                log = Some(match log {
                    None => part,
                    Some(mut acc) => {
                        let boundary = acc.times.len() - 1;
                        let left = acc.theta.pop().expect("non-empty");
                        acc.times.pop();
                        acc.theta_breaks.push((boundary, left));
                        if record {
                            acc.states.pop();
                        } else {
                            acc.states.clear();
                        }
                        // the last block ends exactly at T
                        if b + 1 == blocks.len() {
                            *part.times.last_mut().expect("non-empty") = integ.horizon;
                        }
                        acc.times.extend(part.times);
                        acc.states.extend(part.states);
                        acc.theta.extend(part.theta);
                        acc.stage_theta.extend(part.stage_theta);
                        acc
                    }
                });
            }
            Ok(log.expect("at least one block"))
        }
        (CoreVars::Particles { q, p }, Mode::StaticWithParticles | Mode::DynamicWithParticles) => {
            let k = spec.particles.expect("validated");
            let widths = model.state_widths();
            if q.len() != widths.len() || p.len() != widths.len() {
                return Err(Error::InvalidSpec("ensemble has the wrong number of slots".into()));
            }
            for ((qs, ps), w) in q.iter().zip(p).zip(&widths) {
                check_var_shape("particle position", *qs, &[k, *w])?;
                check_var_shape("particle momentum", *ps, &[k, *w])?;
            }
            if spec.mode == Mode::StaticWithParticles {
                let theta = model.solve_theta(q, p)?;
                let h = hamiltonian_var(&model, q, p, &theta);
                let traj = constant_theta_rollout(&model, data, &theta, integ, record)?;
                return Ok(constant_log(traj, &theta, Some(h)));
            }
            let layout = BundleLayout::new(&model, true);
            let bundle = layout.assemble(&data, q, p);
            let traj = integrate(
                |_, y: &Vec<Var<'t>>| shooting_rhs(&model, &layout, y),
                bundle,
                integ,
                record,
            )?;
            let slots = widths.len();
            Ok(TrajectoryLog {
                states: traj.states.iter().map(|s| s[..slots].to_vec()).collect(),
                theta: traj.aux.iter().map(|a| a.theta.clone()).collect(),
                theta_breaks: Vec::new(),
                stage_theta: traj
                    .stage_aux
                    .iter()
                    .map(|st| st.iter().map(|(t, a)| (*t, a.theta.clone())).collect())
                    .collect(),
                hamiltonian: Some(traj.aux.iter().map(|a| a.hamiltonian).collect()),
                times: traj.times,
                recorded: traj.recorded,
            })
        }
        _ => Err(Error::InvalidSpec(format!(
            "parameters do not match mode {}",
            spec.mode
        ))),
    }
}

/// Tensor-level [`forward`] on a private tape.
pub fn evaluate(
    spec: &ModeSpec,
    params: &Params,
    x0: &Tensor,
    integ: &IntegratorSpec,
    record: bool,
) -> Result<TrajectoryLog> {
    params.check(spec)?;
    let tape = Tape::new();
    let (vars, _) = params.leaves(&tape);
    let x = tape.var(x0.clone());
    Ok(forward(spec, &vars, x, integ, record)?.map(Var::value))
}

/// Replays the data rollout under a recorded `θ` schedule (the stage values
/// of `log`), starting from `(x(0), v(0))`. With the same integrator this
/// reproduces the original data states exactly.
pub fn replay(
    model: &FieldModel,
    stage_theta: &[Vec<(f64, Vec<Tensor>)>],
    data0: Vec<Tensor>,
    integ: &IntegratorSpec,
) -> Result<Vec<Vec<Tensor>>> {
    integ.validate()?;
    model.check_state(&data0)?;
    let sizes = integ.step_sizes();
    if sizes.len() != stage_theta.len() {
        return Err(Error::InvalidSpec(format!(
            "θ schedule has {} steps, integrator has {}",
            stage_theta.len(),
            sizes.len()
        )));
    }
    let tape = Tape::untaped();
    let mut y: Vec<Var> = data0.into_iter().map(|t| tape.var(t)).collect();
    let mut out = vec![y.iter().map(Var::value).collect::<Vec<_>>()];
    for (n, stages) in stage_theta.iter().enumerate() {
        if stages.len() != integ.scheme.stages() {
            return Err(Error::InvalidSpec(format!(
                "θ schedule for step {n} has {} stages, expected {}",
                stages.len(),
                integ.scheme.stages()
            )));
        }
        for (_, th) in stages {
            model.check_theta(th)?;
        }
        let step = IntegratorSpec {
            step: sizes[n],
            horizon: sizes[n],
            ..*integ
        };
        let mut idx = 0;
        // integrate evaluates once more at the end of the step; that value is unused
        let traj = integrate(
            |_, s| {
                let (_, th) = &stages[idx.min(stages.len() - 1)];
                idx += 1;
                let theta: Vec<Var> = th.iter().map(|t| tape.var(t.clone())).collect();
                Ok((model.field(s, &theta), ()))
            },
            y,
            &step,
            false,
        )?;
        y = traj.final_state().clone();
        out.push(y.iter().map(Var::value).collect());
    }
    Ok(out)
}
