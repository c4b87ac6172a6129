//! Minibatch Adam on the training objective, with learning-rate schedules,
//! a particle-position freeze, and seeded initialization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::integrator::IntegratorSpec;
use crate::objective::{complexity_metric, objective_var, LossKind, ObjectiveParts, ObjectiveSpec};
use crate::parameterizations::{forward, Core, ModeSpec, ParamKind, Params, Readout, TrajectoryLog};
use crate::tensor::Tensor;

/// Name of the generator behind every seed, recorded in run outputs.
pub const RNG_NAME: &str = "ChaCha8Rng";

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheduler {
    /// Multiply the rate by `factor` once the monitored loss has not improved
    /// (relative threshold `1e-4`) for more than `patience` epochs.
    Plateau {
        factor: f64,
        patience: usize,
    },
    /// `lr₀ · (1 + cos(π·epoch/t_max)) / 2`.
    Cosine {
        t_max: usize,
    },
    None,
}

impl Default for Scheduler {
    fn default() -> Self {
        Scheduler::Plateau {
            factor: 0.5,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scheduler: Scheduler,
    pub epochs: usize,
    pub batch_size: usize,
    /// Particle positions receive no updates during the first epochs.
    pub freeze_positions_epochs: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scheduler: Scheduler::default(),
            epochs: 500,
            batch_size: 50,
            freeze_positions_epochs: 50,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam needs β₁, β₂ ∈ [0, 1) and ε > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        match self.scheduler {
            Scheduler::Plateau { factor, .. } if !(factor > 0.0 && factor < 1.0) => {
                bad(format!("plateau factor must lie in (0, 1), got {factor}"))
            }
            Scheduler::Cosine { t_max: 0 } => bad("cosine schedule needs t_max ≥ 1".into()),
            _ => Ok(()),
        }
    }
}

/// Adam with per-tensor moments and step counts. A tensor that is skipped
/// (frozen) keeps its moments and step count untouched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<i32>,
}

impl Adam {
    pub fn new(spec: &OptimSpec, shapes: &[&[usize]]) -> Self {
        Self {
            lr: spec.learning_rate,
            beta1: spec.beta1,
            beta2: spec.beta2,
            eps: spec.eps,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: vec![0; shapes.len()],
        }
    }

    /// One update of every tensor with `active[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], active: &[bool]) {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !active[i] {
                continue;
            }
            self.t[i] += 1;
            let bc1 = 1.0 - self.beta1.powi(self.t[i]);
            let bc2 = 1.0 - self.beta2.powi(self.t[i]);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Learning-rate schedule state.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    kind: Scheduler,
    base: f64,
    best: f64,
    bad_epochs: usize,
}

impl LrSchedule {
    pub fn new(kind: Scheduler, base: f64) -> Self {
        Self {
            kind,
            base,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Rate for the epoch after `epoch` (0-based), given that epoch's
    /// monitored loss and the current rate.
    pub fn next(&mut self, epoch: usize, monitored: f64, lr: f64) -> f64 {
        match self.kind {
            Scheduler::None => lr,
            Scheduler::Cosine { t_max } => {
                let e = ((epoch + 1) as f64).min(t_max as f64);
                0.5 * self.base * (1.0 + (std::f64::consts::PI * e / t_max as f64).cos())
            }
            Scheduler::Plateau { factor, patience } => {
                if monitored < self.best * (1.0 - 1e-4) {
                    self.best = monitored;
                    self.bad_epochs = 0;
                    lr
                } else {
                    self.bad_epochs += 1;
                    if self.bad_epochs > patience {
                        self.bad_epochs = 0;
                        lr * factor
                    } else {
                        lr
                    }
                }
            }
        }
    }
}

/// Box in which particle positions are initialized, per input dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataRange {
    pub lo: f64,
    pub hi: f64,
}

impl DataRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidSpec(format!("empty data range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }
}

pub const INIT_STD: f64 = 0.1;

/// Seeded initialization: particle x-parts uniform over `range`; particle
/// v-parts, momenta, the lift, direct `θ` and the readout `~ N(0, 0.1²)`.
pub fn init_parameters(spec: &ModeSpec, range: DataRange, with_readout: bool, seed: u64) -> Result<Params> {
    DataRange::new(range.lo, range.hi)?;
    let mut params = Params::zeros(spec)?;
    if with_readout {
        params = params.with_readout(Readout::zeros(spec.d));
    }
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let kinds = params.kinds();
    for (t, kind) in params.tensors_mut().into_iter().zip(kinds) {
        let uniform_positions = matches!(kind, ParamKind::ParticlePosition { slot: 0 });
        for v in t.data_mut() {
            *v = if uniform_positions {
                rng.random_range(range.lo..range.hi)
            } else {
                normal.sample(&mut rng)
            };
        }
    }
    Ok(params)
}

/// Training data for one epoch; lets tasks resample every epoch.
pub trait DataSource {
    fn train(&mut self, epoch: usize) -> Result<Dataset>;
    fn validation(&self) -> Option<&Dataset>;
}

/// Fixed training and validation sets.
#[derive(Debug, Clone)]
pub struct StaticData {
    pub train: Dataset,
    pub val: Option<Dataset>,
}

impl DataSource for StaticData {
    fn train(&mut self, _epoch: usize) -> Result<Dataset> {
        Ok(self.train.clone())
    }

    fn validation(&self) -> Option<&Dataset> {
        self.val.as_ref()
    }
}

/// Fresh training set each epoch from `generate(epoch)`.
pub struct Resampled<F> {
    pub generate: F,
    pub val: Option<Dataset>,
}

impl<F: FnMut(usize) -> Result<Dataset>> DataSource for Resampled<F> {
    fn train(&mut self, epoch: usize) -> Result<Dataset> {
        (self.generate)(epoch)
    }

    fn validation(&self) -> Option<&Dataset> {
        self.val.as_ref()
    }
}

/// Everything `fit` needs besides parameters and data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec<'a> {
    pub mode: &'a ModeSpec,
    pub objective: &'a ObjectiveSpec,
    pub optim: &'a OptimSpec,
    pub integrator: &'a IntegratorSpec,
}

impl TrainSpec<'_> {
    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        self.mode.check_integrator(self.integrator)?;
        self.objective.validate()?;
        self.optim.validate()
    }
}

/// Objective value and gradient w.r.t. every tensor of [`Params::tensors`].
pub fn objective_and_grad(
    spec: &TrainSpec<'_>,
    params: &Params,
    batch: &Dataset,
) -> Result<(ObjectiveParts<f64>, Vec<Tensor>)> {
    let tape = Tape::new();
    let (vars, flat) = params.leaves(&tape);
    let x = tape.var(batch.inputs.clone());
    let record = spec.objective.loss == LossKind::MseTrajectory;
    let log = forward(spec.mode, &vars, x, spec.integrator, record)?;
    let parts = objective_var(spec.objective, &spec.mode.model()?, &log, vars.readout, &batch.targets)?;
    let grads = tape.grad(parts.total, &flat)?;
    Ok((
        ObjectiveParts {
            data: parts.data.item(),
            regularizer: parts.regularizer.item(),
            total: parts.total.item(),
        },
        grads,
    ))
}

/// Objective on a whole dataset plus the (tensor) log of the rollout.
pub fn evaluate_objective(
    spec: &TrainSpec<'_>,
    params: &Params,
    data: &Dataset,
    record: bool,
) -> Result<(ObjectiveParts<f64>, TrajectoryLog)> {
    params.check(spec.mode)?;
    let tape = Tape::new();
    let (vars, _) = params.leaves(&tape);
    let x = tape.var(data.inputs.clone());
    let record = record || spec.objective.loss == LossKind::MseTrajectory;
    let log = forward(spec.mode, &vars, x, spec.integrator, record)?;
    let parts = objective_var(spec.objective, &spec.mode.model()?, &log, vars.readout, &data.targets)?;
    Ok((
        ObjectiveParts {
            data: parts.data.item(),
            regularizer: parts.regularizer.item(),
            total: parts.total.item(),
        },
        log.map(Var::value),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's minibatches.
    pub train_loss: f64,
    /// Objective on the validation set (train loss when there is none).
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    /// `None` when `θ` vanishes somewhere on the grid.
    pub complexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Params,
    pub history: Vec<EpochRecord>,
}

fn wrap_numerical(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Divergence { .. } => Error::TrainingDivergence {
            epoch,
            batch,
            source: Box::new(err),
        },
        other => other,
    }
}

/// Minibatch Adam on the objective. Batches are drawn by a seeded shuffle;
/// the schedule steps on the validation objective after every epoch.
pub fn fit(spec: &TrainSpec<'_>, mut params: Params, data: &mut dyn DataSource, seed: u64) -> Result<FitResult> {
    spec.validate()?;
    params.check(spec.mode)?;
    let optim = spec.optim;
    let kinds = params.kinds();
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(optim, &shape_refs);
    let mut schedule = LrSchedule::new(optim.scheduler, optim.learning_rate);
    let mut rng = rng_from_seed(seed ^ 0x5348_4f4f_5449_4e47);
    let mut history = Vec::with_capacity(optim.epochs);

    for epoch in 0..optim.epochs {
        let frozen = epoch < optim.freeze_positions_epochs;
        let active: Vec<bool> = kinds
            .iter()
            .map(|k| !(frozen && matches!(k, ParamKind::ParticlePosition { .. })))
            .collect();
        let train = data.train(epoch)?;
        if train.is_empty() {
            return Err(Error::InvalidSpec("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(optim.batch_size).enumerate() {
            let batch = train.gather(idx);
            let (parts, grads) = objective_and_grad(spec, &params, &batch).map_err(|e| wrap_numerical(e, epoch, b))?;
            if !parts.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.step(&mut params.tensors_mut(), &grads, &active);
            total += parts.total;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let (val_loss, log) = match data.validation() {
            Some(val) => {
                let (parts, log) =
                    evaluate_objective(spec, &params, val, false).map_err(|e| wrap_numerical(e, epoch, batches))?;
                (parts.total, log)
            }
            None => {
                let (_, log) = evaluate_objective(spec, &params, &train.gather(&[]), false)
                    .map_err(|e| wrap_numerical(e, epoch, batches))?;
                (train_loss, log)
            }
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batches });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: adam.lr,
            complexity: complexity_metric(&log).ok(),
        });
        adam.lr = schedule.next(epoch, val_loss, adam.lr);
    }
    Ok(FitResult { params, history })
}

/// Particle positions of a particle-mode parameter set.
pub fn particle_positions(params: &Params) -> Option<&[Tensor]> {
    match &params.core {
        Core::Particles(e) => Some(&e.q),
        Core::Direct(_) => None,
    }
}
