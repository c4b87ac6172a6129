//! Declarative experiments: a TOML configuration whose omitted fields take
//! task-specific defaults, data construction per task, and one training run
//! per seed with its summary metrics.
//!
//! Every seed fans out into independent streams (train / validation / test
//! data, initialization, minibatch shuffling), so the same seed gives the same
//! data under every model.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Activation;
use crate::datasets::{
    gen_concentric_circles, gen_function_1d, gen_spiral, CirclesSpec, Dataset, FunctionKind, SpiralSpec,
};
use crate::dynamics::UpDownWeights;
use crate::error::{Error, Result};
use crate::integrator::{IntegratorSpec, Scheme};
use crate::objective::{accuracy, complexity_metric, LossKind, ObjectiveSpec};
use crate::parameterizations::{count_parameters, evaluate, Mode, ModeSpec, Params, TrajectoryLog};
use crate::tensor::Tensor;
use crate::trainer::{
    evaluate_objective, fit, init_parameters, DataRange, DataSource, EpochRecord, OptimSpec, Resampled, StaticData,
    TrainSpec, RNG_NAME,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    QuadraticLike,
    Cubic,
    Spiral,
    Circles,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::QuadraticLike, Task::Cubic, Task::Spiral, Task::Circles];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::QuadraticLike => "quadratic_like",
            Task::Cubic => "cubic",
            Task::Spiral => "spiral",
            Task::Circles => "circles",
        }
    }

    /// Input dimension.
    pub fn dim(self) -> usize {
        match self {
            Task::QuadraticLike | Task::Cubic => 1,
            Task::Spiral | Task::Circles => 2,
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Task::QuadraticLike | Task::Cubic => LossKind::Mse,
            Task::Spiral => LossKind::MseTrajectory,
            Task::Circles => LossKind::BinaryCrossEntropy,
        }
    }

    fn function(self) -> Option<FunctionKind> {
        match self {
            Task::QuadraticLike => Some(FunctionKind::QuadraticLike),
            Task::Cubic => Some(FunctionKind::Cubic),
            _ => None,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub alpha: usize,
    /// Used by the particle modes only.
    pub particles: usize,
    /// Used by `dynamic_direct` only.
    pub blocks: usize,
    pub activation: Activation,
    pub weights: UpDownWeights,
}

/// Sample counts. For `circles` they count points per class; for `spiral`
/// they count snippets, and the training snippets are redrawn every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Box for the function inputs and for the initial particle positions.
    pub range: [f64; 2],
    pub spiral: SpiralSpec,
    pub circles: CirclesSpec,
}

/// Grid for `sweep`: every mode × α × seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub modes: Vec<Mode>,
    pub alphas: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub model: ModelConfig,
    /// For `spiral` the horizon is the snippet length.
    pub integrator: IntegratorSpec,
    pub optimizer: OptimSpec,
    pub objective: ObjectiveSpec,
    pub data: DataConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Full configuration of a task with every field at its default.
    pub fn defaults(task: Task) -> Self {
        let regression_optim = OptimSpec::default();
        let model = ModelConfig {
            mode: Mode::DynamicWithParticles,
            alpha: 16,
            particles: 15,
            blocks: crate::parameterizations::DEFAULT_BLOCKS,
            activation: Activation::Relu,
            weights: UpDownWeights::default(),
        };
        let data = DataConfig {
            n_train: 500,
            n_val: 1000,
            n_test: 1000,
            range: [crate::datasets::DEFAULT_RANGE.0, crate::datasets::DEFAULT_RANGE.1],
            spiral: SpiralSpec::default(),
            circles: CirclesSpec::default(),
        };
        let regression = Self {
            task,
            seeds: vec![0],
            output_dir: None,
            model,
            integrator: IntegratorSpec {
                scheme: Scheme::Rk4,
                step: 0.1,
                horizon: 1.0,
            },
            optimizer: regression_optim,
            objective: ObjectiveSpec::default(),
            data,
            sweep: SweepConfig {
                modes: Mode::ALL.to_vec(),
                alphas: vec![16],
            },
        };
        match task {
            Task::QuadraticLike => regression,
            Task::Cubic => Self {
                model: ModelConfig {
                    particles: 2,
                    ..regression.model
                },
                ..regression
            },
            Task::Spiral => Self {
                model: ModelConfig {
                    particles: 25,
                    ..regression.model
                },
                integrator: IntegratorSpec {
                    scheme: Scheme::Rk4,
                    step: 0.05,
                    horizon: 0.25,
                },
                optimizer: OptimSpec {
                    epochs: 1500,
                    batch_size: 100,
                    ..regression_optim
                },
                objective: ObjectiveSpec {
                    loss: LossKind::MseTrajectory,
                    gamma: 100.0,
                    lambda_reg: 0.01,
                },
                data: DataConfig {
                    n_train: 100,
                    n_val: 100,
                    n_test: 1000,
                    range: [-2.0, 2.0],
                    ..regression.data
                },
                ..regression
            },
            Task::Circles => Self {
                model: ModelConfig {
                    alpha: 4,
                    particles: 20,
                    ..regression.model
                },
                optimizer: OptimSpec {
                    epochs: 300,
                    learning_rate: 0.03,
                    batch_size: 100,
                    ..regression_optim
                },
                objective: ObjectiveSpec {
                    loss: LossKind::BinaryCrossEntropy,
                    ..ObjectiveSpec::default()
                },
                data: DataConfig {
                    n_train: 50,
                    n_val: 50,
                    n_test: 500,
                    range: [-2.5, 2.5],
                    ..regression.data
                },
                sweep: SweepConfig {
                    modes: vec![Mode::DynamicWithParticles],
                    alphas: vec![4, 8, 16],
                },
                ..regression
            },
        }
    }

    /// Parses a TOML document. Only `task` is required; every other field
    /// falls back to the task default. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| config_error(format!("malformed TOML: {e}")))?;
        let task = match user.get("task") {
            Some(toml::Value::String(s)) => s.parse::<Task>()?,
            Some(other) => return Err(config_error(format!("`task` must be a string, got {other}"))),
            None => return Err(config_error("missing `task`".into())),
        };
        let mut merged = toml::Table::try_from(Self::defaults(task)).map_err(|e| config_error(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error(e.to_string()))
    }

    /// SHA-256 of the canonical serialization; any field change changes it.
    pub fn hash(&self) -> String {
        let canonical = canonical_text(self);
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Copy with a different model mode and inflation factor.
    pub fn with_cell(&self, mode: Mode, alpha: usize) -> Self {
        let mut cfg = self.clone();
        cfg.model.mode = mode;
        cfg.model.alpha = alpha;
        cfg
    }

    pub fn mode_spec(&self) -> ModeSpec {
        let m = &self.model;
        ModeSpec {
            mode: m.mode,
            blocks: if m.mode == Mode::DynamicDirect { m.blocks } else { 1 },
            alpha: m.alpha,
            particles: m.mode.uses_particles().then_some(m.particles),
            d: self.task.dim(),
            activation: m.activation,
            weights: m.weights,
        }
    }

    pub fn data_range(&self) -> Result<DataRange> {
        DataRange::new(self.data.range[0], self.data.range[1])
    }

    /// Checks every cross-field constraint. Runs no numerics beyond the
    /// spiral grid check.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_error("`seeds` is empty".into()));
        }
        if self.seeds.iter().any(|&s| s > i64::MAX as u64) {
            return Err(config_error("seeds must fit in a signed 64-bit integer".into()));
        }
        self.integrator.validate()?;
        self.optimizer.validate()?;
        self.objective.validate()?;
        if self.objective.loss != self.task.loss() {
            return Err(config_error(format!(
                "task `{}` needs loss `{:?}`, got `{:?}`",
                self.task,
                self.task.loss(),
                self.objective.loss
            )));
        }
        if self.sweep.modes.is_empty() || self.sweep.alphas.is_empty() {
            return Err(config_error("sweep needs at least one mode and one α".into()));
        }
        for &mode in std::iter::once(&self.model.mode).chain(&self.sweep.modes) {
            for &alpha in std::iter::once(&self.model.alpha).chain(&self.sweep.alphas) {
                let spec = self.with_cell(mode, alpha).mode_spec();
                spec.validate()?;
                spec.check_integrator(&self.integrator)?;
            }
        }
        self.data_range()?;
        let d = &self.data;
        if d.n_train == 0 || d.n_test == 0 {
            return Err(config_error("n_train and n_test must be positive".into()));
        }
        match self.task {
            Task::Spiral => {
                let s = &d.spiral;
                if !(s.step > 0.0 && s.horizon > 0.0 && s.step <= s.horizon) {
                    return Err(config_error("spiral needs 0 < step ≤ horizon".into()));
                }
                let steps = s.steps_for(self.integrator.horizon);
                let grid_ok = (self.integrator.step - s.step).abs() <= 1e-12 * s.step
                    && (steps as f64 * s.step - self.integrator.horizon).abs() <= 1e-9
                    && steps >= 1;
                if !grid_ok {
                    return Err(config_error(format!(
                        "spiral snippets need the integrator step to equal the data step {} and the horizon to be a multiple of it",
                        s.step
                    )));
                }
                if self.integrator.horizon > s.horizon {
                    return Err(config_error("snippet length exceeds the spiral horizon".into()));
                }
            }
            Task::Circles => d.circles.validate()?,
            Task::QuadraticLike | Task::Cubic => {}
        }
        Ok(())
    }
}

fn config_error(msg: String) -> Error {
    Error::InvalidSpec(msg)
}

/// Deep merge: tables merge key by key, except tagged tables (with a `kind`
/// key) which the user value replaces whole; everything else is replaced.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !u.contains_key("kind") => merge(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

// Canonical text: TOML of the full configuration. Key order follows the
// struct definition, so equal configurations give equal text.
fn canonical_text(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("configuration serializes")
}

/// Independent sub-seed `stream` of `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_FIT: u64 = 5;

/// Data of one seed.
pub struct TaskData {
    pub source: Box<dyn DataSource>,
    pub test: Dataset,
}

impl TaskData {
    /// Training set of the first epoch (what `gen-data` exports).
    pub fn first_train(&mut self) -> Result<Dataset> {
        self.source.train(0)
    }
}

fn optional(n: usize, make: impl FnOnce() -> Result<Dataset>) -> Result<Option<Dataset>> {
    if n == 0 {
        Ok(None)
    } else {
        make().map(Some)
    }
}

/// Builds the train / validation / test data of `seed`.
pub fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<TaskData> {
    let d = &cfg.data;
    let train_seed = sub_seed(seed, STREAM_TRAIN);
    let val_seed = sub_seed(seed, STREAM_VAL);
    let test_seed = sub_seed(seed, STREAM_TEST);
    let range = (d.range[0], d.range[1]);
    match cfg.task {
        Task::QuadraticLike | Task::Cubic => {
            let kind = cfg.task.function().expect("function task");
            let train = gen_function_1d(kind, d.n_train, range, train_seed)?;
            let val = optional(d.n_val, || gen_function_1d(kind, d.n_val, range, val_seed))?;
            Ok(TaskData {
                source: Box::new(StaticData { train, val }),
                test: gen_function_1d(kind, d.n_test, range, test_seed)?,
            })
        }
        Task::Spiral => {
            let spec = d.spiral;
            let len = cfg.integrator.horizon;
            let n_train = d.n_train;
            let val = optional(d.n_val, || Ok(gen_spiral(&spec, d.n_val, len, val_seed)?.data))?;
            let generate = move |epoch: usize| -> Result<Dataset> {
                Ok(gen_spiral(&spec, n_train, len, sub_seed(train_seed, epoch as u64))?.data)
            };
            Ok(TaskData {
                source: Box::new(Resampled { generate, val }),
                test: gen_spiral(&spec, d.n_test, len, test_seed)?.data,
            })
        }
        Task::Circles => {
            let c = d.circles;
            let train = gen_concentric_circles(&c, d.n_train, train_seed)?;
            let val = optional(d.n_val, || gen_concentric_circles(&c, d.n_val, val_seed))?;
            Ok(TaskData {
                source: Box::new(StaticData { train, val }),
                test: gen_concentric_circles(&c, d.n_test, test_seed)?,
            })
        }
    }
}

/// Key numbers of one run, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: Task,
    pub mode: Mode,
    pub alpha: usize,
    pub particles: Option<usize>,
    pub blocks: Option<usize>,
    pub seed: u64,
    pub rng: String,
    pub config_hash: String,
    pub parameter_count: u64,
    pub epochs: usize,
    /// Last epoch's mean training objective (`None` without epochs).
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    /// Unweighted data loss (mean squared error, or mean logistic loss) on the
    /// test set.
    pub test_loss: f64,
    /// Full objective on the test set.
    pub test_objective: f64,
    pub test_regularizer: f64,
    /// `None` when `θ` vanishes on the grid.
    pub complexity: Option<f64>,
    /// `max_t |H(t) − H(0)| / max(|H(0)|, 1e-12)` along the test rollout.
    pub h_drift: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Mean distance to the reference spiral of the pasted rollout from its
    /// start point.
    pub long_range_error: Option<f64>,
}

pub struct RunOutput {
    pub summary: Summary,
    pub history: Vec<EpochRecord>,
    pub params: Params,
    /// Rollout of the test inputs under the final parameters.
    pub test_log: TrajectoryLog,
    pub test: Dataset,
}

/// Relative drift of a Hamiltonian series.
pub fn h_drift(values: &[f64]) -> Option<f64> {
    let h0 = *values.first()?;
    let max = values.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max);
    Some(max / h0.abs().max(1e-12))
}

/// Pasted long-range rollout: one snippet-length solve after another, each
/// starting at the previous end point. Returns the predicted points at the
/// reference grid (start included).
pub fn pasted_rollout(cfg: &ExperimentConfig, params: &Params) -> Result<Vec<[f64; 2]>> {
    let spiral = &cfg.data.spiral;
    let spec = cfg.mode_spec();
    let (_, reference) = spiral.reference()?;
    let steps = cfg.integrator.num_steps();
    let mut out = vec![spiral.x0];
    let mut x = spiral.x0;
    while out.len() < reference.len() {
        let log = evaluate(&spec, params, &Tensor::matrix(1, 2, x.to_vec())?, &cfg.integrator, true)?;
        for s in 1..=steps {
            if out.len() == reference.len() {
                break;
            }
            let p = log.states[s][0].data();
            out.push([p[0], p[1]]);
        }
        let end = log.final_state()[0].data();
        x = [end[0], end[1]];
        if !(x[0].is_finite() && x[1].is_finite()) {
            return Err(Error::Divergence { step: out.len() });
        }
    }
    Ok(out)
}

/// Mean Euclidean distance between the pasted rollout and the reference,
/// over the predicted points (the shared start point is excluded).
pub fn long_range_error(cfg: &ExperimentConfig, params: &Params) -> Result<f64> {
    let (_, reference) = cfg.data.spiral.reference()?;
    let pred = pasted_rollout(cfg, params)?;
    let n = reference.len() - 1;
    let total: f64 = pred[1..]
        .iter()
        .zip(&reference[1..])
        .map(|(p, r)| ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2)).sqrt())
        .sum();
    Ok(total / n.max(1) as f64)
}

/// Trains on `seed` and evaluates on the test set.
pub fn run(cfg: &ExperimentConfig, seed: u64, record_trajectory: bool) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = cfg.mode_spec();
    let params = initial_parameters(cfg, seed)?;
    let mut data = build_data(cfg, seed)?;
    let train_spec = train_spec(cfg, &spec);
    let fitted = fit(&train_spec, params, data.source.as_mut(), sub_seed(seed, STREAM_FIT))?;
    assess(cfg, seed, fitted.params, fitted.history, record_trajectory)
}

/// Seeded initial parameters of a run.
pub fn initial_parameters(cfg: &ExperimentConfig, seed: u64) -> Result<Params> {
    let with_readout = cfg.task == Task::Circles;
    init_parameters(
        &cfg.mode_spec(),
        cfg.data_range()?,
        with_readout,
        sub_seed(seed, STREAM_INIT),
    )
}

fn train_spec<'a>(cfg: &'a ExperimentConfig, spec: &'a ModeSpec) -> TrainSpec<'a> {
    TrainSpec {
        mode: spec,
        objective: &cfg.objective,
        optim: &cfg.optimizer,
        integrator: &cfg.integrator,
    }
}

/// Evaluates given parameters on the test data of `seed`.
pub fn assess(
    cfg: &ExperimentConfig,
    seed: u64,
    params: Params,
    history: Vec<EpochRecord>,
    record_trajectory: bool,
) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = cfg.mode_spec();
    params.check(&spec)?;
    let mut data = build_data(cfg, seed)?;
    let (parts, test_log) = evaluate_objective(&train_spec(cfg, &spec), &params, &data.test, record_trajectory)?;

    let (train_accuracy, test_accuracy) = match &params.readout {
        Some(readout) if cfg.task == Task::Circles => {
            let train = data.first_train()?;
            let train_log = evaluate(&spec, &params, &train.inputs, &cfg.integrator, false)?;
            (
                Some(accuracy(readout, &train_log.final_state()[0], &train.targets)?),
                Some(accuracy(readout, &test_log.final_state()[0], &data.test.targets)?),
            )
        }
        _ => (None, None),
    };
    let long_range = if cfg.task == Task::Spiral {
        Some(long_range_error(cfg, &params)?)
    } else {
        None
    };
    let last = history.last();
    let summary = Summary {
        task: cfg.task,
        mode: spec.mode,
        alpha: spec.alpha,
        particles: spec.particles,
        blocks: (spec.mode == Mode::DynamicDirect).then_some(spec.blocks),
        seed,
        rng: RNG_NAME.to_string(),
        config_hash: cfg.hash(),
        parameter_count: count_parameters(&spec)?,
        epochs: history.len(),
        final_train_loss: last.map(|r| r.train_loss),
        final_val_loss: last.map(|r| r.val_loss),
        test_loss: parts.data,
        test_objective: parts.total,
        test_regularizer: parts.regularizer,
        complexity: complexity_metric(&test_log).ok(),
        h_drift: test_log
            .hamiltonian_values()
            .filter(|h| h.len() > 1)
            .and_then(|h| h_drift(&h)),
        train_accuracy,
        test_accuracy,
        long_range_error: long_range,
    };
    Ok(RunOutput {
        summary,
        history,
        params,
        test_log,
        test: data.test,
    })
}

/// Quartiles by linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Some((q(0.25), q(0.75)))
}

/// Flags values further than 1.5·IQR outside the interquartile range
/// (strictly). Non-finite values are never flagged.
pub fn iqr_outliers(values: &[f64]) -> Vec<bool> {
    let Some((q1, q3)) = quartiles(values) else {
        return vec![false; values.len()];
    };
    let fence = 1.5 * (q3 - q1);
    values
        .iter()
        .map(|&x| x.is_finite() && (x < q1 - fence || x > q3 + fence))
        .collect()
}

/// Median of the finite values.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[cfg(test)]
mod tests;
