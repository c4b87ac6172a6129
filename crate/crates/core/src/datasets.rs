//! Seeded generators for the regression, spiral and classification tasks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegratorSpec};
use crate::tensor::Tensor;

/// Row-aligned inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × d`
    pub inputs: Tensor,
    /// `n × m`; trajectory targets are flattened point by point.
    pub targets: Tensor,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rank() != 2 || targets.rank() != 2 || inputs.rows() != targets.rows() {
            return Err(crate::ShapeError::Mismatch {
                op: "dataset",
                lhs: inputs.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            }
            .into());
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return Err(Error::InvalidSpec("dataset contains non-finite values".into()));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `idx`, in that order.
    pub fn gather(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(idx),
            targets: self.targets.gather_rows(idx),
        }
    }

    /// CSV header: `x0..x{d−1}, y0..y{m−1}`.
    pub fn column_names(&self) -> Vec<String> {
        (0..self.inputs.cols())
            .map(|i| format!("x{i}"))
            .chain((0..self.targets.cols()).map(|j| format!("y{j}")))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    /// `y = x² + 3/(1+x²)`
    QuadraticLike,
    /// `y = x³`
    Cubic,
}

impl FunctionKind {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            FunctionKind::QuadraticLike => x * x + 3.0 / (1.0 + x * x),
            FunctionKind::Cubic => x * x * x,
        }
    }
}

pub const DEFAULT_RANGE: (f64, f64) = (-1.5, 1.5);

fn check_interval(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::InvalidSpec(format!("{name} [{lo}, {hi}] is empty")));
    }
    Ok(())
}

/// `n` points with `x` uniform on `range` and `y = f(x)`.
pub fn gen_function_1d(kind: FunctionKind, n: usize, range: (f64, f64), seed: u64) -> Result<Dataset> {
    check_interval("input range", range)?;
    if n == 0 {
        return Err(Error::InvalidSpec("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(range.0..range.1)).collect();
    let y: Vec<f64> = x.iter().map(|&v| kind.eval(v)).collect();
    Dataset::new(Tensor::matrix(n, 1, x)?, Tensor::matrix(n, 1, y)?)
}

/// `ẋ = A x³` (componentwise cube) from a fixed start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpiralSpec {
    pub a: [[f64; 2]; 2],
    pub x0: [f64; 2],
    pub horizon: f64,
    pub step: f64,
}

impl Default for SpiralSpec {
    fn default() -> Self {
        Self {
            a: [[-0.1, 2.0], [-2.0, -0.1]],
            x0: [2.0, 0.0],
            horizon: 10.0,
            step: 0.05,
        }
    }
}

impl SpiralSpec {
    pub fn field(&self, x: &[f64; 2]) -> [f64; 2] {
        let c = [x[0].powi(3), x[1].powi(3)];
        [
            self.a[0][0] * c[0] + self.a[0][1] * c[1],
            self.a[1][0] * c[0] + self.a[1][1] * c[1],
        ]
    }

    fn integrator(&self, horizon: f64) -> Result<IntegratorSpec> {
        IntegratorSpec::rk4(self.step, horizon)
    }

    /// RK4 rollout of `steps` steps of the spiral step size from `start`.
    pub fn rollout(&self, start: [f64; 2], steps: usize) -> Result<Vec<[f64; 2]>> {
        if steps == 0 {
            return Ok(vec![start]);
        }
        let spec = self.integrator(self.step * steps as f64)?;
        let traj = integrate(
            |_, y: &Vec<f64>| {
                let f = self.field(&[y[0], y[1]]);
                Ok((f.to_vec(), ()))
            },
            start.to_vec(),
            &spec,
            true,
        )?;
        Ok(traj.states.iter().map(|s| [s[0], s[1]]).collect())
    }

    /// Reference trajectory on the grid `0, h, …, T`.
    pub fn reference(&self) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
        let spec = self.integrator(self.horizon)?;
        let points = self.rollout(self.x0, spec.num_steps())?;
        Ok((spec.grid(), points))
    }

    pub fn steps_for(&self, duration: f64) -> usize {
        (duration / self.step).round() as usize
    }
}

/// Cumulative polyline length of `points`.
pub fn arc_lengths(points: &[[f64; 2]]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(points.len());
    out.push(0.0);
    for w in points.windows(2) {
        acc += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        out.push(acc);
    }
    out
}

/// Trajectory snippets whose start points are uniform in arc length along the
/// reference spiral.
#[derive(Debug, Clone, PartialEq)]
pub struct SpiralSnippets {
    pub data: Dataset,
    /// Start time of each snippet on the reference trajectory.
    pub start_times: Vec<f64>,
    /// Arc-length position of each start point.
    pub start_arcs: Vec<f64>,
    pub steps: usize,
}

/// `n_snippets` snippets of `snippet_len` time units. Inputs are the start
/// points, targets every following grid point (`steps·2` columns).
pub fn gen_spiral(spec: &SpiralSpec, n_snippets: usize, snippet_len: f64, seed: u64) -> Result<SpiralSnippets> {
    if !(snippet_len > 0.0 && snippet_len <= spec.horizon) {
        return Err(Error::InvalidSpec(format!(
            "snippet length must lie in (0, {}], got {snippet_len}",
            spec.horizon
        )));
    }
    let steps = spec.steps_for(snippet_len).max(1);
    let (times, points) = spec.reference()?;
    let arcs = arc_lengths(&points);
    // the snippet must end before the horizon
    let last_start = spec.horizon - steps as f64 * spec.step;
    let k_last = times.partition_point(|&t| t <= last_start + 1e-12) - 1;
    let frac_last = (last_start - times[k_last]) / spec.step;
    let arc_max = if k_last + 1 < arcs.len() {
        arcs[k_last] + frac_last * (arcs[k_last + 1] - arcs[k_last])
    } else {
        arcs[k_last]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n_snippets * 2);
    let mut targets = Vec::with_capacity(n_snippets * steps * 2);
    let mut start_times = Vec::with_capacity(n_snippets);
    let mut start_arcs = Vec::with_capacity(n_snippets);
    for _ in 0..n_snippets {
        let s = rng.random_range(0.0..arc_max);
        // invert the piecewise-linear arc-length map
        let k = (arcs.partition_point(|&a| a <= s) - 1).min(arcs.len() - 2);
        let seg = arcs[k + 1] - arcs[k];
        let frac = if seg > 0.0 { (s - arcs[k]) / seg } else { 0.0 };
        let t0 = times[k] + frac * (times[k + 1] - times[k]);
        // exact start on the reference: one partial RK4 step from grid point k
        let start = if frac > 0.0 {
            let sub = IntegratorSpec::rk4(t0 - times[k], t0 - times[k])?;
            let traj = integrate(
                |_, y: &Vec<f64>| Ok((spec.field(&[y[0], y[1]]).to_vec(), ())),
                points[k].to_vec(),
                &sub,
                false,
            )?;
            let y = traj.final_state();
            [y[0], y[1]]
        } else {
            points[k]
        };
        let snippet = spec.rollout(start, steps)?;
        inputs.extend_from_slice(&start);
        for p in &snippet[1..] {
            targets.extend_from_slice(p);
        }
        start_times.push(t0);
        start_arcs.push(s);
    }
    Ok(SpiralSnippets {
        data: Dataset::new(
            Tensor::matrix(n_snippets, 2, inputs)?,
            Tensor::matrix(n_snippets, 2 * steps, targets)?,
        )?,
        start_times,
        start_arcs,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CirclesSpec {
    pub inner: (f64, f64),
    pub outer: (f64, f64),
}

impl Default for CirclesSpec {
    fn default() -> Self {
        Self {
            inner: (0.0, 1.0),
            outer: (1.5, 2.5),
        }
    }
}

impl CirclesSpec {
    pub fn validate(&self) -> Result<()> {
        check_interval("inner radii", self.inner)?;
        check_interval("outer radii", self.outer)?;
        if self.inner.0 < 0.0 || self.outer.0 < 0.0 {
            return Err(Error::InvalidSpec("radii must be non-negative".into()));
        }
        let disjoint = self.inner.1 < self.outer.0 || self.outer.1 < self.inner.0;
        if !disjoint {
            return Err(Error::InvalidSpec(format!(
                "annuli {:?} and {:?} overlap",
                self.inner, self.outer
            )));
        }
        Ok(())
    }
}

/// `n_per_class` points per annulus, class 0 then class 1. Radius uniform in
/// the annulus' interval, angle uniform in `[0, 2π)`.
pub fn gen_concentric_circles(spec: &CirclesSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * n_per_class;
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (label, (lo, hi)) in [(0.0, spec.inner), (1.0, spec.outer)] {
        for _ in 0..n_per_class {
            let r = rng.random_range(lo..hi);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            inputs.extend_from_slice(&[r * phi.cos(), r * phi.sin()]);
            labels.push(label);
        }
    }
    Dataset::new(Tensor::matrix(n, 2, inputs)?, Tensor::matrix(n, 1, labels)?)
}
