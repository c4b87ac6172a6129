//! Files written by the runner. All CSVs are comma-separated with a header
//! row; numbers use Rust's shortest round-trip formatting, so re-reading a
//! file gives back the exact values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shooting_core::datasets::Dataset;
use shooting_core::experiment::{ExperimentConfig, RunOutput};
use shooting_core::parameterizations::{Params, Readout, TrajectoryLog};
use shooting_core::trainer::EpochRecord;
use shooting_core::Tensor;

use crate::CliError;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "lr", "complexity"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.lr.to_string(),
            opt(r.complexity),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Column names of flattened `θ`: `theta1_i_j`, `b1_i`, … (row-major).
pub fn theta_columns(shapes: &[Vec<usize>]) -> Vec<String> {
    const NAMES: [&str; 5] = ["theta1", "b1", "theta2", "b2", "theta3"];
    let mut cols = vec![];
    for (k, shape) in shapes.iter().enumerate() {
        let name = NAMES.get(k).map(|s| s.to_string()).unwrap_or(format!("c{k}"));
        match shape.as_slice() {
            [n] => cols.extend((0..*n).map(|i| format!("{name}_{i}"))),
            [r, c] => {
                for i in 0..*r {
                    cols.extend((0..*c).map(|j| format!("{name}_{i}_{j}")));
                }
            }
            _ => cols.push(name),
        }
    }
    cols
}

/// `θ(t)` at every integrator stage: `step, stage, t, θ…`. The closing row
/// `step = N, stage = 0` holds `θ(T)`.
pub fn write_theta(path: &Path, shapes: &[Vec<usize>], log: &TrajectoryLog) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "stage".into(), "t".into()];
    header.extend(theta_columns(shapes));
    w.write_record(&header)?;
    let row = |step: usize, stage: usize, t: f64, th: &[Tensor]| {
        let mut r = vec![step.to_string(), stage.to_string(), t.to_string()];
        r.extend(th.iter().flat_map(|x| x.data().iter().map(f64::to_string)));
        r
    };
    for (n, stages) in log.stage_theta.iter().enumerate() {
        for (s, (t, th)) in stages.iter().enumerate() {
            w.write_record(row(n, s, *t, th))?;
        }
    }
    let last = log.times.len() - 1;
    w.write_record(row(last, 0, log.times[last], &log.theta[last]))?;
    w.flush()?;
    Ok(())
}

/// Recorded states: `step, t, sample, x…, v…`, one row per grid point and
/// sample.
pub fn write_trajectory(path: &Path, log: &TrajectoryLog) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let first = &log.states[0];
    let mut header = vec!["step".to_string(), "t".into(), "sample".into()];
    for (slot, name) in first.iter().zip(["x", "v", "s"]) {
        header.extend((0..slot.cols()).map(|j| format!("{name}{j}")));
    }
    w.write_record(&header)?;
    for (n, state) in log.states.iter().enumerate() {
        for i in 0..state[0].rows() {
            let mut r = vec![n.to_string(), log.times[n].to_string(), i.to_string()];
            for slot in state {
                r.extend(slot.row(i).iter().map(f64::to_string));
            }
            w.write_record(&r)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(data.column_names())?;
    for i in 0..data.len() {
        let row = data.inputs.row(i).iter().chain(data.targets.row(i));
        w.write_record(row.map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_points(path: &Path, times: &[f64], points: &[[f64; 2]]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x0", "x1"])?;
    for (t, p) in times.iter().zip(points) {
        w.write_record([t.to_string(), p[0].to_string(), p[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredTensor {
    kind: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn write_params(path: &Path, params: &Params) -> Result<(), CliError> {
    let stored: Vec<StoredTensor> = params
        .tensors()
        .into_iter()
        .zip(params.kinds())
        .map(|(t, k)| StoredTensor {
            kind: format!("{k:?}"),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&stored)?)?;
    Ok(())
}

/// Reads `params.json` back into the layout of `cfg`'s model.
pub fn read_params(path: &Path, cfg: &ExperimentConfig) -> Result<Params, CliError> {
    let stored: Vec<StoredTensor> = serde_json::from_str(&fs::read_to_string(path)?)?;
    let spec = cfg.mode_spec();
    let mut params = Params::zeros(&spec)?;
    if stored.iter().any(|t| t.kind.starts_with("Readout")) {
        params = params.with_readout(Readout::zeros(spec.d));
    }
    let kinds = params.kinds();
    let mut slots = params.tensors_mut();
    if slots.len() != stored.len() {
        return Err(CliError::Config(format!(
            "{} holds {} tensors, the configured model has {}",
            path.display(),
            stored.len(),
            slots.len()
        )));
    }
    for ((slot, kind), t) in slots.iter_mut().zip(kinds).zip(stored) {
        if slot.shape() != t.shape.as_slice() || format!("{kind:?}") != t.kind {
            return Err(CliError::Config(format!(
                "{}: tensor {} {:?} does not match the configured model ({kind:?} {:?})",
                path.display(),
                t.kind,
                t.shape,
                slot.shape()
            )));
        }
        **slot = Tensor::new(&t.shape, t.data).map_err(shooting_core::Error::from)?;
    }
    Ok(params)
}

/// Writes everything of one run into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput, trajectory: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let shapes = cfg.mode_spec().model()?.theta_shapes();
    write_history(&dir.join("history.csv"), &out.history)?;
    write_theta(&dir.join("theta_t.csv"), &shapes, &out.test_log)?;
    if trajectory {
        write_trajectory(&dir.join("trajectory.csv"), &out.test_log)?;
    }
    write_params(&dir.join("params.json"), &out.params)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&out.summary)?)?;
    Ok(())
}
