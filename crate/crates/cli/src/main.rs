//! `shooting`: config-driven experiment runner.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
//! 1 anything else (I/O).

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use shooting_core::experiment::{self, iqr_outliers, ExperimentConfig, Summary, Task};
use shooting_core::parameterizations::{count_parameters, Mode, ModeSpec};
use shooting_core::Activation;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] shooting_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(shooting_core::Error::InvalidSpec(_)) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "shooting", version, about = "Particle-ensemble shooting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `output_dir` of the config, else `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the test rollout to `trajectory.csv`.
    #[arg(long)]
    record_trajectory: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed.
    Fit(RunArgs),
    /// Evaluate stored parameters on the test data of each seed.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// `params.json` from a previous fit.
        #[arg(long)]
        params: PathBuf,
    },
    /// Train every configured mode × α × seed and tabulate the results.
    Sweep(RunArgs),
    /// Print the number of learnable parameters of a model.
    ParamCount {
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        alpha: usize,
        /// Number of particles (particle modes).
        #[arg(long)]
        particles: Option<usize>,
        /// Piecewise-constant blocks (`dynamic_direct`).
        #[arg(long)]
        blocks: Option<usize>,
    },
    /// Write the train / validation / test data of each seed as CSV.
    GenData(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fit(args) => cmd_fit(&args),
        Command::Eval { run, params } => cmd_eval(&run, &params),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::ParamCount {
            mode,
            d,
            alpha,
            particles,
            blocks,
        } => {
            let spec = ModeSpec {
                mode,
                blocks: blocks.unwrap_or(if mode == Mode::DynamicDirect {
                    shooting_core::parameterizations::DEFAULT_BLOCKS
                } else {
                    1
                }),
                alpha,
                particles,
                d,
                activation: Activation::Relu,
                weights: Default::default(),
            };
            println!("{}", count_parameters(&spec)?);
            Ok(())
        }
        Command::GenData(args) => cmd_gen_data(&args),
    }
}

/// Parses and validates the configuration, applying the `--seed` override.
/// Nothing is written before this succeeds.
fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((cfg, out))
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SHOOTING_NUM_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::Config(format!("SHOOTING_NUM_THREADS must be a positive integer, got `{v}`"))
            })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Runs `job` for every seed in parallel; reports the first failure after
/// all seeds finished.
fn per_seed(cfg: &ExperimentConfig, job: impl Fn(u64) -> Result<(), CliError> + Sync) -> Result<(), CliError> {
    let pool = thread_pool()?;
    let results: Vec<Result<(), CliError>> = pool.install(|| cfg.seeds.par_iter().map(|&s| job(s)).collect());
    results.into_iter().collect()
}

fn print_summary(s: &Summary) {
    println!(
        "seed {}: test_loss {:.6e}  complexity {}  parameters {}",
        s.seed,
        s.test_loss,
        s.complexity.map_or("-".into(), |c| format!("{c:.4}")),
        s.parameter_count
    );
}

fn cmd_fit(args: &RunArgs) -> Result<(), CliError> {
    let (cfg, out) = load(args)?;
    per_seed(&cfg, |seed| {
        let run = experiment::run(&cfg, seed, args.record_trajectory).map_err(|e| {
            eprintln!("seed {seed}: {e}");
            e
        })?;
        output::write_run(&seed_dir(&out, seed), &cfg, &run, args.record_trajectory)?;
        print_summary(&run.summary);
        Ok(())
    })
}

fn cmd_eval(args: &RunArgs, params: &Path) -> Result<(), CliError> {
    let (cfg, out) = load(args)?;
    let stored = output::read_params(params, &cfg)?;
    per_seed(&cfg, |seed| {
        let run = experiment::assess(&cfg, seed, stored.clone(), vec![], args.record_trajectory)?;
        output::write_run(&seed_dir(&out, seed), &cfg, &run, args.record_trajectory)?;
        print_summary(&run.summary);
        Ok(())
    })
}

fn cmd_gen_data(args: &RunArgs) -> Result<(), CliError> {
    let (cfg, out) = load(args)?;
    for &seed in &cfg.seeds {
        let dir = seed_dir(&out, seed);
        fs::create_dir_all(&dir)?;
        let mut data = experiment::build_data(&cfg, seed)?;
        output::write_dataset(&dir.join("train.csv"), &data.first_train()?)?;
        if let Some(val) = data.source.validation() {
            output::write_dataset(&dir.join("val.csv"), val)?;
        }
        output::write_dataset(&dir.join("test.csv"), &data.test)?;
        if cfg.task == Task::Spiral {
            let (times, points) = cfg.data.spiral.reference()?;
            output::write_points(&dir.join("reference.csv"), &times, &points)?;
        }
        println!("{}", dir.display());
    }
    Ok(())
}

struct Cell {
    mode: Mode,
    alpha: usize,
    seed: u64,
    result: Result<Summary, String>,
}

fn cmd_sweep(args: &RunArgs) -> Result<(), CliError> {
    let (cfg, out) = load(args)?;
    let grid: Vec<(Mode, usize, u64)> = cfg
        .sweep
        .modes
        .iter()
        .flat_map(|&m| cfg.sweep.alphas.iter().map(move |&a| (m, a)))
        .flat_map(|(m, a)| cfg.seeds.iter().map(move |&s| (m, a, s)))
        .collect();
    let pool = thread_pool()?;
    let mut first_error: Option<CliError> = None;
    let cells: Vec<(Cell, Option<CliError>)> = pool.install(|| {
        grid.par_iter()
            .map(|&(mode, alpha, seed)| {
                let cell_cfg = cfg.with_cell(mode, alpha);
                let dir = out.join(format!("{mode}_a{alpha}")).join(format!("seed_{seed}"));
                let outcome = experiment::run(&cell_cfg, seed, args.record_trajectory)
                    .map_err(CliError::from)
                    .and_then(|run| {
                        output::write_run(&dir, &cell_cfg, &run, args.record_trajectory)?;
                        Ok(run.summary)
                    });
                match outcome {
                    Ok(s) => (
                        Cell {
                            mode,
                            alpha,
                            seed,
                            result: Ok(s),
                        },
                        None,
                    ),
                    Err(e) => (
                        Cell {
                            mode,
                            alpha,
                            seed,
                            result: Err(e.to_string()),
                        },
                        Some(e),
                    ),
                }
            })
            .collect()
    });
    let mut rows = vec![];
    for (cell, err) in cells {
        if first_error.is_none() {
            first_error = err;
        }
        rows.push(cell);
    }
    fs::create_dir_all(&out)?;
    write_sweep(&out.join("sweep.csv"), &rows)?;
    let succeeded = rows.iter().filter(|c| c.result.is_ok()).count();
    println!(
        "{succeeded}/{} runs succeeded; table in {}",
        rows.len(),
        out.join("sweep.csv").display()
    );
    match first_error {
        Some(e) if succeeded == 0 => Err(e),
        _ => Ok(()),
    }
}

fn write_sweep(path: &Path, rows: &[Cell]) -> Result<(), CliError> {
    // outliers are judged within each (mode, α) cell across seeds
    let mut test_flags = vec![false; rows.len()];
    let mut cx_flags = vec![false; rows.len()];
    let mut keys: Vec<(Mode, usize)> = rows.iter().map(|c| (c.mode, c.alpha)).collect();
    keys.dedup();
    for key in keys {
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| (rows[i].mode, rows[i].alpha) == key)
            .collect();
        let metric = |f: &dyn Fn(&Summary) -> Option<f64>| -> Vec<f64> {
            idx.iter()
                .map(|&i| rows[i].result.as_ref().ok().and_then(f).unwrap_or(f64::NAN))
                .collect()
        };
        let t = iqr_outliers(&metric(&|s| Some(s.test_loss)));
        let c = iqr_outliers(&metric(&|s| s.complexity));
        for (k, &i) in idx.iter().enumerate() {
            test_flags[i] = t[k];
            cx_flags[i] = c[k];
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "mode",
        "alpha",
        "seed",
        "status",
        "test_loss",
        "complexity",
        "param_count",
        "test_loss_outlier",
        "complexity_outlier",
        "long_range_error",
        "train_accuracy",
        "error",
    ])?;
    for (i, c) in rows.iter().enumerate() {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let record = match &c.result {
            Ok(s) => vec![
                c.mode.to_string(),
                c.alpha.to_string(),
                c.seed.to_string(),
                "ok".into(),
                s.test_loss.to_string(),
                opt(s.complexity),
                s.parameter_count.to_string(),
                test_flags[i].to_string(),
                cx_flags[i].to_string(),
                opt(s.long_range_error),
                opt(s.train_accuracy),
                String::new(),
            ],
            Err(e) => vec![
                c.mode.to_string(),
                c.alpha.to_string(),
                c.seed.to_string(),
                "failed".into(),
                String::new(),
                String::new(),
                String::new(),
                "false".into(),
                "false".into(),
                String::new(),
                String::new(),
                e.clone(),
            ],
        };
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
