use super::*;
use crate::trainer::Scheduler;

fn parse(text: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml_str(text)
}

#[test]
fn minimal_config_takes_task_defaults() {
    for task in Task::ALL {
        let cfg = parse(&format!("task = \"{task}\"")).unwrap();
        assert_eq!(cfg, ExperimentConfig::defaults(task));
    }
    let cfg = parse("task = \"quadratic_like\"").unwrap();
    assert_eq!(count_parameters(&cfg.mode_spec()).unwrap(), 542);
    assert_eq!(cfg.optimizer.epochs, 500);
    assert_eq!(cfg.optimizer.freeze_positions_epochs, 50);
    assert_eq!(cfg.integrator.step, 0.1);
    assert_eq!(cfg.model.activation, Activation::Relu);
    let spiral = parse("task = \"spiral\"").unwrap();
    assert_eq!(spiral.optimizer.epochs, 1500);
    assert_eq!(spiral.objective.lambda_reg, 0.01);
    assert_eq!(spiral.integrator.horizon, 0.25);
}

#[test]
fn overrides_merge_into_defaults() {
    let cfg = parse(
        r#"
task = "cubic"
seeds = [3, 4]
[model]
alpha = 4
[optimizer]
epochs = 7
scheduler = { kind = "cosine", t_max = 7 }
"#,
    )
    .unwrap();
    assert_eq!(cfg.seeds, vec![3, 4]);
    assert_eq!(cfg.model.alpha, 4);
    assert_eq!(cfg.model.particles, 2);
    assert_eq!(cfg.optimizer.epochs, 7);
    assert_eq!(cfg.optimizer.batch_size, 50);
    assert_eq!(cfg.optimizer.scheduler, Scheduler::Cosine { t_max: 7 });
}

#[test]
fn bad_configs_are_rejected() {
    let bad = [
        "task = ",
        "seeds = [1]",
        "task = \"mnist\"",
        "task = \"cubic\"\nunknown = 1",
        "task = \"cubic\"\n[model]\nalpha = 0",
        "task = \"cubic\"\nseeds = []",
        "task = \"cubic\"\n[objective]\nloss = \"binary_cross_entropy\"",
        "task = \"cubic\"\n[integrator]\nstep = 0.3",
        "task = \"cubic\"\n[model]\nmode = \"dynamic_direct\"\nblocks = 3",
        "task = \"spiral\"\n[integrator]\nstep = 0.1",
        "task = \"circles\"\n[data.circles]\ninner = [0.0, 2.0]",
        "task = \"cubic\"\n[data]\nrange = [1.0, 1.0]",
    ];
    for text in bad {
        assert!(matches!(parse(text), Err(Error::InvalidSpec(_))), "accepted: {text:?}");
    }
}

#[test]
fn hash_tracks_every_field() {
    let base = ExperimentConfig::defaults(Task::QuadraticLike);
    let h = base.hash();
    assert_eq!(h.len(), 64);
    assert_eq!(h, parse(&base.to_toml_string().unwrap()).unwrap().hash());
    let mut variants = vec![];
    let mut c = base.clone();
    c.seeds = vec![1];
    variants.push(c);
    let mut c = base.clone();
    c.model.weights.theta3 = 9.0;
    variants.push(c);
    let mut c = base.clone();
    c.optimizer.learning_rate = 0.02;
    variants.push(c);
    let mut c = base.clone();
    c.data.circles.outer.1 = 3.0;
    variants.push(c);
    let mut c = base.clone();
    c.output_dir = Some("runs".into());
    variants.push(c);
    let mut c = base.clone();
    c.sweep.alphas = vec![16, 32];
    variants.push(c);
    for v in variants {
        assert_ne!(v.hash(), h);
    }
}

#[test]
fn iqr_rule() {
    assert_eq!(
        iqr_outliers(&[1.0, 1.0, 1.0, 1.0, 100.0]),
        vec![false, false, false, false, true]
    );
    assert_eq!(iqr_outliers(&[1.0, 2.0, 3.0, 4.0]), vec![false; 4]);
    assert_eq!(iqr_outliers(&[]), Vec::<bool>::new());
    assert_eq!(iqr_outliers(&[f64::NAN, 1.0]), vec![false, false]);
    // q1 = 2, q3 = 4 → fences at −1 and 7
    assert_eq!(quartiles(&[1.0, 2.0, 3.0, 4.0, 5.0]), Some((2.0, 4.0)));
    // six values: q1 = 2.25, q3 = 4.75 → upper fence 8.5
    assert_eq!(iqr_outliers(&[1.0, 2.0, 3.0, 4.0, 5.0, 8.4]), vec![false; 6]);
    assert_eq!(
        iqr_outliers(&[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]),
        vec![false, false, false, false, false, true]
    );
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(&[f64::NAN]), None);
}

#[test]
fn seed_streams_are_distinct_and_stable() {
    let s: Vec<u64> = (1..=5).map(|k| sub_seed(7, k)).collect();
    for i in 0..s.len() {
        for j in 0..i {
            assert_ne!(s[i], s[j]);
        }
    }
    assert_eq!(sub_seed(7, 3), sub_seed(7, 3));
    assert_ne!(sub_seed(7, 3), sub_seed(8, 3));
}

#[test]
fn data_is_shared_across_modes() {
    let cfg = parse("task = \"quadratic_like\"\n[data]\nn_train = 20\nn_val = 5\nn_test = 10").unwrap();
    let a = build_data(&cfg, 3).unwrap();
    let b = build_data(&cfg.with_cell(Mode::StaticDirect, 4), 3).unwrap();
    assert_eq!(a.test, b.test);
    let c = build_data(&cfg, 4).unwrap();
    assert_ne!(a.test, c.test);
    assert_eq!(a.source.validation().unwrap().len(), 5);
}

#[test]
fn zero_epoch_run_reports_initial_losses() {
    let cfg = parse("task = \"quadratic_like\"\n[optimizer]\nepochs = 0\n[data]\nn_train = 10\nn_val = 0\nn_test = 8")
        .unwrap();
    let out = run(&cfg, 0, true).unwrap();
    let s = &out.summary;
    assert_eq!(s.epochs, 0);
    assert_eq!(s.final_train_loss, None);
    assert_eq!(s.parameter_count, 542);
    assert_eq!(s.rng, "ChaCha8Rng");
    assert_eq!(s.config_hash, cfg.hash());
    assert!(s.h_drift.unwrap() < 1e-3);
    assert!(out.test_log.recorded);
    // same parameters, independent evaluation
    let spec = cfg.mode_spec();
    let init = init_parameters(&spec, cfg.data_range().unwrap(), false, sub_seed(0, 4)).unwrap();
    assert_eq!(init, out.params);
    let log = evaluate(&spec, &init, &out.test.inputs, &cfg.integrator, false).unwrap();
    let x = &log.final_state()[0];
    let mse = x
        .data()
        .iter()
        .zip(out.test.targets.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / 8.0;
    assert!((s.test_loss - mse).abs() <= 1e-12 * mse.max(1.0));
}

#[test]
fn runs_are_deterministic() {
    let cfg = parse(
        "task = \"cubic\"\n[optimizer]\nepochs = 2\n[data]\nn_train = 20\nn_val = 10\nn_test = 10\n[model]\nalpha = 2",
    )
    .unwrap();
    let a = run(&cfg, 5, false).unwrap();
    let b = run(&cfg, 5, false).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.summary, b.summary);
}

#[test]
fn pasted_identity_rollout() {
    let cfg = ExperimentConfig::defaults(Task::Spiral);
    let params = Params::zeros(&cfg.mode_spec()).unwrap();
    let pred = pasted_rollout(&cfg, &params).unwrap();
    let (_, reference) = cfg.data.spiral.reference().unwrap();
    assert_eq!(pred.len(), reference.len());
    assert!(pred.iter().all(|p| *p == [2.0, 0.0]));
    let want = reference[1..]
        .iter()
        .map(|r| ((r[0] - 2.0).powi(2) + r[1].powi(2)).sqrt())
        .sum::<f64>()
        / (reference.len() - 1) as f64;
    let got = long_range_error(&cfg, &params).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn spiral_and_circles_runs() {
    let spiral = parse(
        "task = \"spiral\"\n[optimizer]\nepochs = 1\n[data]\nn_train = 4\nn_val = 3\nn_test = 5\n[model]\nalpha = 1\nparticles = 2",
    )
    .unwrap();
    let out = run(&spiral, 1, false).unwrap();
    assert!(out.summary.long_range_error.unwrap().is_finite());
    assert_eq!(out.test.targets.shape(), &[5, 10]);
    assert_eq!(out.summary.train_accuracy, None);

    let circles = parse(
        "task = \"circles\"\n[optimizer]\nepochs = 1\n[data]\nn_train = 6\nn_val = 0\nn_test = 4\n[model]\nalpha = 1\nparticles = 3",
    )
    .unwrap();
    let out = run(&circles, 1, false).unwrap();
    let acc = out.summary.train_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(out.test.len(), 8);
    assert!(out.params.readout.is_some());
}
