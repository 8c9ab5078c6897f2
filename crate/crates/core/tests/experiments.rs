use std::fs;

use skipscale::experiments::{
    run_convergence_experiment, run_direction_experiment, run_experiment, run_kappa_sweep, run_m0_tracking,
    run_oscillation_experiment, summary_csv, write_outputs, ExperimentConfig, ExperimentKind, ModelSection,
    OptimizerKind, TrainSection,
};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        name: "small".into(),
        seeds: vec![0, 1, 2],
        policies: vec!["unit".into(), "cs:0.7".into()],
        model: ModelSection {
            m: 8,
            l: 2,
            n: 3,
            channels: 4,
            reduction: 2,
            last_layer_gain: 1.0,
        },
        train: TrainSection {
            steps: 40,
            batch: 4,
            log_interval: 5,
            window: 4,
            ema_decay: 0.9,
            save_checkpoints: false,
        },
        ..Default::default()
    }
}

#[test]
fn one_step_logs_one_row() {
    let mut c = small();
    c.train.steps = 1;
    c.policies.push("ls".into());
    let out = run_oscillation_experiment(&c, 1).unwrap();
    assert_eq!(out.records.len(), 9);
    for r in &out.records {
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].step, 1);
    }
}

#[test]
fn records_carry_hash_and_increasing_steps() {
    let c = small();
    let out = run_experiment(&c, 1).unwrap();
    assert_eq!(out.config_hash, c.hash());
    for r in &out.records {
        assert_eq!(r.config_hash, c.hash());
        assert!(r.rows.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(r.rows.last().unwrap().step, 40);
        assert_eq!(r.rows.len(), 8);
        assert!(r.rows.iter().all(|row| row.h_norms.len() == 3));
    }
    let mut d = small();
    d.train.batch = 5;
    assert_ne!(d.hash(), c.hash());
}

#[test]
fn duplicate_policy_gives_identical_runs() {
    let mut c = small();
    c.policies = vec!["cs:0.7".into(), "cs:0.7".into()];
    let out = run_experiment(&c, 1).unwrap();
    let runs = out.runs_of("cs:0.7");
    assert_eq!(runs.len(), 6);
    for (a, b) in runs[..3].iter().zip(&runs[3..]) {
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.rows, b.rows);
    }
    assert_eq!(out.report.policies.len(), 1);
}

#[test]
fn threshold_above_initial_loss_crosses_at_first_log() {
    let mut c = small();
    c.convergence.threshold = Some(1e300);
    let out = run_convergence_experiment(&c, 1).unwrap();
    let conv = out.report.convergence.as_ref().unwrap();
    for (_, steps, _) in &conv.per_policy {
        assert_eq!(*steps, Some(1.0));
    }
    for r in &out.records {
        assert!(r.steps_to_threshold(conv.threshold).unwrap() <= c.train.log_interval);
    }
    let mut never = small();
    never.convergence.threshold = Some(-1.0);
    let out = run_convergence_experiment(&never, 1).unwrap();
    assert!(out.report.convergence.unwrap().per_policy.iter().all(|p| p.1.is_none()));
    assert!(out.report.policies.iter().all(|p| p.median_steps_to_threshold == Some(f64::INFINITY)));
}

#[test]
fn direction_at_kappa_one_coincides() {
    let mut c = small();
    c.policies = vec!["cs:1".into(), "reverse-cs:1".into()];
    c.m0.probes = 8;
    c.m0.ascent_steps = 2;
    let out = run_direction_experiment(&c, 1).unwrap();
    let (f, r) = (out.runs_of("cs:1"), out.runs_of("reverse-cs:1"));
    for (a, b) in f.iter().zip(&r) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.final_loss_ema.to_bits(), b.final_loss_ema.to_bits());
    }
    let d = out.report.direction.unwrap();
    assert_eq!(d.forward_wins, 3);
    assert_eq!(d.s_forward, d.s_reverse);
    assert!(d.m0.unwrap() >= 1.0);
}

#[test]
fn direction_needs_matching_pair() {
    let mut c = small();
    c.kind = ExperimentKind::Direction;
    c.policies = vec!["cs:0.5".into(), "reverse-cs:0.7".into()];
    assert!(c.validate().unwrap_err().to_string().contains("policies"));
}

#[test]
fn sweep_at_one_is_the_baseline() {
    let mut c = small();
    c.sweep.kappas = vec![1.0];
    let sweep = run_kappa_sweep(&c, 1).unwrap();
    let mut base = small();
    base.policies = vec!["unit".into()];
    let unit = run_oscillation_experiment(&base, 1).unwrap();
    for (a, b) in sweep.records.iter().zip(&unit.records) {
        assert_eq!(a.rows, b.rows);
    }
    let pts = sweep.report.sweep.unwrap();
    assert_eq!(pts.len(), 1);
    assert_eq!(pts[0].median_final_loss_ema, unit.report.policies[0].median_final_loss_ema);
}

#[test]
fn sweep_above_one_needs_unsafe_flag() {
    let mut c = small();
    c.kind = ExperimentKind::KappaSweep;
    c.sweep.kappas = vec![0.7, 1.3];
    assert!(c.validate().is_err());
    c.unsafe_kappa = true;
    c.validate().unwrap();
}

#[test]
fn m0_tracking_with_zero_steps_has_one_point() {
    let mut c = small();
    c.train.steps = 0;
    c.m0.interval = 1;
    c.m0.ascent_steps = 3;
    let out = run_m0_tracking(&c, 1).unwrap();
    for r in &out.records {
        assert_eq!(r.m0.len(), 1);
        assert_eq!(r.m0[0].step, 0);
        assert!(r.rows.is_empty());
    }
    let m = out.report.m0.unwrap();
    assert_eq!(m.steps, vec![0]);
    assert!(m.all_at_least_one);
}

#[test]
fn m0_tracking_checkpoints() {
    let mut c = small();
    c.policies = vec!["unit".into()];
    c.m0.interval = 10;
    c.m0.ascent_steps = 3;
    let out = run_m0_tracking(&c, 1).unwrap();
    let m = out.report.m0.unwrap();
    assert_eq!(m.steps, vec![0, 10, 20, 30, 40]);
    assert!(m.median_m0.iter().all(|&v| v >= 1.0), "{:?}", m.median_m0);
    let mut bad = c.clone();
    bad.kind = ExperimentKind::M0Tracking;
    bad.m0.interval = 7;
    assert!(bad.validate().unwrap_err().to_string().contains("m0.interval"));
}

#[test]
fn parallelism_does_not_change_files() {
    let mut c = small();
    c.policies.push("ls".into());
    c.m0.interval = 20;
    c.m0.ascent_steps = 2;
    c.train.save_checkpoints = true;
    let tmp = tempfile::tempdir().unwrap();
    let a = write_outputs(&run_experiment(&c, 1).unwrap(), tmp.path()).unwrap();
    let b = write_outputs(&run_experiment(&c, 3).unwrap(), tmp.path()).unwrap();
    assert_ne!(a, b);
    let mut names: Vec<_> = fs::read_dir(a.join("runs")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9 * 3);
    for n in &names {
        assert_eq!(fs::read(a.join("runs").join(n)).unwrap(), fs::read(b.join("runs").join(n)).unwrap(), "{n:?}");
    }
    for f in ["summary.csv", "policies.csv", "report.json", "manifest.json", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn outputs_never_overwrite() {
    let mut c = small();
    c.train.steps = 2;
    let out = run_experiment(&c, 1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let first = write_outputs(&out, tmp.path()).unwrap();
    fs::write(first.join("marker"), "keep").unwrap();
    let second = write_outputs(&out, tmp.path()).unwrap();
    assert!(second.ends_with("small-1"));
    assert_eq!(fs::read_to_string(first.join("marker")).unwrap(), "keep");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], c.hash());
    assert!(manifest["rng_scheme"].as_str().is_some_and(|s| !s.is_empty()));
    assert!(manifest["version"].as_str().is_some());
    assert_eq!(manifest["config"]["model"]["N"], 3);
    let csv = fs::read_to_string(first.join("runs/unit_seed0.csv")).unwrap();
    assert!(csv.starts_with("step,loss,loss_ema,h_norm_0,h_norm_1,h_norm_2,max_grad_norm,m0_if_checkpoint\n"));
}

#[test]
fn divergence_is_isolated_to_its_cell() {
    let mut c = small();
    c.unsafe_kappa = true;
    c.policies = vec!["unit".into(), "cs:1e150".into()];
    c.optimizer.kind = OptimizerKind::Sgd;
    c.optimizer.lr = 1e-6;
    let out = run_experiment(&c, 2).unwrap();
    let big = out.report.policies[1].policy.clone();
    assert_eq!(out.runs_of(&big).len(), 3);
    for r in out.runs_of(&big) {
        assert_eq!(r.diverged_at, Some(1), "{r:?}");
        assert!(r.error.is_none());
    }
    for r in out.runs_of("unit") {
        assert!(!r.diverged());
        assert_eq!(r.steps_run, 40);
        assert!(r.final_loss_ema.is_finite());
    }
    let bad = out.policy_summary(&big).unwrap();
    assert_eq!(bad.diverged, 3);
    assert!(summary_csv(&out).lines().count() == 7);
}

/// At Kaiming init each block roughly doubles the squared norm, so deeper
/// unit-scaled models start with much larger features and swing more.
#[test]
fn deeper_unit_models_oscillate_more() {
    let run = |n: usize| {
        let mut c = small();
        c.policies = vec!["unit".into()];
        c.model.m = 16;
        c.model.n = n;
        c.train.steps = 300;
        c.train.log_interval = 10;
        c.train.window = 10;
        run_oscillation_experiment(&c, 1).unwrap().report.policies[0].median_oscillation
    };
    let (shallow, deep) = (run(8), run(16));
    assert!(deep >= shallow, "N=16 {deep} vs N=8 {shallow}");
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let c = small();
    let text = serde_json::to_string(&c).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"model": {"depth": 3}}"#).is_err());
}
