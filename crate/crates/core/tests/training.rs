mod common;

use foldact::config::{BaselineMode, RunConfig};
use foldact::policy::Arch;
use foldact::rundir::{Manifest, RunDir};
use foldact::run::run;
use foldact::trainer::{StepMetrics, Trainer};
use foldact::Error;

fn tiny(mode: BaselineMode) -> RunConfig {
    let mut cfg = RunConfig { seed: 5, batch_size: 4, total_steps: 3, checkpoint_every: 2, baseline_mode: mode, ..RunConfig::default() };
    cfg.policy = Arch { d_model: 16, n_layers: 1, n_heads: 2, ..cfg.policy };
    cfg
}

fn steps(cfg: RunConfig, n: usize) -> Vec<StepMetrics> {
    let mut t = Trainer::new(cfg).unwrap();
    (0..n).map(|_| t.train_step().unwrap().metrics).collect()
}

fn without_time(mut m: StepMetrics) -> StepMetrics {
    m.wall_time = 0.0;
    m
}

#[test]
fn identical_configs_give_identical_metric_streams() {
    let a: Vec<_> = steps(tiny(BaselineMode::Foldact), 3).into_iter().map(without_time).collect();
    let b: Vec<_> = steps(tiny(BaselineMode::Foldact), 3).into_iter().map(without_time).collect();
    assert_eq!(a, b);
    let other: Vec<_> = steps(RunConfig { seed: 6, ..tiny(BaselineMode::Foldact) }, 3).into_iter().map(without_time).collect();
    assert_ne!(a, other);
}

#[test]
fn step_metrics_are_consistent() {
    for m in steps(tiny(BaselineMode::Foldact), 3) {
        assert!(m.trained_turn_fraction > 0.0 && m.trained_turn_fraction <= 1.0);
        assert_eq!(
            m.forward_token_count,
            m.rollout_forward_tokens + m.training_forward_tokens + m.consistency_forward_tokens + m.diagnostic_forward_tokens
        );
        assert!((0.0..=1.0).contains(&m.mean_task_reward));
        assert!(!m.failed);
    }
}

#[test]
fn no_consistency_never_runs_full_context_passes() {
    for m in steps(tiny(BaselineMode::NoConsistency), 3) {
        assert_eq!(m.l_consistency, 0.0);
        assert_eq!(m.consistency_forward_tokens, 0);
    }
}

#[test]
fn no_folding_has_unit_compression_and_zero_consistency() {
    for m in steps(tiny(BaselineMode::NoFolding), 3) {
        assert_eq!(m.summary_rate, 0.0);
        assert_eq!(m.l_consistency, 0.0);
        assert_eq!(m.consistency_forward_tokens, 0);
        for b in m.compression {
            assert_eq!(b.visible_tokens, b.history_tokens);
        }
    }
}

#[test]
fn full_context_training_trains_every_turn_on_full_histories() {
    let full = steps(tiny(BaselineMode::FullContextTraining), 2);
    let folded = steps(tiny(BaselineMode::NoConsistency), 2);
    // Same seeds and the same initial policy give the same first rollout batch.
    assert_eq!(full[0].rollout_forward_tokens, folded[0].rollout_forward_tokens);
    assert_eq!(full[0].trained_turn_fraction, 1.0);
    assert_eq!(full[0].consistency_forward_tokens, 0);
    assert!(full[0].training_forward_tokens > folded[0].training_forward_tokens);
}

#[test]
fn zero_steps_write_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = run(RunConfig { total_steps: 0, ..tiny(BaselineMode::Foldact) }, tmp.path()).unwrap();
    assert_eq!(summary.completed_steps, 0);
    let dir = RunDir::new(tmp.path());
    assert_eq!(dir.checkpoint_steps().unwrap(), vec![0]);
    let metrics = std::fs::read_to_string(dir.metrics()).unwrap();
    assert_eq!(metrics.lines().count(), 2, "schema line and header only");
    assert_eq!(std::fs::read_dir(tmp.path().join("trajectories")).unwrap().count(), 0);
    Manifest::read(&dir).unwrap().verify(&dir).unwrap();
}

#[test]
fn checkpoints_follow_the_interval_and_the_final_step() {
    let tmp = tempfile::tempdir().unwrap();
    let summary = run(RunConfig { total_steps: 5, ..tiny(BaselineMode::Foldact) }, tmp.path()).unwrap();
    assert_eq!(summary.metrics.len(), 5);
    let dir = RunDir::new(tmp.path());
    assert_eq!(dir.checkpoint_steps().unwrap(), vec![0, 2, 4, 5]);
    let manifest = Manifest::read(&dir).unwrap();
    manifest.verify(&dir).unwrap();
    assert!(manifest.files.contains_key("report/cost.csv"));
    assert!(manifest.finished_at.is_some());
}

#[test]
fn an_existing_run_is_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    run(tiny(BaselineMode::Foldact), tmp.path()).unwrap();
    assert!(matches!(run(tiny(BaselineMode::Foldact), tmp.path()), Err(Error::Precondition(_))));
}

#[test]
fn invalid_configs_are_rejected_before_any_io() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = RunConfig { p_drop: 1.0, ..tiny(BaselineMode::Foldact) };
    let target = tmp.path().join("never");
    assert!(matches!(run(bad, &target), Err(Error::Config { .. })));
    assert!(!target.exists());
}
