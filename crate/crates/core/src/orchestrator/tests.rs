use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use tempfile::TempDir;

use super::*;
use crate::ingest::{SyntheticGenerator, SyntheticSpec};
use crate::rng::SplitMix64;

const TASKS: [TaskType; 3] = [
    TaskType::VisualGroundingBox,
    TaskType::PlanningQa,
    TaskType::IndustrialCot,
];

fn fixture(per_task: usize, shard_size: usize) -> TempDir {
    let dir = TempDir::new().unwrap();
    let samples: Vec<Sample> = SyntheticGenerator::new(SyntheticSpec::new(11, TASKS.iter().map(|&t| (t, per_task))))
        .map(|item| item.sample)
        .collect();
    write_task_shards(|_| samples.iter().cloned(), shard_size, dir.path(), 11).unwrap();
    dir
}

fn config(total: u64, interval: u64) -> RunConfig {
    let mut c = RunConfig::new(total, 4, interval, 7);
    c.keep_last = 1000;
    c
}

fn trainer(c: &RunConfig) -> SimulatedTrainer {
    SimulatedTrainer::new(c.trainer.clone(), c.seed)
}

fn full_run(c: &RunConfig, data_dir: &Path, out: &Path) -> (RunSummary, Vec<StepTrace>) {
    let mut data = TaskData::open(data_dir).unwrap();
    let mut traces = Vec::new();
    let mut obs = |t: &StepTrace| traces.push(t.clone());
    let opts = RunOptions {
        observer: Some(&mut obs),
        ..Default::default()
    };
    let outcome = run(c, &mut trainer(c), &mut data, out, opts).unwrap();
    (outcome.summary, traces)
}

fn loss_events(out: &Path) -> Vec<(u64, TaskType, f64)> {
    std::fs::read_to_string(out.join(METRICS_LOG))
        .unwrap()
        .lines()
        .filter_map(|l| {
            let e: MetricEvent = serde_json::from_str(l).unwrap();
            match e.kind {
                MetricKind::TaskLoss { task, value } => Some((e.step, task, value)),
                _ => None,
            }
        })
        .collect()
}

#[test]
fn write_task_shards_splits_by_task() {
    let data = fixture(9, 4);
    for t in TASKS {
        let m = ShardManifest::load(&data.path().join(t.as_str())).unwrap();
        assert_eq!(m.total_records, 9);
        assert_eq!(m.shard_count(), 3);
    }
    assert!(!data.path().join(TaskType::EgoViewMcq.as_str()).exists());
    assert_eq!(TaskData::open(data.path()).unwrap().tasks(), TASKS.to_vec());
}

#[test]
fn empty_data_dir_is_no_data() {
    let dir = TempDir::new().unwrap();
    assert!(matches!(TaskData::open(dir.path()), Err(RunError::NoData(_))));
}

#[test]
fn hundred_steps_ten_checkpoints() {
    let data = fixture(30, 8);
    let out = TempDir::new().unwrap();
    let c = config(100, 10);
    let (s, traces) = full_run(&c, data.path(), out.path());
    assert_eq!(s.steps_completed, 100);
    assert_eq!(s.checkpoints_written, (1..=10).map(|i| i * 10).collect::<Vec<_>>());
    let on_disk = list_checkpoints(out.path()).unwrap();
    assert_eq!(on_disk.len(), 10);
    for e in &on_disk {
        verify_checkpoint(&e.path).unwrap();
    }
    assert_eq!(
        s.final_checkpoint.as_deref(),
        Some(checkpoint_dir_name(100, CheckpointKind::Periodic).as_str())
    );
    assert_eq!(traces.len(), 100);
    assert!(traces.iter().all(|t| t.ids.len() == 4));
    assert_eq!(s.draws_per_task.values().sum::<u64>(), 100);
    assert_eq!(s.samples_consumed, 400);
    assert_eq!(s.sampler_updates, 10);
    assert!((s.final_weights.values().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(out.path().join(RUN_METADATA).is_file());
    assert_eq!(loss_events(out.path()).len(), 100);
}

#[test]
fn batches_stay_within_their_task_and_wrap_epochs() {
    let data = fixture(6, 4);
    let out = TempDir::new().unwrap();
    let (s, traces) = full_run(&config(40, 10), data.path(), out.path());
    let mut seen: BTreeMap<TaskType, Vec<String>> = BTreeMap::new();
    for t in &traces {
        seen.entry(t.task).or_default().extend(t.ids.iter().cloned());
    }
    for (task, ids) in &seen {
        // Six records per task: consecutive blocks of six repeat exactly.
        for chunk in ids.chunks(6).filter(|c| c.len() == 6) {
            assert_eq!(chunk, &ids[..6], "{task}");
        }
        let consumed = s.draws_per_task[task] * 4;
        let epoch = s.epochs_per_task[task];
        assert!(epoch * 6 <= consumed && consumed <= (epoch + 1) * 6, "{task}");
    }
}

#[test]
fn sigma_zero_losses_decay() {
    let data = fixture(20, 8);
    let out = TempDir::new().unwrap();
    let mut c = config(60, 10);
    c.trainer.default_curve = LossCurve {
        l0: 2.5,
        k: 0.01,
        sigma: 0.0,
    };
    full_run(&c, data.path(), out.path());
    let mut last: BTreeMap<TaskType, (u64, f64)> = BTreeMap::new();
    for (step, task, v) in loss_events(out.path()) {
        assert!((v - 2.5 * (-0.01 * step as f64).exp()).abs() < 1e-12);
        if let Some(&(_, prev)) = last.get(&task) {
            assert!(v < prev);
        }
        last.insert(task, (step, v));
    }
    assert!(last.len() > 1);
}

#[test]
fn identical_inputs_give_identical_runs() {
    let data = fixture(15, 4);
    let c = config(50, 10);
    let (a, ta) = full_run(&c, data.path(), TempDir::new().unwrap().path());
    let (b, tb) = full_run(&c, data.path(), TempDir::new().unwrap().path());
    assert_eq!(a, b);
    assert_eq!(ta, tb);

    let mut other = c.clone();
    other.seed = 8;
    let (d, td) = full_run(&other, data.path(), TempDir::new().unwrap().path());
    assert_ne!(a.config_hash, d.config_hash);
    assert_ne!(ta, td);
}

/// Runs to completion through crashes after each step in `stops`,
/// restarting the process (fresh trainer and data handles) each time.
fn chained(c: &RunConfig, data_dir: &Path, out: &Path, stops: &[u64]) -> (RunSummary, BTreeMap<u64, StepTrace>) {
    let mut traces = BTreeMap::new();
    let mut first = true;
    let plan: Vec<Option<u64>> = stops.iter().copied().map(Some).chain([None]).collect();
    for stop in plan {
        let mut data = TaskData::open(data_dir).unwrap();
        let mut obs = |t: &StepTrace| {
            if let Some(prev) = traces.insert(t.step, t.clone()) {
                assert_eq!(prev, *t, "replayed step {} differs", t.step);
            }
        };
        let opts = RunOptions {
            stop_after: stop,
            observer: Some(&mut obs),
            ..Default::default()
        };
        let mut tr = trainer(c);
        let fresh = first || latest_consistent(out).unwrap().is_none();
        let outcome = if fresh {
            run(c, &mut tr, &mut data, out, opts).unwrap()
        } else {
            resume(c, &mut tr, &mut data, out, opts).unwrap()
        };
        if let Some(from) = outcome.resumed_from {
            assert_eq!(from % c.checkpoint_interval, 0);
        }
        first = false;
        if stop.is_none() {
            return (outcome.summary, traces);
        }
    }
    unreachable!()
}

#[test]
fn resume_after_stop_matches_uninterrupted() {
    let data = fixture(12, 4);
    let c = config(60, 10);
    let ref_out = TempDir::new().unwrap();
    let (reference, ref_traces) = full_run(&c, data.path(), ref_out.path());
    let out = TempDir::new().unwrap();
    let (s, traces) = chained(&c, data.path(), out.path(), &[13, 27, 30, 44]);
    assert_eq!(s, reference);
    assert_eq!(traces.into_values().collect::<Vec<_>>(), ref_traces);
    assert_eq!(
        std::fs::read(out.path().join(METRICS_LOG)).unwrap(),
        std::fs::read(ref_out.path().join(METRICS_LOG)).unwrap()
    );
}

#[test]
fn work_lost_is_below_one_interval() {
    let data = fixture(12, 4);
    let c = config(40, 10);
    let out = TempDir::new().unwrap();
    let mut data_h = TaskData::open(data.path()).unwrap();
    let opts = RunOptions {
        stop_after: Some(29),
        ..Default::default()
    };
    run(&c, &mut trainer(&c), &mut data_h, out.path(), opts).unwrap();
    let opts = RunOptions {
        stop_after: Some(31),
        ..Default::default()
    };
    let o = resume(&c, &mut trainer(&c), &mut data_h, out.path(), opts).unwrap();
    assert_eq!(o.resumed_from, Some(20));
    assert!(29 - o.resumed_from.unwrap() < c.checkpoint_interval);
}

#[test]
fn injected_checkpoint_crash_resumes_from_highest_complete() {
    let data = fixture(12, 4);
    let c = config(30, 10);
    let (reference, _) = full_run(&c, data.path(), TempDir::new().unwrap().path());
    // Boundaries per checkpoint; pinned in the checkpoint unit tests.
    let per_ckpt = 23;
    for b in 0..3 * per_ckpt {
        let out = TempDir::new().unwrap();
        let mut data_h = TaskData::open(data.path()).unwrap();
        let opts = RunOptions {
            faults: FaultInjector::crash_at(b),
            ..Default::default()
        };
        let err = run(&c, &mut trainer(&c), &mut data_h, out.path(), opts).unwrap_err();
        assert!(matches!(err, RunError::Checkpoint(CheckpointError::InjectedCrash(x)) if x == b));

        let j = b / per_ckpt;
        let expect = if b % per_ckpt == per_ckpt - 1 {
            10 * (j + 1)
        } else {
            10 * j
        };
        let latest = latest_consistent(out.path()).unwrap().map(|e| e.step);
        assert_eq!(latest.unwrap_or(0), expect, "boundary {b}");
        if expect == 0 {
            assert!(matches!(
                resume(&c, &mut trainer(&c), &mut data_h, out.path(), RunOptions::default()),
                Err(RunError::NoConsistentCheckpoint(_))
            ));
            continue;
        }
        let o = resume(&c, &mut trainer(&c), &mut data_h, out.path(), RunOptions::default()).unwrap();
        assert_eq!(o.resumed_from, Some(expect));
        assert_eq!(o.summary, reference, "boundary {b}");
    }
}

#[test]
fn trainer_failure_writes_emergency_checkpoint() {
    let data = fixture(12, 4);
    let c = config(40, 10);
    let (reference, _) = full_run(&c, data.path(), TempDir::new().unwrap().path());
    let out = TempDir::new().unwrap();
    let mut data_h = TaskData::open(data.path()).unwrap();
    let mut failing = trainer(&c).fail_at(25);
    let err = run(&c, &mut failing, &mut data_h, out.path(), RunOptions::default()).unwrap_err();
    let RunError::Trainer {
        emergency: Some(path), ..
    } = err
    else {
        panic!("expected trainer failure, got {err:?}")
    };
    let m = verify_checkpoint(&path).unwrap();
    assert_eq!((m.step, m.kind), (24, CheckpointKind::Emergency));

    let o = resume(&c, &mut trainer(&c), &mut data_h, out.path(), RunOptions::default()).unwrap();
    assert_eq!(o.resumed_from, Some(24));
    assert_eq!(o.summary.final_losses, reference.final_losses);
    assert_eq!(o.summary.final_weights, reference.final_weights);
    assert_eq!(o.summary.final_checkpoint_hash, reference.final_checkpoint_hash);
}

#[test]
fn resume_on_empty_dir_fails() {
    let data = fixture(4, 4);
    let out = TempDir::new().unwrap();
    let c = config(10, 5);
    let mut data_h = TaskData::open(data.path()).unwrap();
    assert!(matches!(
        resume(&c, &mut trainer(&c), &mut data_h, out.path(), RunOptions::default()),
        Err(RunError::NoConsistentCheckpoint(_))
    ));
}

#[test]
fn changed_config_is_refused() {
    let data = fixture(8, 4);
    let out = TempDir::new().unwrap();
    let c = config(20, 10);
    full_run(&c, data.path(), out.path());
    let mut other = c.clone();
    other.batch_size = 3;
    let mut data_h = TaskData::open(data.path()).unwrap();
    assert!(matches!(
        resume(
            &other,
            &mut trainer(&other),
            &mut data_h,
            out.path(),
            RunOptions::default()
        ),
        Err(RunError::ConfigMismatch(_))
    ));
    assert!(matches!(
        run(
            &other,
            &mut trainer(&other),
            &mut data_h,
            out.path(),
            RunOptions::default()
        ),
        Err(RunError::ConfigMismatch(_))
    ));
}

#[test]
fn changed_data_is_refused() {
    let data = fixture(8, 4);
    let out = TempDir::new().unwrap();
    let c = config(20, 10);
    full_run(&c, data.path(), out.path());
    let other = fixture(9, 4);
    let mut data_h = TaskData::open(other.path()).unwrap();
    assert!(matches!(
        resume(&c, &mut trainer(&c), &mut data_h, out.path(), RunOptions::default()),
        Err(RunError::ConfigMismatch(_))
    ));
}

#[test]
fn invalid_config() {
    let data = fixture(4, 4);
    let out = TempDir::new().unwrap();
    let mut data_h = TaskData::open(data.path()).unwrap();
    for c in [RunConfig::new(10, 0, 5, 1), RunConfig::new(10, 2, 0, 1), {
        let mut c = RunConfig::new(10, 2, 5, 1);
        c.sampler.beta = 1.0;
        c
    }] {
        assert!(matches!(
            run(&c, &mut trainer(&c), &mut data_h, out.path(), RunOptions::default()),
            Err(RunError::InvalidConfig(_))
        ));
    }
}

#[test]
fn retention_keeps_recent_and_milestones() {
    let data = fixture(8, 4);
    let out = TempDir::new().unwrap();
    let mut c = config(80, 10);
    c.keep_last = 2;
    c.keep_every = Some(40);
    full_run(&c, data.path(), out.path());
    let steps: Vec<u64> = list_checkpoints(out.path()).unwrap().iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![80, 70, 40]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_crash_points_replay_exactly(seed in any::<u64>()) {
        let data = fixture(10, 4);
        let c = config(50, 10);
        let (reference, ref_traces) = full_run(&c, data.path(), TempDir::new().unwrap().path());
        let mut rng = SplitMix64::new(seed);
        let mut stops: Vec<u64> = (0..1 + rng.below(4)).map(|_| 1 + rng.below(49)).collect();
        stops.sort_unstable();
        stops.dedup();
        let out = TempDir::new().unwrap();
        let (s, traces) = chained(&c, data.path(), out.path(), &stops);
        prop_assert_eq!(s, reference);
        prop_assert_eq!(traces.into_values().collect::<Vec<_>>(), ref_traces);
    }
}

#[test]
fn kill_test_harness_reports_equivalence() {
    let data = fixture(10, 4);
    let out = TempDir::new().unwrap();
    let c = config(120, 10);
    let r = kill_test(&c, data.path(), out.path(), &[5, 37, 37, 64, 119, 500], None).unwrap();
    assert!(r.equivalent, "{r:?}");
    assert_eq!(
        r.kills.iter().map(|k| k.at_step).collect::<Vec<_>>(),
        vec![5, 37, 64, 119]
    );
    assert_eq!(r.kills[0].resumed_from, None);
    assert_eq!(r.kills[1].resumed_from, Some(30));
    assert_eq!(r.kills[1].reprocessed_samples, 7 * 4);
    assert!(r.max_reprocessed_samples <= r.reprocess_bound);

    let r = kill_test(&c, data.path(), out.path(), &[70], Some(23 + 5)).unwrap();
    assert!(r.equivalent, "{r:?}");
    assert_eq!(r.kills[0].at_step, 20);
    assert_eq!(r.kills[0].resumed_from, Some(10));
}
