use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    latest_consistent, resume, run, CheckpointError, FaultInjector, RunConfig, RunError, RunOptions, RunSummary,
    SimulatedTrainer, StepTrace, TaskData,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillRecord {
    /// Last step completed before the process went away.
    pub at_step: u64,
    /// Checkpoint step the next segment resumed from; `None` restarts at zero.
    pub resumed_from: Option<u64>,
    pub reprocessed_samples: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KillTestReport {
    pub total_steps: u64,
    pub kills: Vec<KillRecord>,
    pub traces_match: bool,
    pub first_divergent_step: Option<u64>,
    /// Bitwise comparison of the final per-task losses.
    pub losses_match: bool,
    pub final_checkpoint_match: bool,
    pub max_reprocessed_samples: u64,
    /// batch_size × checkpoint_interval
    pub reprocess_bound: u64,
    pub equivalent: bool,
    pub reference: RunSummary,
    pub interrupted: RunSummary,
}

fn segment(
    config: &RunConfig,
    data_dir: &Path,
    out: &Path,
    stop_after: Option<u64>,
    faults: FaultInjector,
    traces: &mut BTreeMap<u64, StepTrace>,
) -> Result<(Option<RunSummary>, Option<u64>), RunError> {
    let mut data = TaskData::open(data_dir)?;
    let mut trainer = SimulatedTrainer::new(config.trainer.clone(), config.seed);
    let mut obs = |t: &StepTrace| {
        traces.insert(t.step, t.clone());
    };
    let opts = RunOptions {
        stop_after,
        faults,
        observer: Some(&mut obs),
    };
    let outcome = if latest_consistent(out)?.is_some() {
        resume(config, &mut trainer, &mut data, out, opts)
    } else {
        run(config, &mut trainer, &mut data, out, opts)
    };
    match outcome {
        Ok(o) if o.stopped_at.is_some() => Ok((None, o.resumed_from)),
        Ok(o) => Ok((Some(o.summary), o.resumed_from)),
        Err(RunError::Checkpoint(CheckpointError::InjectedCrash(_))) => Ok((None, None)),
        Err(e) => Err(e),
    }
}

/// Runs `config` once uninterrupted under `out_dir/reference`, then again
/// under `out_dir/killed` with a simulated process death after each step in
/// `kill_steps` (and, if set, a crash at checkpoint write boundary
/// `crash_boundary` during the first segment). Every segment starts from a
/// fresh trainer and fresh shard handles, so only on-disk state survives.
pub fn kill_test(
    config: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    kill_steps: &[u64],
    crash_boundary: Option<u64>,
) -> Result<KillTestReport, RunError> {
    let mut kills: Vec<u64> = kill_steps
        .iter()
        .copied()
        .filter(|&s| s >= 1 && s < config.total_steps)
        .collect();
    kills.sort_unstable();
    kills.dedup();

    let ref_dir = out_dir.join("reference");
    let killed_dir = out_dir.join("killed");
    for d in [&ref_dir, &killed_dir] {
        if d.exists() {
            std::fs::remove_dir_all(d).map_err(|source| RunError::Io {
                path: d.clone(),
                source,
            })?;
        }
    }

    let mut ref_traces = BTreeMap::new();
    let (reference, _) = segment(
        config,
        data_dir,
        &ref_dir,
        None,
        FaultInjector::counting(),
        &mut ref_traces,
    )?;
    let reference = reference.expect("uninterrupted run completes");

    let mut traces = BTreeMap::new();
    let mut records = Vec::new();
    let mut divergent: Option<u64> = None;
    let mut pending: Option<u64> = None;
    let note = |traces: &BTreeMap<u64, StepTrace>, divergent: &mut Option<u64>| {
        for (step, t) in traces {
            if ref_traces.get(step) != Some(t) {
                *divergent = Some(divergent.map_or(*step, |d| d.min(*step)));
            }
        }
    };

    let mut plan: Vec<(Option<u64>, FaultInjector)> = Vec::new();
    if let Some(b) = crash_boundary {
        plan.push((None, FaultInjector::crash_at(b)));
    }
    plan.extend(kills.iter().map(|&k| (Some(k), FaultInjector::counting())));
    plan.push((None, FaultInjector::counting()));

    let mut interrupted = None;
    for (stop, faults) in plan {
        if let Some(k) = stop {
            // A stop at or before the resume point would never fire.
            if k <= latest_consistent(&killed_dir)?.map_or(0, |e| e.step) {
                continue;
            }
        }
        let mut seg_traces = BTreeMap::new();
        let (summary, resumed_from) = segment(config, data_dir, &killed_dir, stop, faults, &mut seg_traces)?;
        if let Some(at_step) = pending.take() {
            let from = resumed_from.unwrap_or(0);
            records.push(KillRecord {
                at_step,
                resumed_from,
                reprocessed_samples: at_step.saturating_sub(from) * config.batch_size as u64,
            });
        }
        note(&seg_traces, &mut divergent);
        let last = seg_traces.keys().next_back().copied();
        traces.extend(seg_traces);
        match summary {
            Some(s) => {
                interrupted = Some(s);
                break;
            }
            None => pending = Some(last.unwrap_or(0)),
        }
    }
    let interrupted = interrupted.expect("final segment completes");

    let traces_match = divergent.is_none() && traces == ref_traces;
    let losses_match = reference.final_losses.len() == interrupted.final_losses.len()
        && reference
            .final_losses
            .iter()
            .zip(&interrupted.final_losses)
            .all(|((ta, a), (tb, b))| ta == tb && a.to_bits() == b.to_bits());
    let final_checkpoint_match = reference.final_checkpoint_hash == interrupted.final_checkpoint_hash;
    let max_reprocessed_samples = records.iter().map(|r| r.reprocessed_samples).max().unwrap_or(0);
    let reprocess_bound = config.batch_size as u64 * config.checkpoint_interval;
    Ok(KillTestReport {
        total_steps: config.total_steps,
        equivalent: traces_match
            && losses_match
            && final_checkpoint_match
            && max_reprocessed_samples <= reprocess_bound,
        kills: records,
        traces_match,
        first_divergent_step: divergent,
        losses_match,
        final_checkpoint_match,
        max_reprocessed_samples,
        reprocess_bound,
        reference,
        interrupted,
    })
}
