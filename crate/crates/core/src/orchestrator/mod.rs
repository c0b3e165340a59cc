//! Training loop: sampler-driven task draws over per-task shard streams,
//! a pluggable trainer, telemetry, periodic checkpoints and resume.

mod checkpoint;
mod killtest;
mod trainer;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{fnv1a64, to_hex, Fnv1a64};
use crate::monitor::{Alert, MetricEvent, MetricKind, Monitor, MonitorConfig};
use crate::sampler::{SamplerError, SamplerState};
use crate::schema::{Sample, TaskType};
use crate::shardstore::{
    write_shards, Cursor, Next, SealedCursor, ShardError, ShardManifest, ShardReader, MANIFEST_FILE,
};

pub use checkpoint::{
    apply_retention, checkpoint_dir_name, clean_staging, latest_consistent, list_checkpoints, load_checkpoint,
    remove_checkpoint, verify_checkpoint, write_checkpoint, CheckpointEntry, CheckpointError, CheckpointKind,
    CheckpointManifest, CheckpointState, CursorFile, FaultInjector, CHECKPOINT_SCHEMA_VERSION, COMPLETE_MARKER,
    PAYLOAD_FILES,
};
pub use killtest::{kill_test, KillRecord, KillTestReport};
pub use trainer::{
    LossCurve, SimulatedTrainer, SimulatedTrainerConfig, StepOutput, Trainer, TrainerBlobs, TrainerError,
};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const ALERTS_LOG: &str = "alerts.jsonl";
pub const RUN_METADATA: &str = "run_metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBounds {
    pub w_min: f64,
    pub w_max: f64,
    #[serde(default)]
    pub beta: f64,
}

impl Default for SamplerBounds {
    fn default() -> Self {
        Self {
            w_min: 0.05,
            w_max: 0.6,
            beta: 0.0,
        }
    }
}

fn default_keep_last() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub checkpoint_interval: u64,
    /// Steps between sampler updates; defaults to `checkpoint_interval`.
    #[serde(default)]
    pub validation_interval: Option<u64>,
    pub seed: u64,
    #[serde(default)]
    pub trainer: SimulatedTrainerConfig,
    #[serde(default)]
    pub sampler: SamplerBounds,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default = "default_keep_last")]
    pub keep_last: usize,
    #[serde(default)]
    pub keep_every: Option<u64>,
}

impl RunConfig {
    pub fn new(total_steps: u64, batch_size: usize, checkpoint_interval: u64, seed: u64) -> Self {
        Self {
            total_steps,
            batch_size,
            checkpoint_interval,
            validation_interval: None,
            seed,
            trainer: SimulatedTrainerConfig::default(),
            sampler: SamplerBounds::default(),
            monitor: MonitorConfig::default(),
            keep_last: default_keep_last(),
            keep_every: None,
        }
    }

    pub fn validation_every(&self) -> u64 {
        self.validation_interval.unwrap_or(self.checkpoint_interval)
    }

    pub fn check(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.checkpoint_interval == 0 || self.validation_every() == 0 {
            return bad("intervals must be at least 1");
        }
        if self.keep_last == 0 {
            return bad("keep_last must be at least 1");
        }
        if !(0.0..1.0).contains(&self.sampler.beta) {
            return bad("sampler.beta must lie in [0, 1)");
        }
        Ok(())
    }

    /// FNV-1a 64 of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        fnv1a64(&serde_json::to_vec(self).expect("config serialization"))
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("NO_DATA: {0}")]
    NoData(String),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{source} (emergency checkpoint: {emergency:?})")]
    Trainer {
        #[source]
        source: TrainerError,
        emergency: Option<PathBuf>,
    },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("NO_CONSISTENT_CHECKPOINT in {0}")]
    NoConsistentCheckpoint(PathBuf),
    #[error("CONFIG_MISMATCH: {0}")]
    ConfigMismatch(String),
    #[error("IO_FAILURE on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-task shard streams under `DATA/<task-name>/`.
pub struct TaskData {
    readers: BTreeMap<TaskType, ShardReader<Sample>>,
    manifest_hash: u64,
}

impl TaskData {
    pub fn open(dir: &Path) -> Result<Self, RunError> {
        let mut readers = BTreeMap::new();
        for task in TaskType::ALL {
            let sub = dir.join(task.as_str());
            if !sub.join(MANIFEST_FILE).is_file() {
                continue;
            }
            let reader = ShardReader::<Sample>::open(&sub)?;
            if reader.manifest().total_records > 0 {
                readers.insert(task, reader);
            }
        }
        if readers.is_empty() {
            return Err(RunError::NoData(format!(
                "no nonempty task shard sets under {}",
                dir.display()
            )));
        }
        let mut h = Fnv1a64::new();
        for (task, r) in &readers {
            h.update(task.as_str().as_bytes());
            h.update(&r.manifest().fingerprint().to_le_bytes());
        }
        Ok(Self {
            manifest_hash: h.finish(),
            readers,
        })
    }

    pub fn tasks(&self) -> Vec<TaskType> {
        self.readers.keys().copied().collect()
    }

    pub fn manifest_hash(&self) -> u64 {
        self.manifest_hash
    }

    fn fill(&mut self, task: TaskType, cursor: &mut Cursor, n: usize) -> Result<Vec<Sample>, RunError> {
        let reader = self.readers.get_mut(&task).expect("sampled task has data");
        let mut batch = Vec::with_capacity(n);
        while batch.len() < n {
            match reader.next(cursor)? {
                Next::Record(s, next) => {
                    batch.push(s);
                    *cursor = next;
                }
                Next::EndOfEpoch(next) => *cursor = next,
            }
        }
        Ok(batch)
    }
}

/// Writes one shard set per task under `data_dir/<task-name>/`, one pass of
/// `source(task)` per task so nothing is buffered beyond a shard.
/// Tasks with no samples get no directory.
pub fn write_task_shards<F, I>(
    mut source: F,
    shard_size: usize,
    data_dir: &Path,
    creation_seed: u64,
) -> Result<BTreeMap<TaskType, ShardManifest>, ShardError>
where
    F: FnMut(TaskType) -> I,
    I: Iterator<Item = Sample>,
{
    let mut out = BTreeMap::new();
    for task in TaskType::ALL {
        let mut it = source(task).filter(|s| s.task == task).peekable();
        let sub = data_dir.join(task.as_str());
        if it.peek().is_none() {
            if sub.join(MANIFEST_FILE).is_file() {
                fs::remove_dir_all(&sub).map_err(|source| ShardError::Io {
                    path: sub.clone(),
                    source,
                })?;
            }
            continue;
        }
        let manifest = write_shards(it, shard_size, &sub, creation_seed)?;
        out.insert(task, manifest);
    }
    Ok(out)
}

/// One step's data assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub task: TaskType,
    pub ids: Vec<String>,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Return after this step completes, as if the process died there.
    pub stop_after: Option<u64>,
    pub faults: FaultInjector,
    pub observer: Option<&'a mut dyn FnMut(&StepTrace)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_completed: u64,
    pub total_steps: u64,
    pub config_hash: String,
    pub data_manifest_hash: String,
    /// Last training loss seen per task.
    pub final_losses: BTreeMap<TaskType, f64>,
    pub draws_per_task: BTreeMap<TaskType, u64>,
    pub epochs_per_task: BTreeMap<TaskType, u64>,
    pub samples_consumed: u64,
    pub final_weights: BTreeMap<TaskType, f64>,
    pub sampler_updates: u64,
    pub checkpoints_written: Vec<u64>,
    pub alerts_raised: u64,
    pub final_checkpoint: Option<String>,
    pub final_checkpoint_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub resumed_from: Option<u64>,
    /// Set when `stop_after` ended the run early.
    pub stopped_at: Option<u64>,
}

/// Defaults and identities recorded next to every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub config_hash: String,
    pub data_manifest_hash: String,
    pub seed: u64,
    pub tasks: Vec<TaskType>,
    pub validation_interval: u64,
    pub sampler: SamplerBounds,
    pub monitor_defaults: MonitorConfig,
    pub keep_last: usize,
    pub keep_every: Option<u64>,
    pub checkpoint_tie_break: String,
    pub wall_time: String,
}

impl RunMetadata {
    pub fn new(config: &RunConfig, data: &TaskData) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: to_hex(config.hash()),
            data_manifest_hash: to_hex(data.manifest_hash()),
            seed: config.seed,
            tasks: data.tasks(),
            validation_interval: config.validation_every(),
            sampler: config.sampler.clone(),
            monitor_defaults: config.monitor.clone(),
            keep_last: config.keep_last,
            keep_every: config.keep_every,
            checkpoint_tie_break: "periodic over emergency at equal step".into(),
            wall_time: "simulated: cumulative batch_size / throughput".into(),
        }
    }
}

struct Logs {
    metrics: BufWriter<File>,
    alerts: BufWriter<File>,
    metrics_path: PathBuf,
    alerts_path: PathBuf,
}

#[derive(Deserialize)]
struct StepOnly {
    step: u64,
}

#[derive(Deserialize)]
struct AlertEnd {
    step_end: u64,
}

/// Drops log lines newer than `step`; with `step == 0` the log is emptied.
fn truncate_log<T: for<'de> Deserialize<'de>>(path: &Path, step: u64, key: impl Fn(&T) -> u64) -> Result<(), RunError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        match serde_json::from_str::<T>(&line) {
            Ok(v) if key(&v) <= step => {
                kept.extend_from_slice(line.as_bytes());
                kept.push(b'\n');
            }
            // torn trailing line or a step past the checkpoint
            _ => break,
        }
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, &kept).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl Logs {
    fn open(out_dir: &Path, from_step: u64) -> Result<Self, RunError> {
        let metrics_path = out_dir.join(METRICS_LOG);
        let alerts_path = out_dir.join(ALERTS_LOG);
        truncate_log::<StepOnly>(&metrics_path, from_step, |e| e.step)?;
        truncate_log::<AlertEnd>(&alerts_path, from_step, |a| a.step_end)?;
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map(BufWriter::new)
                .map_err(io_err(p))
        };
        Ok(Self {
            metrics: open(&metrics_path)?,
            alerts: open(&alerts_path)?,
            metrics_path,
            alerts_path,
        })
    }

    fn metric(&mut self, e: &MetricEvent) -> Result<(), RunError> {
        serde_json::to_writer(&mut self.metrics, e).expect("metric serialization");
        self.metrics.write_all(b"\n").map_err(io_err(&self.metrics_path))
    }

    fn alert(&mut self, a: &Alert) -> Result<(), RunError> {
        serde_json::to_writer(&mut self.alerts, a).expect("alert serialization");
        self.alerts.write_all(b"\n").map_err(io_err(&self.alerts_path))
    }

    fn flush(&mut self) -> Result<(), RunError> {
        self.metrics.flush().map_err(io_err(&self.metrics_path))?;
        self.alerts.flush().map_err(io_err(&self.alerts_path))
    }
}

struct Loop {
    step: u64,
    sampler: SamplerState,
    cursors: BTreeMap<TaskType, Cursor>,
    monitor: Monitor,
    wall_ms: f64,
}

impl Loop {
    fn snapshot<T: Trainer>(
        &self,
        kind: CheckpointKind,
        config_hash: u64,
        data: &TaskData,
        trainer: &T,
    ) -> CheckpointState {
        CheckpointState {
            step: self.step,
            kind,
            config_hash,
            data_manifest_hash: data.manifest_hash(),
            blobs: trainer.snapshot(),
            sampler: self.sampler.clone(),
            cursors: CursorFile {
                step: self.step,
                cursors: self
                    .cursors
                    .iter()
                    .map(|(t, c)| (*t, SealedCursor::seal(*c, data.readers[t].manifest())))
                    .collect(),
                elapsed_ms: self.wall_ms,
            },
            monitor: self.monitor.clone(),
        }
    }
}

fn fresh_loop(config: &RunConfig, data: &TaskData) -> Result<Loop, RunError> {
    let tasks = data.tasks();
    let sampler = SamplerState::init(&tasks, config.sampler.w_min, config.sampler.w_max, config.seed)?;
    let sampler = if config.sampler.beta > 0.0 {
        sampler.with_smoothing(config.sampler.beta)
    } else {
        sampler
    };
    Ok(Loop {
        step: 0,
        sampler,
        cursors: tasks.iter().map(|&t| (t, Cursor::default())).collect(),
        monitor: Monitor::new(config.monitor.clone()),
        wall_ms: 0.0,
    })
}

fn check_hashes(manifest: &CheckpointManifest, config_hash: u64, data_hash: u64) -> Result<(), RunError> {
    if manifest.config_hash != to_hex(config_hash) {
        return Err(RunError::ConfigMismatch(format!(
            "checkpoint config hash {} differs from {}",
            manifest.config_hash,
            to_hex(config_hash)
        )));
    }
    if manifest.data_manifest_hash != to_hex(data_hash) {
        return Err(RunError::ConfigMismatch(format!(
            "checkpoint data manifest hash {} differs from {}",
            manifest.data_manifest_hash,
            to_hex(data_hash)
        )));
    }
    Ok(())
}

/// Restores trainer and loop state from the highest consistent checkpoint.
fn restore_loop<T: Trainer>(
    config: &RunConfig,
    data: &TaskData,
    trainer: &mut T,
    out_dir: &Path,
) -> Result<Loop, RunError> {
    let entry = latest_consistent(out_dir)?.ok_or_else(|| RunError::NoConsistentCheckpoint(out_dir.to_path_buf()))?;
    let state = load_checkpoint(&entry.path)?;
    let manifest = verify_checkpoint(&entry.path)?;
    check_hashes(&manifest, config.hash(), data.manifest_hash())?;
    trainer.restore(&state.blobs).map_err(|source| RunError::Trainer {
        source,
        emergency: None,
    })?;
    let mut cursors = BTreeMap::new();
    for task in data.tasks() {
        let sealed = state
            .cursors
            .cursors
            .get(&task)
            .ok_or_else(|| RunError::ConfigMismatch(format!("checkpoint has no cursor for {task}")))?;
        cursors.insert(task, sealed.unseal(data.readers[&task].manifest())?);
    }
    log::info!("resuming from {} (step {})", entry.path.display(), state.step);
    Ok(Loop {
        step: state.step,
        sampler: state.sampler,
        cursors,
        monitor: state.monitor,
        wall_ms: state.cursors.elapsed_ms,
    })
}

fn summarize(config: &RunConfig, data: &TaskData, l: &Loop, out_dir: &Path) -> Result<RunSummary, RunError> {
    let latest = latest_consistent(out_dir)?;
    let final_hash = match &latest {
        Some(e) => Some(to_hex(fnv1a64(
            &fs::read(e.path.join(checkpoint::MANIFEST)).map_err(io_err(&e.path))?,
        ))),
        None => None,
    };
    let interval = config.checkpoint_interval;
    Ok(RunSummary {
        steps_completed: l.step,
        total_steps: config.total_steps,
        config_hash: to_hex(config.hash()),
        data_manifest_hash: to_hex(data.manifest_hash()),
        final_losses: l.monitor.summary().last_loss.clone(),
        draws_per_task: l.cursors.iter().map(|(t, c)| (*t, c.draws_consumed)).collect(),
        epochs_per_task: l.cursors.iter().map(|(t, c)| (*t, c.epoch)).collect(),
        samples_consumed: l.step * config.batch_size as u64,
        final_weights: l.sampler.weights.clone(),
        sampler_updates: l.sampler.update_count,
        checkpoints_written: (1..=l.step / interval).map(|i| i * interval).collect(),
        alerts_raised: l.monitor.alerts_raised(),
        final_checkpoint: latest
            .as_ref()
            .and_then(|e| e.path.file_name())
            .map(|n| n.to_string_lossy().into_owned()),
        final_checkpoint_hash: final_hash,
    })
}

fn write_metadata(config: &RunConfig, data: &TaskData, out_dir: &Path) -> Result<(), RunError> {
    let path = out_dir.join(RUN_METADATA);
    let mut bytes = serde_json::to_vec_pretty(&RunMetadata::new(config, data)).expect("metadata");
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(io_err(&path))
}

fn drive<T: Trainer>(
    config: &RunConfig,
    data: &mut TaskData,
    trainer: &mut T,
    out_dir: &Path,
    mut l: Loop,
    opts: RunOptions<'_>,
    resumed_from: Option<u64>,
) -> Result<RunOutcome, RunError> {
    let config_hash = config.hash();
    let tasks = data.tasks();
    let mut logs = Logs::open(out_dir, l.step)?;
    let mut faults = opts.faults;
    let mut observer = opts.observer;

    while l.step < config.total_steps {
        let step = l.step + 1;
        let (task, sampler) = l.sampler.draw();
        let mut cursor = l.cursors[&task];
        let batch = data.fill(task, &mut cursor, config.batch_size)?;
        cursor.draws_consumed += 1;

        let out = match trainer.step(&batch, step) {
            Ok(out) => out,
            Err(source) => {
                logs.flush()?;
                let state = l.snapshot(CheckpointKind::Emergency, config_hash, data, trainer);
                let emergency = write_checkpoint(&state, out_dir, &mut FaultInjector::counting())
                    .map_err(|e| log::error!("emergency checkpoint failed: {e}"))
                    .ok();
                return Err(RunError::Trainer { source, emergency });
            }
        };
        if let Some(obs) = observer.as_mut() {
            obs(&StepTrace {
                step,
                task,
                ids: batch.iter().map(|s| s.id.clone()).collect(),
            });
        }

        l.sampler = sampler;
        l.cursors.insert(task, cursor);
        l.step = step;
        l.wall_ms += 1000.0 * batch.len() as f64 / out.throughput.max(1e-9);
        let wall_time = l.wall_ms as u64;
        let mut events: Vec<MetricEvent> = out
            .losses
            .iter()
            .map(|(&task, &value)| MetricEvent {
                step,
                wall_time,
                kind: MetricKind::TaskLoss { task, value },
            })
            .collect();
        events.push(MetricEvent {
            step,
            wall_time,
            kind: MetricKind::Throughput {
                samples_per_s: out.throughput,
            },
        });
        events.push(MetricEvent {
            step,
            wall_time,
            kind: MetricKind::Memory {
                bytes: out.memory_bytes,
            },
        });
        events.push(MetricEvent {
            step,
            wall_time,
            kind: MetricKind::Utilization {
                fraction: out.utilization,
            },
        });
        for e in &events {
            match l.monitor.record(e) {
                Ok(alert) => {
                    logs.metric(e)?;
                    if let Some(a) = alert {
                        logs.alert(&a)?;
                    }
                }
                Err(err) => log::warn!("metric rejected at step {step}: {err}"),
            }
        }

        if step.is_multiple_of(config.validation_every()) {
            let losses = trainer.validation_losses(&tasks, step);
            match l.sampler.update_weights(&losses) {
                Ok(next) => l.sampler = next,
                Err(SamplerError::AllZeroLosses) => {
                    log::warn!("step {step}: all validation losses are zero; weights unchanged")
                }
                Err(e) => return Err(e.into()),
            }
        }

        if step.is_multiple_of(config.checkpoint_interval) {
            logs.flush()?;
            let state = l.snapshot(CheckpointKind::Periodic, config_hash, data, trainer);
            write_checkpoint(&state, out_dir, &mut faults)?;
            apply_retention(out_dir, config.keep_last, config.keep_every)?;
        }

        if opts.stop_after == Some(step) {
            logs.flush()?;
            return Ok(RunOutcome {
                summary: summarize(config, data, &l, out_dir)?,
                resumed_from,
                stopped_at: Some(step),
            });
        }
    }
    logs.flush()?;
    Ok(RunOutcome {
        summary: summarize(config, data, &l, out_dir)?,
        resumed_from,
        stopped_at: None,
    })
}

fn prepare(config: &RunConfig, data: &TaskData, out_dir: &Path) -> Result<(), RunError> {
    config.check()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    clean_staging(out_dir)?;
    write_metadata(config, data, out_dir)
}

/// Starts a run from step zero.
pub fn run<T: Trainer>(
    config: &RunConfig,
    trainer: &mut T,
    data: &mut TaskData,
    out_dir: &Path,
    opts: RunOptions<'_>,
) -> Result<RunOutcome, RunError> {
    if let Some(e) = latest_consistent(out_dir)? {
        let manifest = verify_checkpoint(&e.path)?;
        check_hashes(&manifest, config.hash(), data.manifest_hash())?;
        log::warn!(
            "{} already holds checkpoints; starting over from step 0",
            out_dir.display()
        );
        for e in list_checkpoints(out_dir)? {
            remove_checkpoint(&e.path)?;
        }
    }
    prepare(config, data, out_dir)?;
    let l = fresh_loop(config, data)?;
    drive(config, data, trainer, out_dir, l, opts, None)
}

/// Continues from the highest-step consistent checkpoint in `out_dir`.
pub fn resume<T: Trainer>(
    config: &RunConfig,
    trainer: &mut T,
    data: &mut TaskData,
    out_dir: &Path,
    opts: RunOptions<'_>,
) -> Result<RunOutcome, RunError> {
    config.check()?;
    let l = restore_loop(config, data, trainer, out_dir)?;
    prepare(config, data, out_dir)?;
    let from = l.step;
    drive(config, data, trainer, out_dir, l, opts, Some(from))
}

#[cfg(test)]
mod tests;
