//! Training telemetry and anomaly alerts.
//!
//! Two detectors run over the recorded stream:
//!
//! * `UTILIZATION_DROP`: a utilization sample is *low* when it is below
//!   `δ · median` of the previous `M` utilization samples (only once `M`
//!   samples exist). An alert fires on every sample that completes a run of
//!   `C` consecutive low samples and covers those `C` steps.
//! * `LOSS_DRIFT`: per task, two exponential moving averages of the loss
//!   with smoothing `α = 1 − 2^(−1/h)` for half-lives `h_short` and
//!   `h_long`. Once a task has `warmup` events, an alert fires on every
//!   event where `EMA_short / EMA_long > ρ`.
//!
//! Alerts are per triggering sample, so a sustained anomaly yields several
//! alerts; [`coalesce`] merges adjacent ones into episodes.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::TaskType;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricKind {
    TaskLoss { task: TaskType, value: f64 },
    Throughput { samples_per_s: f64 },
    Memory { bytes: u64 },
    Utilization { fraction: f64 },
}

impl MetricKind {
    fn stream(&self) -> Stream {
        match self {
            MetricKind::TaskLoss { .. } => Stream::TaskLoss,
            MetricKind::Throughput { .. } => Stream::Throughput,
            MetricKind::Memory { .. } => Stream::Memory,
            MetricKind::Utilization { .. } => Stream::Utilization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Stream {
    TaskLoss,
    Throughput,
    Memory,
    Utilization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub step: u64,
    /// Milliseconds since run start; informational only.
    pub wall_time: u64,
    #[serde(flatten)]
    pub kind: MetricKind,
}

impl MetricEvent {
    pub fn new(step: u64, kind: MetricKind) -> Self {
        Self {
            step,
            wall_time: 0,
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorError {
    #[error("OUT_OF_ORDER: step {step} after step {last}")]
    OutOfOrder { step: u64, last: u64 },
    #[error("INVALID_VALUE: {0}")]
    InvalidValue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertKind {
    UtilizationDrop,
    LossDrift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Evidence {
    Utilization {
        value: f64,
        baseline_median: f64,
        threshold: f64,
    },
    Drift {
        ema_short: f64,
        ema_long: f64,
        ratio: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub kind: AlertKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskType>,
    pub step_start: u64,
    pub step_end: u64,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    pub util_delta: f64,
    pub util_window: usize,
    pub util_consecutive: usize,
    pub drift_half_life_short: f64,
    pub drift_half_life_long: f64,
    pub drift_ratio: f64,
    pub drift_warmup: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            util_delta: 0.5,
            util_window: 50,
            util_consecutive: 3,
            drift_half_life_short: 10.0,
            drift_half_life_long: 100.0,
            drift_ratio: 1.2,
            drift_warmup: 10,
        }
    }
}

pub fn ema_alpha(half_life: f64) -> f64 {
    1.0 - 0.5f64.powf(1.0 / half_life)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Ema {
    short: f64,
    long: f64,
    count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Detector {
    util_history: VecDeque<f64>,
    low_run: VecDeque<u64>,
    drift: BTreeMap<TaskType, Ema>,
}

fn median(values: &VecDeque<f64>) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Detector {
    fn observe(&mut self, cfg: &MonitorConfig, step: u64, kind: &MetricKind) -> Option<Alert> {
        match *kind {
            MetricKind::Utilization { fraction } => self.utilization(cfg, step, fraction),
            MetricKind::TaskLoss { task, value } => self.loss(cfg, step, task, value),
            _ => None,
        }
    }

    fn utilization(&mut self, cfg: &MonitorConfig, step: u64, u: f64) -> Option<Alert> {
        let baseline =
            (self.util_history.len() >= cfg.util_window && cfg.util_window > 0).then(|| median(&self.util_history));
        self.util_history.push_back(u);
        while self.util_history.len() > cfg.util_window {
            self.util_history.pop_front();
        }
        let Some(m) = baseline else {
            self.low_run.clear();
            return None;
        };
        let threshold = cfg.util_delta * m;
        if u >= threshold {
            self.low_run.clear();
            return None;
        }
        self.low_run.push_back(step);
        while self.low_run.len() > cfg.util_consecutive.max(1) {
            self.low_run.pop_front();
        }
        (self.low_run.len() >= cfg.util_consecutive.max(1)).then(|| Alert {
            kind: AlertKind::UtilizationDrop,
            task: None,
            step_start: self.low_run[0],
            step_end: step,
            evidence: Evidence::Utilization {
                value: u,
                baseline_median: m,
                threshold,
            },
        })
    }

    fn loss(&mut self, cfg: &MonitorConfig, step: u64, task: TaskType, x: f64) -> Option<Alert> {
        let ema = self
            .drift
            .entry(task)
            .and_modify(|e| {
                e.short += ema_alpha(cfg.drift_half_life_short) * (x - e.short);
                e.long += ema_alpha(cfg.drift_half_life_long) * (x - e.long);
                e.count += 1;
            })
            .or_insert(Ema {
                short: x,
                long: x,
                count: 1,
            });
        if ema.count < cfg.drift_warmup || ema.long <= 0.0 {
            return None;
        }
        let ratio = ema.short / ema.long;
        (ratio > cfg.drift_ratio).then_some(Alert {
            kind: AlertKind::LossDrift,
            task: Some(task),
            step_start: step,
            step_end: step,
            evidence: Evidence::Drift {
                ema_short: ema.short,
                ema_long: ema.long,
                ratio,
            },
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accepted: u64,
    pub rejected_out_of_order: u64,
    pub rejected_invalid: u64,
    pub last_loss: BTreeMap<TaskType, f64>,
    pub loss_events: BTreeMap<TaskType, u64>,
    pub peak_memory_bytes: u64,
    pub throughput_sum: f64,
    pub throughput_events: u64,
    pub utilization_min: Option<f64>,
}

impl MetricsSummary {
    pub fn mean_throughput(&self) -> Option<f64> {
        (self.throughput_events > 0).then(|| self.throughput_sum / self.throughput_events as f64)
    }
}

/// Recorder plus incremental detectors. The serialized form is the
/// checkpointed monitor snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    config: MonitorConfig,
    last_step: BTreeMap<Stream, u64>,
    detector: Detector,
    summary: MetricsSummary,
    alerts_raised: u64,
}

fn validate(kind: &MetricKind) -> Result<(), MonitorError> {
    let bad = |m: String| Err(MonitorError::InvalidValue(m));
    match *kind {
        MetricKind::TaskLoss { task, value } if !value.is_finite() => bad(format!("loss {value} for {task}")),
        MetricKind::Throughput { samples_per_s } if !samples_per_s.is_finite() || samples_per_s < 0.0 => {
            bad(format!("throughput {samples_per_s}"))
        }
        MetricKind::Utilization { fraction } if !(0.0..=1.0).contains(&fraction) => {
            bad(format!("utilization {fraction} outside [0, 1]"))
        }
        _ => Ok(()),
    }
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Self {
        Self {
            config,
            last_step: BTreeMap::new(),
            detector: Detector::default(),
            summary: MetricsSummary::default(),
            alerts_raised: 0,
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn summary(&self) -> &MetricsSummary {
        &self.summary
    }

    pub fn alerts_raised(&self) -> u64 {
        self.alerts_raised
    }

    /// Appends one event and returns any alert it triggers.
    pub fn record(&mut self, event: &MetricEvent) -> Result<Option<Alert>, MonitorError> {
        if let Err(e) = validate(&event.kind) {
            self.summary.rejected_invalid += 1;
            return Err(e);
        }
        let stream = event.kind.stream();
        if let Some(&last) = self.last_step.get(&stream) {
            if event.step < last {
                self.summary.rejected_out_of_order += 1;
                return Err(MonitorError::OutOfOrder { step: event.step, last });
            }
        }
        self.last_step.insert(stream, event.step);

        let s = &mut self.summary;
        s.accepted += 1;
        match event.kind {
            MetricKind::TaskLoss { task, value } => {
                s.last_loss.insert(task, value);
                *s.loss_events.entry(task).or_default() += 1;
            }
            MetricKind::Throughput { samples_per_s } => {
                s.throughput_sum += samples_per_s;
                s.throughput_events += 1;
            }
            MetricKind::Memory { bytes } => s.peak_memory_bytes = s.peak_memory_bytes.max(bytes),
            MetricKind::Utilization { fraction } => {
                s.utilization_min = Some(s.utilization_min.map_or(fraction, |m| m.min(fraction)));
            }
        }

        let alert = self.detector.observe(&self.config, event.step, &event.kind);
        if alert.is_some() {
            self.alerts_raised += 1;
        }
        Ok(alert)
    }
}

/// Runs both detectors from a fresh state over `window`. Rejected events are
/// skipped exactly as [`Monitor::record`] would skip them.
pub fn detect(window: &[MetricEvent], config: &MonitorConfig) -> Vec<Alert> {
    let mut m = Monitor::new(config.clone());
    window.iter().filter_map(|e| m.record(e).ok().flatten()).collect()
}

/// Merges alerts of the same kind and task whose step ranges overlap or touch.
pub fn coalesce(alerts: &[Alert]) -> Vec<Alert> {
    let mut out: Vec<Alert> = Vec::new();
    for a in alerts {
        let merged = out.iter_mut().rev().find(|o| o.kind == a.kind && o.task == a.task);
        match merged {
            Some(o) if a.step_start <= o.step_end + 1 => {
                o.step_end = o.step_end.max(a.step_end);
                o.evidence = a.evidence;
            }
            _ => out.push(a.clone()),
        }
    }
    out
}

/// Mutex-guarded monitor for appenders on several threads.
#[derive(Debug, Clone)]
pub struct SharedMonitor(Arc<Mutex<Monitor>>);

impl SharedMonitor {
    pub fn new(monitor: Monitor) -> Self {
        Self(Arc::new(Mutex::new(monitor)))
    }

    pub fn record(&self, event: &MetricEvent) -> Result<Option<Alert>, MonitorError> {
        self.0.lock().expect("monitor lock").record(event)
    }

    pub fn snapshot(&self) -> Monitor {
        self.0.lock().expect("monitor lock").clone()
    }
}
