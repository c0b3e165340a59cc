use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{fnv1a64, Fnv1a64};
use crate::rng::{derive_seed, SplitMix64};
use crate::schema::{Sample, TaskType};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainerError {
    #[error("TRAINER_FAILURE at step {step}: {reason}")]
    Failure { step: u64, reason: String },
    #[error("trainer blob rejected: {0}")]
    BadBlob(String),
}

/// What one optimization step reports.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub losses: BTreeMap<TaskType, f64>,
    pub utilization: f64,
    pub memory_bytes: u64,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainerBlobs {
    pub model: Vec<u8>,
    pub optimizer: Vec<u8>,
}

/// Contract between the orchestrator and a training backend.
pub trait Trainer {
    fn step(&mut self, batch: &[Sample], step: u64) -> Result<StepOutput, TrainerError>;
    fn snapshot(&self) -> TrainerBlobs;
    fn restore(&mut self, blobs: &TrainerBlobs) -> Result<(), TrainerError>;
    /// Held-out loss per task after `step` steps.
    fn validation_losses(&self, tasks: &[TaskType], step: u64) -> BTreeMap<TaskType, f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCurve {
    pub l0: f64,
    pub k: f64,
    pub sigma: f64,
}

impl Default for LossCurve {
    fn default() -> Self {
        Self {
            l0: 2.5,
            k: 2e-4,
            sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedTrainerConfig {
    #[serde(default)]
    pub default_curve: LossCurve,
    /// Per-task overrides of `default_curve`.
    #[serde(default)]
    pub curves: BTreeMap<TaskType, LossCurve>,
    /// Parameter groups held fixed; carried through, not interpreted.
    #[serde(default)]
    pub frozen_groups: Vec<String>,
}

impl SimulatedTrainerConfig {
    pub fn curve(&self, task: TaskType) -> LossCurve {
        self.curves.get(&task).copied().unwrap_or(self.default_curve)
    }
}

const TRAIN_DOMAIN: u64 = 0x7472_6169_6e00_0001;
const VALID_DOMAIN: u64 = 0x7661_6c69_6400_0002;
const SYSTEM_DOMAIN: u64 = 0x7379_7374_6d00_0003;
const MODEL_MAGIC: &[u8; 8] = b"PFSIMMDL";
const OPTIM_MAGIC: &[u8; 8] = b"PFSIMOPT";

/// Analytic stand-in for a real trainer.
///
/// The loss for task `t` at step `n` is `L0·exp(−k·n) + σ·z(seed, t, n)`
/// with `z` a standard normal drawn from a stream keyed by `(seed, t, n)`.
/// Validation uses a separate key domain and clamps at zero. The model blob
/// folds in a hash of every consumed sample id, so it witnesses the exact
/// data order.
#[derive(Debug, Clone)]
pub struct SimulatedTrainer {
    config: SimulatedTrainerConfig,
    seed: u64,
    steps_taken: u64,
    data_digest: u64,
    task_steps: BTreeMap<TaskType, u64>,
    fail_at_step: Option<u64>,
}

fn noise(seed: u64, domain: u64, task: TaskType, n: u64) -> f64 {
    SplitMix64::new(derive_seed(seed, &[domain, task.index() as u64, n])).next_gaussian()
}

impl SimulatedTrainer {
    pub fn new(config: SimulatedTrainerConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            steps_taken: 0,
            data_digest: 0,
            task_steps: BTreeMap::new(),
            fail_at_step: None,
        }
    }

    /// Makes `step` return a trainer failure.
    pub fn fail_at(mut self, step: u64) -> Self {
        self.fail_at_step = Some(step);
        self
    }

    pub fn loss(&self, task: TaskType, n: u64) -> f64 {
        let c = self.config.curve(task);
        c.l0 * (-c.k * n as f64).exp() + c.sigma * noise(self.seed, TRAIN_DOMAIN, task, n)
    }

    pub fn validation_loss(&self, task: TaskType, n: u64) -> f64 {
        let c = self.config.curve(task);
        (c.l0 * (-c.k * n as f64).exp() + c.sigma * noise(self.seed, VALID_DOMAIN, task, n)).max(0.0)
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn frozen_groups(&self) -> &[String] {
        &self.config.frozen_groups
    }
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], TrainerError> {
    if bytes.len() < n {
        return Err(TrainerError::BadBlob("truncated".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8]) -> Result<u64, TrainerError> {
    Ok(u64::from_le_bytes(take(bytes, 8)?.try_into().expect("8 bytes")))
}

impl Trainer for SimulatedTrainer {
    fn step(&mut self, batch: &[Sample], step: u64) -> Result<StepOutput, TrainerError> {
        if self.fail_at_step == Some(step) {
            return Err(TrainerError::Failure {
                step,
                reason: "injected failure".into(),
            });
        }
        let task = batch.first().map(|s| s.task).ok_or_else(|| TrainerError::Failure {
            step,
            reason: "empty batch".into(),
        })?;
        let mut h = Fnv1a64::new();
        h.update(&self.data_digest.to_le_bytes());
        h.update(&step.to_le_bytes());
        let mut bytes = 0u64;
        for s in batch {
            h.update(s.id.as_bytes());
            h.update(&[0]);
            bytes += (s.instruction.len() + s.id.len() + s.visual.uri.len()) as u64;
        }
        self.data_digest = h.finish();
        self.steps_taken += 1;
        *self.task_steps.entry(task).or_default() += 1;

        let z = noise(self.seed, SYSTEM_DOMAIN, task, step);
        Ok(StepOutput {
            losses: BTreeMap::from([(task, self.loss(task, step))]),
            utilization: (0.92 + 0.02 * z).clamp(0.0, 1.0),
            memory_bytes: (6u64 << 30) + bytes * 4096,
            throughput: batch.len() as f64 * (120.0 + 4.0 * z).max(1.0),
        })
    }

    fn snapshot(&self) -> TrainerBlobs {
        let mut model = MODEL_MAGIC.to_vec();
        model.extend(self.steps_taken.to_le_bytes());
        model.extend(self.data_digest.to_le_bytes());
        model.extend(fnv1a64(self.config.frozen_groups.join("\n").as_bytes()).to_le_bytes());

        let mut optimizer = OPTIM_MAGIC.to_vec();
        optimizer.extend((self.task_steps.len() as u64).to_le_bytes());
        for (task, n) in &self.task_steps {
            optimizer.extend((task.index() as u64).to_le_bytes());
            optimizer.extend(n.to_le_bytes());
        }
        TrainerBlobs { model, optimizer }
    }

    fn restore(&mut self, blobs: &TrainerBlobs) -> Result<(), TrainerError> {
        let mut m = blobs.model.as_slice();
        if take(&mut m, 8)? != MODEL_MAGIC {
            return Err(TrainerError::BadBlob("model magic".into()));
        }
        let steps_taken = take_u64(&mut m)?;
        let data_digest = take_u64(&mut m)?;
        let frozen = take_u64(&mut m)?;
        if frozen != fnv1a64(self.config.frozen_groups.join("\n").as_bytes()) {
            return Err(TrainerError::BadBlob("frozen groups differ".into()));
        }

        let mut o = blobs.optimizer.as_slice();
        if take(&mut o, 8)? != OPTIM_MAGIC {
            return Err(TrainerError::BadBlob("optimizer magic".into()));
        }
        let mut task_steps = BTreeMap::new();
        for _ in 0..take_u64(&mut o)? {
            let idx = take_u64(&mut o)? as usize;
            let task = *TaskType::ALL
                .get(idx)
                .ok_or_else(|| TrainerError::BadBlob(format!("task index {idx}")))?;
            task_steps.insert(task, take_u64(&mut o)?);
        }
        self.steps_taken = steps_taken;
        self.data_digest = data_digest;
        self.task_steps = task_steps;
        Ok(())
    }

    fn validation_losses(&self, tasks: &[TaskType], step: u64) -> BTreeMap<TaskType, f64> {
        tasks.iter().map(|&t| (t, self.validation_loss(t, step))).collect()
    }
}
