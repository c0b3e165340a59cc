//! Task-balanced sampler driven by validation loss.
//!
//! Weights start uniform. Each update sets raw weights proportional to the
//! per-task validation loss and projects them onto the box-constrained
//! simplex `{w : Σw = 1, w_min ≤ w_i ≤ w_max}` by clamp-and-renormalize.
//! The projection is computed exactly in rational arithmetic: the result is
//! `w_i = clip(λ·L_i, w_min, w_max)` for the unique `λ` with `Σw_i = 1`,
//! which is the fixed point iterative clamping converges to. Tasks are drawn
//! by inverse CDF over [`TaskType`] order with a [`SplitMix64`] stream.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::schema::TaskType;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("INFEASIBLE_BOUNDS: {0}")]
    InfeasibleBounds(String),
    #[error("MISSING_TASK: no validation loss for {0}")]
    MissingTask(TaskType),
    #[error("UNKNOWN_TASK: {0} is not sampled")]
    UnknownTask(TaskType),
    #[error("ALL_ZERO_LOSSES: weights left unchanged")]
    AllZeroLosses,
    #[error("INVALID_LOSS: {task} has loss {value}")]
    InvalidLoss { task: TaskType, value: f64 },
}

mod decimal_u64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerState {
    pub weights: BTreeMap<TaskType, f64>,
    pub w_min: f64,
    pub w_max: f64,
    /// Weight kept from the previous vector on update; 0 disables smoothing.
    #[serde(default)]
    pub beta: f64,
    #[serde(with = "decimal_u64")]
    pub rng_state: u64,
    pub update_count: u64,
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite value")
}

fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().expect("bounded ratio")
}

fn clip(x: BigRational, lo: &BigRational, hi: &BigRational) -> BigRational {
    if &x < lo {
        lo.clone()
    } else if &x > hi {
        hi.clone()
    } else {
        x
    }
}

/// Exact projection of nonnegative scores `r` onto the box-constrained simplex.
///
/// Tasks with zero score sit at `lo` unless every positive-score task is
/// capped, in which case they share the remaining mass equally.
pub fn project(r: &[BigRational], lo: &BigRational, hi: &BigRational) -> Vec<BigRational> {
    let n = r.len();
    let one = BigRational::one();
    let total = |lambda: &BigRational| -> BigRational {
        r.iter()
            .map(|ri| clip(lambda * ri, lo, hi))
            .fold(BigRational::zero(), |a, b| a + b)
    };

    let zero_count = r.iter().filter(|x| x.is_zero()).count();
    let saturated = hi * BigRational::from_integer(BigInt::from(n - zero_count))
        + lo * BigRational::from_integer(BigInt::from(zero_count));
    if saturated < one {
        let share = (&one - hi * BigRational::from_integer(BigInt::from(n - zero_count)))
            / BigRational::from_integer(BigInt::from(zero_count));
        return r
            .iter()
            .map(|ri| if ri.is_zero() { share.clone() } else { hi.clone() })
            .collect();
    }

    let mut breaks: Vec<BigRational> = vec![BigRational::zero()];
    for ri in r.iter().filter(|x| !x.is_zero()) {
        breaks.push(lo / ri);
        breaks.push(hi / ri);
    }
    breaks.sort();
    breaks.dedup();

    let mut prev = breaks[0].clone();
    let mut f_prev = total(&prev);
    let mut lambda = prev.clone();
    if f_prev < one {
        for b in breaks.into_iter().skip(1) {
            let f_b = total(&b);
            if f_b >= one {
                lambda = &prev + (&one - &f_prev) * (&b - &prev) / (&f_b - &f_prev);
                break;
            }
            prev = b;
            f_prev = f_b;
        }
    }
    r.iter().map(|ri| clip(&lambda * ri, lo, hi)).collect()
}

impl SamplerState {
    pub fn init(tasks: &[TaskType], w_min: f64, w_max: f64, seed: u64) -> Result<Self, SamplerError> {
        let mut weights = BTreeMap::new();
        for &t in tasks {
            weights.insert(t, 0.0);
        }
        let n = weights.len();
        if n == 0 {
            return Err(SamplerError::InfeasibleBounds("no tasks".into()));
        }
        check_bounds(n, w_min, w_max)?;
        for w in weights.values_mut() {
            *w = 1.0 / n as f64;
        }
        Ok(Self {
            weights,
            w_min,
            w_max,
            beta: 0.0,
            rng_state: SplitMix64::new(seed).state(),
            update_count: 0,
        })
    }

    pub fn with_smoothing(mut self, beta: f64) -> Self {
        assert!((0.0..1.0).contains(&beta), "beta must lie in [0, 1)");
        self.beta = beta;
        self
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskType> + '_ {
        self.weights.keys().copied()
    }

    pub fn weight(&self, task: TaskType) -> f64 {
        self.weights.get(&task).copied().unwrap_or(0.0)
    }

    /// Loss-proportional update followed by exact box projection.
    pub fn update_weights(&self, losses: &BTreeMap<TaskType, f64>) -> Result<Self, SamplerError> {
        for (&task, &value) in losses {
            if !self.weights.contains_key(&task) {
                return Err(SamplerError::UnknownTask(task));
            }
            if !value.is_finite() || value < 0.0 {
                return Err(SamplerError::InvalidLoss { task, value });
            }
        }
        let mut raw = Vec::with_capacity(self.weights.len());
        for &task in self.weights.keys() {
            let l = losses.get(&task).ok_or(SamplerError::MissingTask(task))?;
            raw.push(exact(*l));
        }
        if raw.iter().all(Zero::is_zero) {
            return Err(SamplerError::AllZeroLosses);
        }

        let projected = project(&raw, &exact(self.w_min), &exact(self.w_max));
        let beta = exact(self.beta);
        let keep = BigRational::one() - &beta;
        let mut next = self.clone();
        for ((_, w), new) in next.weights.iter_mut().zip(projected) {
            let mixed = &beta * exact(*w) + &keep * new;
            *w = to_f64(&mixed);
        }
        next.update_count += 1;
        Ok(next)
    }

    /// Inverse-CDF draw over tasks in canonical order.
    pub fn draw(&self) -> (TaskType, Self) {
        let mut rng = SplitMix64::from_state(self.rng_state);
        let u = rng.next_f64();
        let mut cumulative = 0.0;
        let mut chosen = None;
        for (&task, &w) in &self.weights {
            if w <= 0.0 {
                continue;
            }
            cumulative += w;
            chosen = Some(task);
            if u < cumulative {
                break;
            }
        }
        let mut next = self.clone();
        next.rng_state = rng.state();
        (chosen.expect("some task has positive weight"), next)
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.values().sum()
    }
}

fn check_bounds(n: usize, w_min: f64, w_max: f64) -> Result<(), SamplerError> {
    let ok = w_min.is_finite()
        && w_max.is_finite()
        && 0.0 <= w_min
        && w_max <= 1.0
        && exact(w_min) * BigRational::from_integer(BigInt::from(n)) <= BigRational::one()
        && exact(w_max) * BigRational::from_integer(BigInt::from(n)) >= BigRational::one();
    if ok {
        Ok(())
    } else {
        Err(SamplerError::InfeasibleBounds(format!(
            "{n} tasks cannot satisfy w_min={w_min}, w_max={w_max}"
        )))
    }
}
