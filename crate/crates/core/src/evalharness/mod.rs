//! Benchmark scoring: multi-reference sentence BLEU for free-form answers
//! and per-category top-1 accuracy for multiple choice.

mod bleu;
mod normalize;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{letter_index, TaskType};

pub use bleu::{
    bleu, bleu_avg, bleu_corpus, clipped_precisions, round1, sentence_bleu, tokenize, SentenceBleu, MAX_ORDER,
};
pub use normalize::{collapse_whitespace, normalize_output, normalize_text, NormRule, Normalized, MCQ_CASCADE_VERSION};

pub const BLEU_PROTOCOL: &str = "robovqa-bleu";
pub const TOP1_PROTOCOL: &str = "egoplan-top1";
/// Scoring variant for the BLEU protocol: sentence level, clipped against
/// the per-n-gram maximum over references, half-inverse-count smoothing.
pub const BLEU_VARIANT: &str = "sentence-bleu/multi-ref-max-clip/smooth-1-over-2h/v1";

pub const DEFAULT_CATEGORIES: [&str; 4] = ["Daily life", "Work", "Recreation", "Hobbies"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference set is empty")]
    EmptyReferences,
    #[error("BLEU order {0} outside 1..=4")]
    InvalidOrder(usize),
    #[error("prediction `{0}` has no gold item")]
    UnknownPrediction(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("gold item `{id}` is invalid: {reason}")]
    InvalidGold { id: String, reason: String },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("IO_FAILURE on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeFormGold {
    pub id: String,
    pub refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqGold {
    pub id: String,
    pub letter: char,
    pub options: Vec<String>,
    pub category: String,
}

/// One scored prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub raw_text: String,
    pub normalized: Normalized,
    pub task: TaskType,
}

pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gold: u64,
    pub predictions: u64,
    pub missing_predictions: u64,
    pub empty_hypotheses: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationAudit {
    pub version: String,
    pub by_rule: BTreeMap<NormRule, u64>,
    /// Predictions resolved by a text-matching rule rather than a letter.
    pub fallback: u64,
    pub unparseable: u64,
}

impl NormalizationAudit {
    fn note(&mut self, rule: NormRule) {
        *self.by_rule.entry(rule).or_default() += 1;
        if rule.is_fallback() {
            self.fallback += 1;
        }
        if rule == NormRule::Unparseable {
            self.unparseable += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub bleu_avg: f64,
    /// Unrounded corpus means ×100 for orders 1..4.
    pub raw: [f64; MAX_ORDER],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: String,
    pub correct: u64,
    pub total: u64,
    /// `None` for a category with no gold items.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Top1Scores {
    pub categories: Vec<CategoryAccuracy>,
    pub correct: u64,
    pub total: u64,
    /// Total correct over total items.
    pub overall: f64,
    /// Unweighted mean over nonempty categories.
    pub category_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub variant: String,
    pub counts: EvalCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<BleuScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<Top1Scores>,
    pub audit: NormalizationAudit,
}

impl EvalReport {
    /// Checks the aggregation identities a well-formed report satisfies.
    pub fn check_invariants(&self) -> Result<(), String> {
        if let Some(b) = &self.bleu {
            let rounded = [b.bleu1, b.bleu2, b.bleu3, b.bleu4];
            for (k, (r, raw)) in rounded.iter().zip(&b.raw).enumerate() {
                if *r != round1(*raw) {
                    return Err(format!("BLEU-{} is {r}, expected {}", k + 1, round1(*raw)));
                }
                if !(0.0..=100.0).contains(raw) {
                    return Err(format!("BLEU-{} raw {raw} out of range", k + 1));
                }
            }
            let mean = b.raw.iter().sum::<f64>() / 4.0;
            if b.bleu_avg != round1(mean) {
                return Err(format!(
                    "BLEU-avg {} but mean of raw scores rounds to {}",
                    b.bleu_avg,
                    round1(mean)
                ));
            }
        }
        if let Some(t) = &self.top1 {
            let correct: u64 = t.categories.iter().map(|c| c.correct).sum();
            let total: u64 = t.categories.iter().map(|c| c.total).sum();
            if correct != t.correct || total != t.total {
                return Err("category counts do not sum to the totals".into());
            }
            let expected = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
            if t.overall != expected {
                return Err(format!("overall {} but correct/total is {expected}", t.overall));
            }
            for c in &t.categories {
                let want = (c.total > 0).then(|| c.correct as f64 / c.total as f64);
                if c.accuracy != want {
                    return Err(format!("category {} accuracy mismatch", c.category));
                }
            }
        }
        let audited: u64 = self.audit.by_rule.values().sum();
        if audited != self.counts.gold - self.counts.missing_predictions {
            return Err("audit does not cover every scored prediction".into());
        }
        Ok(())
    }
}

fn index_predictions<'a>(
    predictions: &'a [PredictionRecord],
    gold_ids: &HashSet<&str>,
) -> Result<HashMap<&'a str, &'a PredictionRecord>, EvalError> {
    let mut by_id = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if !gold_ids.contains(p.id.as_str()) {
            return Err(EvalError::UnknownPrediction(p.id.clone()));
        }
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(EvalError::DuplicateId(p.id.clone()));
        }
    }
    Ok(by_id)
}

fn gold_id_set<'a>(ids: impl Iterator<Item = &'a str>) -> Result<HashSet<&'a str>, EvalError> {
    let mut set = HashSet::new();
    for id in ids {
        if !set.insert(id) {
            return Err(EvalError::DuplicateId(id.to_string()));
        }
    }
    Ok(set)
}

/// Free-form protocol. Missing predictions score as empty hypotheses.
pub fn evaluate_bleu(predictions: &[PredictionRecord], gold: &[FreeFormGold]) -> Result<EvalReport, EvalError> {
    let ids = gold_id_set(gold.iter().map(|g| g.id.as_str()))?;
    let by_id = index_predictions(predictions, &ids)?;
    for g in gold {
        if g.refs.is_empty() {
            return Err(EvalError::InvalidGold {
                id: g.id.clone(),
                reason: "no references".into(),
            });
        }
    }

    let scored: Vec<(Option<NormRule>, SentenceBleu)> = gold
        .par_iter()
        .map(|g| {
            let refs: Vec<Vec<String>> = g.refs.iter().map(|r| tokenize(r)).collect();
            let (rule, hyp) = match by_id.get(g.id.as_str()) {
                Some(p) => {
                    let n = normalize_output(&p.raw_text, TaskType::PlanningQa, None);
                    (Some(n.rule), tokenize(n.answer.as_deref().unwrap_or("")))
                }
                None => (None, Vec::new()),
            };
            sentence_bleu(&hyp, &refs).map(|s| (rule, s))
        })
        .collect::<Result<_, _>>()?;

    let mut counts = EvalCounts {
        gold: gold.len() as u64,
        predictions: predictions.len() as u64,
        ..Default::default()
    };
    let mut audit = NormalizationAudit {
        version: "free-text-v1".into(),
        ..Default::default()
    };
    let mut sums = [0.0; MAX_ORDER];
    for (rule, s) in &scored {
        match rule {
            Some(r) => audit.note(*r),
            None => counts.missing_predictions += 1,
        }
        if s.empty_hypothesis {
            counts.empty_hypotheses += 1;
        }
        for (acc, x) in sums.iter_mut().zip(s.scores) {
            *acc += x;
        }
    }
    let n = gold.len().max(1) as f64;
    let raw = sums.map(|s| 100.0 * s / n);
    let bleu = BleuScores {
        bleu1: round1(raw[0]),
        bleu2: round1(raw[1]),
        bleu3: round1(raw[2]),
        bleu4: round1(raw[3]),
        bleu_avg: round1(raw.iter().sum::<f64>() / 4.0),
        raw,
    };
    Ok(EvalReport {
        protocol: BLEU_PROTOCOL.into(),
        variant: BLEU_VARIANT.into(),
        counts,
        bleu: Some(bleu),
        top1: None,
        audit,
    })
}

/// Multiple-choice protocol over `taxonomy` plus any extra gold categories.
pub fn top1(predictions: &[PredictionRecord], gold: &[McqGold], taxonomy: &[&str]) -> Result<EvalReport, EvalError> {
    let ids = gold_id_set(gold.iter().map(|g| g.id.as_str()))?;
    let by_id = index_predictions(predictions, &ids)?;

    let mut order: Vec<String> = taxonomy.iter().map(|s| s.to_string()).collect();
    let mut tallies: BTreeMap<String, (u64, u64)> = order.iter().map(|c| (c.clone(), (0, 0))).collect();
    let mut counts = EvalCounts {
        gold: gold.len() as u64,
        predictions: predictions.len() as u64,
        ..Default::default()
    };
    let mut audit = NormalizationAudit {
        version: MCQ_CASCADE_VERSION.into(),
        ..Default::default()
    };
    for g in gold {
        match letter_index(g.letter) {
            Some(i) if i < g.options.len() => {}
            _ => {
                return Err(EvalError::InvalidGold {
                    id: g.id.clone(),
                    reason: format!("letter {} does not name one of {} options", g.letter, g.options.len()),
                })
            }
        }
        if !tallies.contains_key(&g.category) {
            order.push(g.category.clone());
            tallies.insert(g.category.clone(), (0, 0));
        }
        let correct = match by_id.get(g.id.as_str()) {
            Some(p) => {
                let n = normalize_output(&p.raw_text, TaskType::EgoViewMcq, Some(&g.options));
                audit.note(n.rule);
                n.answer.as_deref() == Some(g.letter.to_string().as_str())
            }
            None => {
                counts.missing_predictions += 1;
                false
            }
        };
        let t = tallies.get_mut(&g.category).expect("category registered");
        t.1 += 1;
        if correct {
            t.0 += 1;
        }
    }

    let categories: Vec<CategoryAccuracy> = order
        .iter()
        .map(|c| {
            let (correct, total) = tallies[c];
            CategoryAccuracy {
                category: c.clone(),
                correct,
                total,
                accuracy: (total > 0).then(|| correct as f64 / total as f64),
            }
        })
        .collect();
    let correct: u64 = categories.iter().map(|c| c.correct).sum();
    let total: u64 = categories.iter().map(|c| c.total).sum();
    let nonempty: Vec<f64> = categories.iter().filter_map(|c| c.accuracy).collect();
    Ok(EvalReport {
        protocol: TOP1_PROTOCOL.into(),
        variant: MCQ_CASCADE_VERSION.into(),
        counts,
        bleu: None,
        top1: Some(Top1Scores {
            categories,
            correct,
            total,
            overall: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            category_mean: (!nonempty.is_empty()).then(|| nonempty.iter().sum::<f64>() / nonempty.len() as f64),
        }),
        audit,
    })
}
