use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::adapters::{parse_ego_clip, parse_record};
use super::mcq::{build_mcq, build_open, EgoClip};
use super::report::{DatasetCounts, IngestReport};
use super::synthetic::{generate_synthetic_corpus, SyntheticSpec};
use super::{filter_grounding, AdapterId, DropReason, FilterVerdict, IngestError, Strictness};
use crate::hash::fnv1a64;
use crate::rng::derive_seed;
use crate::schema::{validate_sample, Sample, TaskType};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Sink(#[from] io::Error),
    #[error("invalid corpus manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub strictness: Strictness,
    /// Seeds distractor sampling for derived multiple-choice items.
    pub seed: u64,
    /// Overrides the synthetic section's adversarial fraction when set.
    pub adversarial_fraction: Option<f64>,
    /// Records parsed per parallel batch.
    pub chunk_size: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            strictness: Strictness::Strict,
            seed: 0,
            adversarial_fraction: None,
            chunk_size: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub adapter_id: AdapterId,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEntry {
    pub seed: u64,
    pub counts: BTreeMap<TaskType, usize>,
    #[serde(default)]
    pub adversarial_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    #[serde(default)]
    pub sources: Vec<SourceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticEntry>,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))
    }
}

pub(crate) enum Outcome {
    Accepted { sample: Sample, unknown_scene: bool },
    Dropped(DropReason),
    Invalid(IngestError),
}

/// Filter then full validation, the path every parsed or generated sample takes.
pub(crate) fn classify(sample: Sample) -> Outcome {
    let mut unknown_scene = false;
    if sample.task.is_grounding() {
        match filter_grounding(&sample) {
            Ok(FilterVerdict::Drop(reason)) => return Outcome::Dropped(reason),
            Ok(FilterVerdict::Keep { unknown_scene: u }) => unknown_scene = u,
            Err(e) => return Outcome::Invalid(e),
        }
    }
    let verdict = validate_sample(&sample);
    if !verdict.is_ok() {
        let codes: Vec<&str> = verdict.violations.iter().map(|v| v.code()).collect();
        return Outcome::Invalid(IngestError::schema("$", codes.join(",")));
    }
    Outcome::Accepted { sample, unknown_scene }
}

pub(crate) fn tally(
    outcome: Outcome,
    counts: &mut DatasetCounts,
    seen_ids: &mut HashSet<String>,
    sink: &mut dyn FnMut(Sample) -> io::Result<()>,
) -> io::Result<bool> {
    counts.read += 1;
    match outcome {
        Outcome::Dropped(DropReason::PointCount) => counts.dropped_point_count += 1,
        Outcome::Dropped(DropReason::Outdoor) => counts.dropped_outdoor += 1,
        Outcome::Invalid(e) => {
            debug!("dropping record: {e}");
            counts.dropped_schema += 1;
        }
        Outcome::Accepted { sample, unknown_scene } => {
            if !seen_ids.insert(sample.id.clone()) {
                debug!("dropping duplicate id {}", sample.id);
                counts.dropped_schema += 1;
                return Ok(false);
            }
            counts.accepted += 1;
            if unknown_scene {
                counts.kept_unknown_scene += 1;
            }
            sink(sample)?;
            return Ok(true);
        }
    }
    Ok(false)
}

fn process_line(line: &[u8], adapter: AdapterId, strictness: Strictness) -> (Outcome, Option<EgoClip>) {
    if adapter == AdapterId::EgoplanClip {
        let parsed = parse_ego_clip(line, strictness).and_then(|clip| {
            let open = build_open(&clip)?;
            Ok((open, clip))
        });
        return match parsed {
            Ok((open, clip)) => (classify(open), Some(clip)),
            Err(e) => (Outcome::Invalid(e), None),
        };
    }
    match parse_record(line, adapter, strictness) {
        Ok(sample) => (classify(sample), None),
        Err(e) => (Outcome::Invalid(e), None),
    }
}

fn read_chunk<R: BufRead>(reader: &mut R, max: usize) -> io::Result<Vec<Vec<u8>>> {
    let mut chunk = Vec::new();
    while chunk.len() < max {
        let mut line = Vec::new();
        if reader.read_until(b'\n', &mut line)? == 0 {
            break;
        }
        if line.last() == Some(&b'\n') {
            line.pop();
            if line.last() == Some(&b'\r') {
                line.pop();
            }
        }
        chunk.push(line);
    }
    Ok(chunk)
}

/// Ingests one JSONL source. Parsing runs in parallel per chunk; counting,
/// id deduplication and emission stay in input order.
///
/// For `egoplan_clip` sources every accepted clip yields an open-ended item,
/// then a multiple-choice item built against all accepted clips of the source.
pub fn ingest_source<R: BufRead>(
    mut reader: R,
    adapter: AdapterId,
    opts: &IngestOptions,
    seen_ids: &mut HashSet<String>,
    sink: &mut dyn FnMut(Sample) -> io::Result<()>,
) -> io::Result<DatasetCounts> {
    let mut counts = DatasetCounts::default();
    let mut clips = Vec::new();
    let chunk_size = opts.chunk_size.max(1);
    loop {
        let chunk = read_chunk(&mut reader, chunk_size)?;
        if chunk.is_empty() {
            break;
        }
        let outcomes: Vec<(Outcome, Option<EgoClip>)> = chunk
            .par_iter()
            .map(|line| process_line(line, adapter, opts.strictness))
            .collect();
        for (outcome, clip) in outcomes {
            if tally(outcome, &mut counts, seen_ids, sink)? {
                clips.extend(clip);
            }
        }
    }

    for clip in &clips {
        let seed = derive_seed(opts.seed, &[fnv1a64(clip.clip_id.as_bytes())]);
        match build_mcq(clip, &clips, seed) {
            Ok(sample) if seen_ids.insert(sample.id.clone()) => {
                counts.derived_mcq += 1;
                sink(sample)?;
            }
            Ok(sample) => warn!("skipping multiple-choice item with duplicate id {}", sample.id),
            Err(e) => {
                debug!("no multiple-choice item for {}: {e}", clip.clip_id);
                counts.mcq_pool_too_small += 1;
            }
        }
    }
    Ok(counts)
}

/// Runs every source listed in a corpus manifest, then the synthetic section.
pub fn ingest_manifest(
    manifest: &CorpusManifest,
    base_dir: &Path,
    opts: &IngestOptions,
    sink: &mut dyn FnMut(Sample) -> io::Result<()>,
) -> Result<IngestReport, PipelineError> {
    let mut report = IngestReport::default();
    let mut seen_ids = HashSet::new();
    for entry in &manifest.sources {
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base_dir.join(&entry.path)
        };
        let file = File::open(&path).map_err(|source| PipelineError::Io {
            path: path.clone(),
            source,
        })?;
        let counts = ingest_source(BufReader::new(file), entry.adapter_id, opts, &mut seen_ids, sink)
            .map_err(|source| PipelineError::Io { path, source })?;
        let name = entry.adapter_id.as_str();
        report.dataset_mut(name).merge(&counts);
        if let Some(n) = entry.expected_count {
            *report.expected_counts.entry(name.to_string()).or_default() += n;
        }
    }
    if let Some(syn) = &manifest.synthetic {
        let spec = SyntheticSpec {
            seed: syn.seed,
            counts: syn.counts.clone(),
            adversarial_fraction: opts.adversarial_fraction.unwrap_or(syn.adversarial_fraction),
        };
        let mut dedup_sink = |s: Sample| {
            if seen_ids.insert(s.id.clone()) {
                sink(s)
            } else {
                Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("synthetic id {} collides with a source record", s.id),
                ))
            }
        };
        let syn_report = generate_synthetic_corpus(&spec, &mut dedup_sink)?;
        report.merge(&syn_report);
    }
    Ok(report)
}
