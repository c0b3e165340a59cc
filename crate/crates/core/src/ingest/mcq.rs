use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::rng::SplitMix64;
use crate::schema::{option_letter, Sample, SupervisionTarget, TaskType, VisualInput};

/// Options per multiple-choice item: the labeled action plus three distractors.
pub const MCQ_OPTIONS: usize = 4;
const DISTRACTORS: usize = MCQ_OPTIONS - 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgoClip {
    pub clip_id: String,
    pub video: VisualInput,
    pub history_summary: String,
    pub labeled_action: String,
    pub sequence_id: String,
}

/// Lowercase with internal whitespace collapsed. Two actions are the same
/// option iff their normalized forms are equal.
pub fn normalize_action(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn tidy(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn instruction(clip: &EgoClip, mcq: bool) -> String {
    let history = tidy(&clip.history_summary);
    if mcq {
        format!("Progress so far: {history}. Which of the listed actions should be taken next?")
    } else {
        format!("Progress so far: {history}. What action should be taken next?")
    }
}

/// Open-ended item whose only accepted answer is the labeled action.
pub fn build_open(clip: &EgoClip) -> Result<Sample, IngestError> {
    if clip.labeled_action.trim().is_empty() {
        return Err(IngestError::EmptyAction);
    }
    Ok(Sample {
        id: clip.clip_id.clone(),
        task: TaskType::EgoViewOpen,
        visual: clip.video.clone(),
        instruction: instruction(clip, false),
        target: SupervisionTarget::FreeText {
            answers: vec![tidy(&clip.labeled_action)],
        },
        source_dataset: "egoplan-it-100k".into(),
        scene_tag: None,
    })
}

/// Four-option multiple-choice item with distractors drawn from other sequences.
///
/// A pool clip is eligible when it belongs to a different sequence and its
/// normalized action differs from the labeled one; eligible actions are
/// deduplicated in pool order. Three are chosen and the four options are
/// shuffled, both driven by `seed` alone.
pub fn build_mcq(clip: &EgoClip, pool: &[EgoClip], seed: u64) -> Result<Sample, IngestError> {
    if clip.labeled_action.trim().is_empty() {
        return Err(IngestError::EmptyAction);
    }
    let correct_key = normalize_action(&clip.labeled_action);
    let mut seen = HashSet::from([correct_key]);
    let mut eligible: Vec<String> = pool
        .iter()
        .filter(|c| c.sequence_id != clip.sequence_id)
        .filter(|c| {
            let key = normalize_action(&c.labeled_action);
            !key.is_empty() && seen.insert(key)
        })
        .map(|c| tidy(&c.labeled_action))
        .collect();
    if eligible.len() < DISTRACTORS {
        return Err(IngestError::PoolTooSmall {
            eligible: eligible.len(),
        });
    }

    let mut rng = SplitMix64::new(seed);
    for i in 0..DISTRACTORS {
        let j = i + rng.below((eligible.len() - i) as u64) as usize;
        eligible.swap(i, j);
    }
    let mut options: Vec<(bool, String)> = std::iter::once((true, tidy(&clip.labeled_action)))
        .chain(eligible.into_iter().take(DISTRACTORS).map(|d| (false, d)))
        .collect();
    rng.shuffle(&mut options);
    let correct = options.iter().position(|(c, _)| *c).expect("correct option present");

    Ok(Sample {
        id: format!("{}-mcq", clip.clip_id),
        task: TaskType::EgoViewMcq,
        visual: clip.video.clone(),
        instruction: instruction(clip, true),
        target: SupervisionTarget::OptionLetter {
            letter: option_letter(correct).expect("four options"),
            options: options.into_iter().map(|(_, text)| text).collect(),
        },
        source_dataset: "egoplan-it-100k".into(),
        scene_tag: None,
    })
}
