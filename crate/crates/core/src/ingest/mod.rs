//! Source-dataset adapters, grounding filters, multiple-choice construction
//! and the synthetic corpus generator.

mod adapters;
mod mcq;
mod pipeline;
mod report;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Sample, SceneTag, SupervisionTarget, TaskType, MAX_POINTS};

pub use adapters::{parse_ego_clip, parse_record};
pub use mcq::{build_mcq, build_open, normalize_action, EgoClip, MCQ_OPTIONS};
pub use pipeline::{
    ingest_manifest, ingest_source, CorpusManifest, IngestOptions, PipelineError, SourceEntry, SyntheticEntry,
};
pub use report::{DatasetCounts, IngestReport};
pub use synthetic::{generate_synthetic_corpus, SyntheticGenerator, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterId {
    LvisBox,
    PixmoPoint,
    Robopoint,
    EgoplanClip,
    RobovqaQa,
    SharerobotQa,
    IndustroplanCot,
}

impl AdapterId {
    pub const ALL: [AdapterId; 7] = [
        AdapterId::LvisBox,
        AdapterId::PixmoPoint,
        AdapterId::Robopoint,
        AdapterId::EgoplanClip,
        AdapterId::RobovqaQa,
        AdapterId::SharerobotQa,
        AdapterId::IndustroplanCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterId::LvisBox => "lvis_box",
            AdapterId::PixmoPoint => "pixmo_point",
            AdapterId::Robopoint => "robopoint",
            AdapterId::EgoplanClip => "egoplan_clip",
            AdapterId::RobovqaQa => "robovqa_qa",
            AdapterId::SharerobotQa => "sharerobot_qa",
            AdapterId::IndustroplanCot => "industroplan_cot",
        }
    }

    /// Value written into `Sample::source_dataset`.
    pub fn source_dataset(self) -> &'static str {
        match self {
            AdapterId::LvisBox => "lvis-520k",
            AdapterId::PixmoPoint => "pixmopoint-570k",
            AdapterId::Robopoint => "robopoint-667k",
            AdapterId::EgoplanClip => "egoplan-it-100k",
            AdapterId::RobovqaQa => "robovqa-800k",
            AdapterId::SharerobotQa => "sharerobot-1m",
            AdapterId::IndustroplanCot => "industroplan-200k",
        }
    }

    pub fn task(self) -> TaskType {
        match self {
            AdapterId::LvisBox => TaskType::VisualGroundingBox,
            AdapterId::PixmoPoint | AdapterId::Robopoint => TaskType::VisualGroundingPoint,
            AdapterId::EgoplanClip => TaskType::EgoViewOpen,
            AdapterId::RobovqaQa | AdapterId::SharerobotQa => TaskType::PlanningQa,
            AdapterId::IndustroplanCot => TaskType::IndustrialCot,
        }
    }
}

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AdapterId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown adapter `{s}`"))
    }
}

/// Whether unknown source fields are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("SCHEMA_VIOLATION at `{path}`: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("MALFORMED_TEXT: {0}")]
    MalformedText(String),
    #[error("TASK_MISMATCH: {0} is not a grounding task")]
    TaskMismatch(TaskType),
    #[error("POOL_TOO_SMALL: {eligible} eligible distractors, need 3")]
    PoolTooSmall { eligible: usize },
    #[error("EMPTY_ACTION: labeled action is empty")]
    EmptyAction,
}

impl IngestError {
    pub(crate) fn schema(path: impl Into<String>, reason: impl Into<String>) -> Self {
        IngestError::SchemaViolation {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DropReason {
    PointCount,
    Outdoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVerdict {
    Keep { unknown_scene: bool },
    Drop(DropReason),
}

/// Point-cap and scene filter for grounding samples.
///
/// Point sets with more than [`MAX_POINTS`] points drop first, then outdoor
/// scenes. An absent or `unknown` scene is kept and flagged. Box counts are
/// never filtered.
pub fn filter_grounding(s: &Sample) -> Result<FilterVerdict, IngestError> {
    if !s.task.is_grounding() {
        return Err(IngestError::TaskMismatch(s.task));
    }
    if let SupervisionTarget::PointSet { points } = &s.target {
        if points.len() > MAX_POINTS {
            return Ok(FilterVerdict::Drop(DropReason::PointCount));
        }
    }
    match s.scene_tag {
        Some(SceneTag::Outdoor) => Ok(FilterVerdict::Drop(DropReason::Outdoor)),
        Some(SceneTag::Indoor) => Ok(FilterVerdict::Keep { unknown_scene: false }),
        Some(SceneTag::Unknown) | None => Ok(FilterVerdict::Keep { unknown_scene: true }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::VisualInput;

    fn grounding(points: usize, scene: Option<SceneTag>) -> Sample {
        Sample {
            id: "g".into(),
            task: TaskType::VisualGroundingPoint,
            visual: VisualInput::image("img"),
            instruction: "Point to the cup.".into(),
            target: SupervisionTarget::PointSet {
                points: vec![[0.2, 0.3]; points],
            },
            source_dataset: "pixmo".into(),
            scene_tag: scene,
        }
    }

    #[test]
    fn eleven_points_drop() {
        assert_eq!(
            filter_grounding(&grounding(11, Some(SceneTag::Indoor))).unwrap(),
            FilterVerdict::Drop(DropReason::PointCount)
        );
    }

    #[test]
    fn ten_points_indoor_keep() {
        assert_eq!(
            filter_grounding(&grounding(10, Some(SceneTag::Indoor))).unwrap(),
            FilterVerdict::Keep { unknown_scene: false }
        );
    }

    #[test]
    fn outdoor_drops() {
        assert_eq!(
            filter_grounding(&grounding(3, Some(SceneTag::Outdoor))).unwrap(),
            FilterVerdict::Drop(DropReason::Outdoor)
        );
    }

    #[test]
    fn unknown_scene_is_kept_and_flagged() {
        for tag in [None, Some(SceneTag::Unknown)] {
            assert_eq!(
                filter_grounding(&grounding(3, tag)).unwrap(),
                FilterVerdict::Keep { unknown_scene: true }
            );
        }
    }

    #[test]
    fn boxes_never_drop_for_count() {
        let mut s = grounding(1, Some(SceneTag::Indoor));
        s.task = TaskType::VisualGroundingBox;
        s.target = SupervisionTarget::BoxSet {
            boxes: vec![[0.1, 0.1, 0.2, 0.2]; 40],
        };
        assert!(matches!(filter_grounding(&s).unwrap(), FilterVerdict::Keep { .. }));
    }

    #[test]
    fn non_grounding_is_rejected() {
        let mut s = grounding(1, None);
        s.task = TaskType::PlanningQa;
        assert_eq!(
            filter_grounding(&s),
            Err(IngestError::TaskMismatch(TaskType::PlanningQa))
        );
    }

    #[test]
    fn adapter_ids_round_trip() {
        for a in AdapterId::ALL {
            assert_eq!(a.as_str().parse::<AdapterId>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{}\"", a.as_str()));
        }
    }
}
