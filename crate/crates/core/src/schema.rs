//! The unified, task-aware sample record and its validation rules.
//!
//! Every source dataset is normalized into [`Sample`]. A sample is a plain
//! value: construct it, run [`validate_sample`], and pass it around freely.
//! The canonical encoding is one JSON object per line with the field names
//! below; unknown fields are rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum number of points a point-grounding target may carry.
pub const MAX_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    VisualGroundingBox,
    VisualGroundingPoint,
    EgoViewMcq,
    EgoViewOpen,
    PlanningQa,
    IndustrialCot,
}

impl TaskType {
    /// Canonical order. Anything that iterates tasks deterministically uses it.
    pub const ALL: [TaskType; 6] = [
        TaskType::VisualGroundingBox,
        TaskType::VisualGroundingPoint,
        TaskType::EgoViewMcq,
        TaskType::EgoViewOpen,
        TaskType::PlanningQa,
        TaskType::IndustrialCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::VisualGroundingBox => "visual-grounding-box",
            TaskType::VisualGroundingPoint => "visual-grounding-point",
            TaskType::EgoViewMcq => "ego-view-mcq",
            TaskType::EgoViewOpen => "ego-view-open",
            TaskType::PlanningQa => "planning-qa",
            TaskType::IndustrialCot => "industrial-cot",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_grounding(self) -> bool {
        matches!(self, TaskType::VisualGroundingBox | TaskType::VisualGroundingPoint)
    }

    pub fn requires_video(self) -> bool {
        matches!(self, TaskType::EgoViewMcq | TaskType::EgoViewOpen)
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown task type `{0}`")]
pub struct UnknownTaskType(pub String);

impl FromStr for TaskType {
    type Err = UnknownTaskType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownTaskType(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualKind {
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualInput {
    pub kind: VisualKind,
    pub uri: String,
    pub frame_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_frame_index: Option<u32>,
}

impl VisualInput {
    pub fn image(uri: impl Into<String>) -> Self {
        Self {
            kind: VisualKind::Image,
            uri: uri.into(),
            frame_count: 0,
            key_frame_index: None,
        }
    }

    /// A video with its last frame already attached as the key frame.
    pub fn video(uri: impl Into<String>, frame_count: u32) -> Result<Self, SchemaError> {
        attach_key_frame(Self {
            kind: VisualKind::Video,
            uri: uri.into(),
            frame_count,
            key_frame_index: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SupervisionTarget {
    FreeText {
        answers: Vec<String>,
    },
    OptionLetter {
        letter: char,
        options: Vec<String>,
    },
    /// `[x0, y0, x1, y1]`, normalized to `[0, 1]`.
    BoxSet {
        boxes: Vec<[f64; 4]>,
    },
    /// `[x, y]`, normalized to `[0, 1]`.
    PointSet {
        points: Vec<[f64; 2]>,
    },
}

impl SupervisionTarget {
    pub fn variant_name(&self) -> &'static str {
        match self {
            SupervisionTarget::FreeText { .. } => "free_text",
            SupervisionTarget::OptionLetter { .. } => "option_letter",
            SupervisionTarget::BoxSet { .. } => "box_set",
            SupervisionTarget::PointSet { .. } => "point_set",
        }
    }

    fn compatible_with(&self, task: TaskType) -> bool {
        match task {
            TaskType::VisualGroundingBox => matches!(self, SupervisionTarget::BoxSet { .. }),
            TaskType::VisualGroundingPoint => matches!(self, SupervisionTarget::PointSet { .. }),
            TaskType::EgoViewMcq => matches!(self, SupervisionTarget::OptionLetter { .. }),
            TaskType::EgoViewOpen | TaskType::PlanningQa | TaskType::IndustrialCot => {
                matches!(self, SupervisionTarget::FreeText { .. })
            }
        }
    }
}

/// Letter for a zero-based option index (`0 -> 'A'`).
pub fn option_letter(index: usize) -> Option<char> {
    (index < 26).then(|| (b'A' + index as u8) as char)
}

/// Zero-based option index for a letter (`'A' -> 0`).
pub fn letter_index(letter: char) -> Option<usize> {
    letter.is_ascii_uppercase().then(|| (letter as u8 - b'A') as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneTag {
    Indoor,
    Outdoor,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub task: TaskType,
    pub visual: VisualInput,
    pub instruction: String,
    pub target: SupervisionTarget,
    pub source_dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_tag: Option<SceneTag>,
}

impl Sample {
    /// Canonical single-line JSON encoding, without the trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serialization is infallible")
    }

    /// Strict parse of the canonical encoding.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    EmptyId,
    EmptyInstruction,
    /// Video without a key frame reference.
    KeyframeMissing,
    /// Key frame present but not the last frame.
    KeyframeMismatch,
    KeyframeOnImage,
    VideoWithoutFrames,
    ImageFrameCount,
    TaskTargetMismatch,
    TaskVisualMismatch,
    EmptyAnswerSet,
    LetterInvalid,
    LetterOutOfRange,
    BoxCount,
    BoxOrder,
    CoordRange,
    PointCount,
}

impl Violation {
    pub fn code(self) -> &'static str {
        match self {
            Violation::EmptyId => "EMPTY_ID",
            Violation::EmptyInstruction => "EMPTY_INSTRUCTION",
            Violation::KeyframeMissing => "KEYFRAME_MISSING",
            Violation::KeyframeMismatch => "KEYFRAME_MISMATCH",
            Violation::KeyframeOnImage => "KEYFRAME_ON_IMAGE",
            Violation::VideoWithoutFrames => "VIDEO_WITHOUT_FRAMES",
            Violation::ImageFrameCount => "IMAGE_FRAME_COUNT",
            Violation::TaskTargetMismatch => "TASK_TARGET_MISMATCH",
            Violation::TaskVisualMismatch => "TASK_VISUAL_MISMATCH",
            Violation::EmptyAnswerSet => "EMPTY_ANSWER_SET",
            Violation::LetterInvalid => "LETTER_INVALID",
            Violation::LetterOutOfRange => "LETTER_OUT_OF_RANGE",
            Violation::BoxCount => "BOX_COUNT",
            Violation::BoxOrder => "BOX_ORDER",
            Violation::CoordRange => "COORD_RANGE",
            Violation::PointCount => "POINT_COUNT",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Result of [`validate_sample`]. Violations are sorted and deduplicated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Verdict {
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, v: Violation) -> bool {
        self.violations.contains(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("KIND_MISMATCH: key frames only apply to video inputs")]
    KindMismatch,
    #[error("VIDEO_WITHOUT_FRAMES: video has frame_count = 0")]
    EmptyVideo,
}

/// Sets the key frame to the last frame of a video. Idempotent.
pub fn attach_key_frame(mut v: VisualInput) -> Result<VisualInput, SchemaError> {
    if v.kind != VisualKind::Video {
        return Err(SchemaError::KindMismatch);
    }
    if v.frame_count == 0 {
        return Err(SchemaError::EmptyVideo);
    }
    v.key_frame_index = Some(v.frame_count - 1);
    Ok(v)
}

fn unit(x: f64) -> bool {
    x.is_finite() && (0.0..=1.0).contains(&x)
}

pub fn validate_visual(v: &VisualInput, out: &mut Vec<Violation>) {
    match v.kind {
        VisualKind::Image => {
            if v.key_frame_index.is_some() {
                out.push(Violation::KeyframeOnImage);
            }
            if v.frame_count != 0 {
                out.push(Violation::ImageFrameCount);
            }
        }
        VisualKind::Video => {
            if v.frame_count == 0 {
                out.push(Violation::VideoWithoutFrames);
            }
            match v.key_frame_index {
                None => out.push(Violation::KeyframeMissing),
                Some(k) if v.frame_count == 0 || k != v.frame_count - 1 => out.push(Violation::KeyframeMismatch),
                Some(_) => {}
            }
        }
    }
}

pub fn validate_target(t: &SupervisionTarget, out: &mut Vec<Violation>) {
    match t {
        SupervisionTarget::FreeText { answers } => {
            if answers.is_empty() {
                out.push(Violation::EmptyAnswerSet);
            }
        }
        SupervisionTarget::OptionLetter { letter, options } => match letter_index(*letter) {
            None => out.push(Violation::LetterInvalid),
            Some(i) if i >= options.len() => out.push(Violation::LetterOutOfRange),
            Some(_) => {}
        },
        SupervisionTarget::BoxSet { boxes } => {
            if boxes.is_empty() {
                out.push(Violation::BoxCount);
            }
            for b in boxes {
                if !b.iter().all(|&c| unit(c)) {
                    out.push(Violation::CoordRange);
                }
                if !(b[0] < b[2] && b[1] < b[3]) {
                    out.push(Violation::BoxOrder);
                }
            }
        }
        SupervisionTarget::PointSet { points } => {
            if points.is_empty() || points.len() > MAX_POINTS {
                out.push(Violation::PointCount);
            }
            if !points.iter().flatten().all(|&c| unit(c)) {
                out.push(Violation::CoordRange);
            }
        }
    }
}

/// Checks every invariant of the unified record. Violations are data, not errors.
pub fn validate_sample(s: &Sample) -> Verdict {
    let mut violations = Vec::new();
    if s.id.trim().is_empty() {
        violations.push(Violation::EmptyId);
    }
    if s.instruction.trim().is_empty() {
        violations.push(Violation::EmptyInstruction);
    }
    validate_visual(&s.visual, &mut violations);
    validate_target(&s.target, &mut violations);
    if !s.target.compatible_with(s.task) {
        violations.push(Violation::TaskTargetMismatch);
    }
    if s.task.requires_video() && s.visual.kind != VisualKind::Video {
        violations.push(Violation::TaskVisualMismatch);
    }
    violations.sort();
    violations.dedup();
    Verdict { violations }
}
