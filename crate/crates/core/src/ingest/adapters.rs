use serde_json::{Map, Value};

use super::mcq::{build_open, EgoClip};
use super::{AdapterId, IngestError, Strictness};
use crate::schema::{validate_sample, Sample, SceneTag, SupervisionTarget, Violation, VisualInput, MAX_POINTS};

type Object = Map<String, Value>;

fn parse_object(line: &[u8]) -> Result<Object, IngestError> {
    let text = std::str::from_utf8(line).map_err(|e| IngestError::MalformedText(format!("invalid UTF-8: {e}")))?;
    let text = text.trim_end_matches(['\n', '\r']);
    if text.trim().is_empty() {
        return Err(IngestError::MalformedText("empty line".into()));
    }
    let value: Value = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() {
            IngestError::MalformedText(format!("truncated record: {e}"))
        } else {
            IngestError::MalformedText(e.to_string())
        }
    })?;
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(IngestError::schema("$", "record is not a JSON object")),
    }
}

fn check_fields(obj: &Object, known: &[&str], strictness: Strictness) -> Result<(), IngestError> {
    if strictness == Strictness::Lenient {
        return Ok(());
    }
    match obj.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(IngestError::schema(k.as_str(), "unknown field")),
        None => Ok(()),
    }
}

fn req<'a>(obj: &'a Object, key: &str) -> Result<&'a Value, IngestError> {
    obj.get(key)
        .ok_or_else(|| IngestError::schema(key, "missing required field"))
}

fn req_str(obj: &Object, key: &str) -> Result<String, IngestError> {
    match req(obj, key)? {
        Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
        Value::String(_) => Err(IngestError::schema(key, "empty string")),
        _ => Err(IngestError::schema(key, "expected string")),
    }
}

fn req_u32(obj: &Object, key: &str) -> Result<u32, IngestError> {
    req(obj, key)?
        .as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| IngestError::schema(key, "expected nonnegative integer"))
}

fn req_f64(obj: &Object, key: &str) -> Result<f64, IngestError> {
    req(obj, key)?
        .as_f64()
        .ok_or_else(|| IngestError::schema(key, "expected number"))
}

fn str_list(obj: &Object, key: &str) -> Result<Vec<String>, IngestError> {
    let arr = req(obj, key)?
        .as_array()
        .ok_or_else(|| IngestError::schema(key, "expected array"))?;
    if arr.is_empty() {
        return Err(IngestError::schema(key, "empty array"));
    }
    arr.iter()
        .enumerate()
        .map(|(i, v)| match v.as_str() {
            Some(s) if !s.trim().is_empty() => Ok(s.to_string()),
            _ => Err(IngestError::schema(format!("{key}[{i}]"), "expected nonempty string")),
        })
        .collect()
}

fn coord_rows<const N: usize>(obj: &Object, key: &str) -> Result<Vec<[f64; N]>, IngestError> {
    let arr = req(obj, key)?
        .as_array()
        .ok_or_else(|| IngestError::schema(key, "expected array"))?;
    arr.iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row
                .as_array()
                .filter(|r| r.len() == N)
                .ok_or_else(|| IngestError::schema(format!("{key}[{i}]"), format!("expected {N} numbers")))?;
            let mut out = [0.0; N];
            for (j, c) in row.iter().enumerate() {
                out[j] = c
                    .as_f64()
                    .ok_or_else(|| IngestError::schema(format!("{key}[{i}][{j}]"), "expected number"))?;
            }
            Ok(out)
        })
        .collect()
}

fn scene_tag(obj: &Object) -> Result<SceneTag, IngestError> {
    match obj.get("scene_tag") {
        None | Some(Value::Null) => Ok(SceneTag::Unknown),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| IngestError::schema("scene_tag", "expected indoor|outdoor|unknown")),
    }
}

fn video(obj: &Object) -> Result<VisualInput, IngestError> {
    let uri = req_str(obj, "video")?;
    let frames = req_u32(obj, "frame_count")?;
    VisualInput::video(uri, frames).map_err(|e| IngestError::schema("frame_count", e.to_string()))
}

/// Parses one `egoplan_clip` record into an [`EgoClip`].
pub fn parse_ego_clip(line: &[u8], strictness: Strictness) -> Result<EgoClip, IngestError> {
    let obj = parse_object(line)?;
    check_fields(
        &obj,
        &[
            "clip_id",
            "video",
            "frame_count",
            "history_summary",
            "labeled_action",
            "sequence_id",
        ],
        strictness,
    )?;
    Ok(EgoClip {
        clip_id: req_str(&obj, "clip_id")?,
        video: video(&obj)?,
        history_summary: req_str(&obj, "history_summary")?,
        labeled_action: req_str(&obj, "labeled_action")?,
        sequence_id: req_str(&obj, "sequence_id")?,
    })
}

/// Converts one source record into a unified [`Sample`].
///
/// The result satisfies every schema invariant except, for point-grounding
/// sources, the point cap: over-cap records are returned so that
/// [`super::filter_grounding`] can drop and count them.
pub fn parse_record(line: &[u8], adapter: AdapterId, strictness: Strictness) -> Result<Sample, IngestError> {
    let sample = match adapter {
        AdapterId::EgoplanClip => build_open(&parse_ego_clip(line, strictness)?)?,
        _ => {
            let obj = parse_object(line)?;
            convert(&obj, adapter, strictness)?
        }
    };
    let verdict = validate_sample(&sample);
    let over_cap = matches!(&sample.target, SupervisionTarget::PointSet { points } if points.len() > MAX_POINTS);
    let remaining: Vec<&str> = verdict
        .violations
        .iter()
        .filter(|v| !(over_cap && **v == Violation::PointCount))
        .map(|v| v.code())
        .collect();
    if remaining.is_empty() {
        Ok(sample)
    } else {
        Err(IngestError::schema("$", remaining.join(",")))
    }
}

fn convert(obj: &Object, adapter: AdapterId, strictness: Strictness) -> Result<Sample, IngestError> {
    let source_dataset = adapter.source_dataset().to_string();
    let task = adapter.task();
    match adapter {
        AdapterId::LvisBox => {
            check_fields(obj, &["id", "image", "instruction", "boxes", "scene_tag"], strictness)?;
            let boxes = coord_rows::<4>(obj, "boxes")?;
            Ok(Sample {
                id: req_str(obj, "id")?,
                task,
                visual: VisualInput::image(req_str(obj, "image")?),
                instruction: req_str(obj, "instruction")?,
                target: SupervisionTarget::BoxSet { boxes },
                source_dataset,
                scene_tag: Some(scene_tag(obj)?),
            })
        }
        AdapterId::PixmoPoint => {
            check_fields(obj, &["id", "image", "instruction", "points", "scene_tag"], strictness)?;
            let points = coord_rows::<2>(obj, "points")?;
            Ok(Sample {
                id: req_str(obj, "id")?,
                task,
                visual: VisualInput::image(req_str(obj, "image")?),
                instruction: req_str(obj, "instruction")?,
                target: SupervisionTarget::PointSet { points },
                source_dataset,
                scene_tag: Some(scene_tag(obj)?),
            })
        }
        AdapterId::Robopoint => {
            check_fields(
                obj,
                &[
                    "id",
                    "image",
                    "width",
                    "height",
                    "instruction",
                    "points_px",
                    "scene_tag",
                ],
                strictness,
            )?;
            let width = req_f64(obj, "width")?;
            let height = req_f64(obj, "height")?;
            if !(width > 0.0 && height > 0.0) {
                return Err(IngestError::schema("width", "image size must be positive"));
            }
            let points = coord_rows::<2>(obj, "points_px")?
                .into_iter()
                .map(|[x, y]| [x / width, y / height])
                .collect();
            Ok(Sample {
                id: req_str(obj, "id")?,
                task,
                visual: VisualInput::image(req_str(obj, "image")?),
                instruction: req_str(obj, "instruction")?,
                target: SupervisionTarget::PointSet { points },
                source_dataset,
                scene_tag: Some(scene_tag(obj)?),
            })
        }
        AdapterId::RobovqaQa => {
            check_fields(
                obj,
                &["id", "video", "frame_count", "instruction", "answers"],
                strictness,
            )?;
            Ok(Sample {
                id: req_str(obj, "id")?,
                task,
                visual: video(obj)?,
                instruction: req_str(obj, "instruction")?,
                target: SupervisionTarget::FreeText {
                    answers: str_list(obj, "answers")?,
                },
                source_dataset,
                scene_tag: None,
            })
        }
        AdapterId::SharerobotQa => {
            check_fields(obj, &["id", "image", "instruction", "answer"], strictness)?;
            Ok(Sample {
                id: req_str(obj, "id")?,
                task,
                visual: VisualInput::image(req_str(obj, "image")?),
                instruction: req_str(obj, "instruction")?,
                target: SupervisionTarget::FreeText {
                    answers: vec![req_str(obj, "answer")?],
                },
                source_dataset,
                scene_tag: None,
            })
        }
        AdapterId::IndustroplanCot => {
            check_fields(
                obj,
                &["id", "video", "frame_count", "task_goal", "chain_of_thought", "answer"],
                strictness,
            )?;
            let steps = str_list(obj, "chain_of_thought")?;
            let answer = req_str(obj, "answer")?;
            Ok(Sample {
                id: req_str(obj, "id")?,
                task,
                visual: video(obj)?,
                instruction: req_str(obj, "task_goal")?,
                target: SupervisionTarget::FreeText {
                    answers: vec![format!("{} Final plan: {}", steps.join(" "), answer)],
                },
                source_dataset,
                scene_tag: None,
            })
        }
        AdapterId::EgoplanClip => unreachable!("handled by parse_ego_clip"),
    }
}
