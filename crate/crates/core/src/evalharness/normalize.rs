use serde::{Deserialize, Serialize};

use crate::schema::{letter_index, option_letter, TaskType};

/// Identifier of the multiple-choice cascade below; bump on any rule change.
pub const MCQ_CASCADE_VERSION: &str = "mcq-cascade-v1";

/// Which normalization rule produced an answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRule {
    Letter,
    ExactText,
    ContainedText,
    Unparseable,
    FreeText,
}

impl NormRule {
    pub fn is_fallback(self) -> bool {
        matches!(self, NormRule::ExactText | NormRule::ContainedText)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalized {
    /// Option letter for multiple choice, cleaned text for free-form, or
    /// `None` when unparseable.
    pub answer: Option<String>,
    pub rule: NormRule,
}

fn letter_answer(letter: char, rule: NormRule) -> Normalized {
    Normalized {
        answer: Some(letter.to_string()),
        rule,
    }
}

/// Lowercase, non-alphanumerics to spaces, single-spaced.
pub fn normalize_text(s: &str) -> String {
    let mapped: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn standalone_letter(raw: &str, option_count: usize) -> Option<char> {
    let chars: Vec<char> = raw.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let upper = c.to_ascii_uppercase();
        let Some(idx) = letter_index(upper) else {
            continue;
        };
        if idx >= option_count {
            continue;
        }
        let before = i == 0 || !chars[i - 1].is_alphanumeric();
        let after = i + 1 == chars.len() || !chars[i + 1].is_alphanumeric();
        if before && after {
            return Some(upper);
        }
    }
    None
}

/// Maps raw model text to the answer form the task's protocol scores.
///
/// Multiple choice applies, in order: the first standalone letter A–D;
/// exact match of the normalized text against a normalized option; the
/// unique option whose normalized text occurs in the normalized raw text on
/// word boundaries; otherwise unparseable. Other tasks only collapse
/// whitespace.
pub fn normalize_output(raw: &str, task: TaskType, options: Option<&[String]>) -> Normalized {
    if task != TaskType::EgoViewMcq {
        return Normalized {
            answer: Some(collapse_whitespace(raw)),
            rule: NormRule::FreeText,
        };
    }
    let options = options.unwrap_or(&[]);
    let limit = options.len().min(4);
    if let Some(l) = standalone_letter(raw, limit) {
        return letter_answer(l, NormRule::Letter);
    }
    let text = normalize_text(raw);
    let normed: Vec<String> = options.iter().take(limit).map(|o| normalize_text(o)).collect();
    if let Some(i) = normed.iter().position(|o| !o.is_empty() && *o == text) {
        return letter_answer(option_letter(i).expect("index below 4"), NormRule::ExactText);
    }
    let padded = format!(" {text} ");
    let contained: Vec<usize> = normed
        .iter()
        .enumerate()
        .filter(|(_, o)| !o.is_empty() && padded.contains(&format!(" {o} ")))
        .map(|(i, _)| i)
        .collect();
    if let [i] = contained[..] {
        return letter_answer(option_letter(i).expect("index below 4"), NormRule::ContainedText);
    }
    Normalized {
        answer: None,
        rule: NormRule::Unparseable,
    }
}
