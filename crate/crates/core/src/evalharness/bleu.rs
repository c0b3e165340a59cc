use std::collections::HashMap;

use super::EvalError;

pub const MAX_ORDER: usize = 4;

/// Lowercases, then emits each maximal alphanumeric run as one token and
/// every other non-whitespace character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceBleu {
    /// BLEU-1 through BLEU-4 in [0, 1].
    pub scores: [f64; MAX_ORDER],
    pub empty_hypothesis: bool,
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram totals for orders 1..=4.
fn clipped<T: AsRef<str>>(hyp: &[T], refs: &[Vec<T>]) -> [(usize, usize); MAX_ORDER] {
    let mut out = [(0, 0); MAX_ORDER];
    for (k, slot) in out.iter_mut().enumerate() {
        let n = k + 1;
        let hyp_counts = ngram_counts(hyp, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        *slot = (matched, hyp.len().saturating_sub(k));
    }
    out
}

fn closest_ref_len<T>(c: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .expect("nonempty references")
}

/// Clipped n-gram precisions without smoothing or brevity penalty.
pub fn clipped_precisions<T: AsRef<str>>(hyp: &[T], refs: &[Vec<T>]) -> [Option<f64>; MAX_ORDER] {
    clipped(hyp, refs).map(|(m, h)| (h > 0).then(|| m as f64 / h as f64))
}

/// Sentence BLEU-1..4 against a nonempty reference set.
pub fn sentence_bleu<T: AsRef<str>>(hyp: &[T], refs: &[Vec<T>]) -> Result<SentenceBleu, EvalError> {
    if refs.is_empty() {
        return Err(EvalError::EmptyReferences);
    }
    let c = hyp.len();
    if c == 0 {
        return Ok(SentenceBleu {
            scores: [0.0; MAX_ORDER],
            empty_hypothesis: true,
        });
    }
    let r = closest_ref_len(c, refs);
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };

    let counts = clipped(hyp, refs);
    let mut scores = [0.0; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut dead = counts[0].0 == 0;
    for (k, &(matched, total)) in counts.iter().enumerate() {
        if total == 0 {
            dead = true;
        }
        if !dead {
            let p = if matched > 0 {
                matched as f64 / total as f64
            } else {
                1.0 / (2.0 * total as f64)
            };
            log_sum += p.ln();
            scores[k] = bp * (log_sum / (k + 1) as f64).exp();
        }
    }
    Ok(SentenceBleu {
        scores,
        empty_hypothesis: false,
    })
}

/// BLEU-`max_n` for one pair.
pub fn bleu<T: AsRef<str>>(hyp: &[T], refs: &[Vec<T>], max_n: usize) -> Result<f64, EvalError> {
    if !(1..=MAX_ORDER).contains(&max_n) {
        return Err(EvalError::InvalidOrder(max_n));
    }
    Ok(sentence_bleu(hyp, refs)?.scores[max_n - 1])
}

/// Half away from zero at one decimal, after snapping off float noise so
/// that decimal inputs such as 63.475 round as written.
pub fn round1(x: f64) -> f64 {
    let scaled = ((x * 10.0) * 1e9).round() / 1e9;
    scaled.round() / 10.0
}

/// Mean sentence score ×100 at one decimal.
pub fn bleu_corpus<T: AsRef<str>>(pairs: &[(Vec<T>, Vec<Vec<T>>)], max_n: usize) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (hyp, refs) in pairs {
        sum += bleu(hyp, refs, max_n)?;
    }
    Ok(round1(100.0 * sum / pairs.len() as f64))
}

pub fn bleu_avg(b1: f64, b2: f64, b3: f64, b4: f64) -> f64 {
    round1((b1 + b2 + b3 + b4) / 4.0)
}
