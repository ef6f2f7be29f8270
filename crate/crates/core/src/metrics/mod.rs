//! Scoring of predicted answers against ground truth.
//!
//! Questions are routed by type: multiple-choice questions are scored by
//! accuracy, answers that reference key objects by the match score, and
//! every other answer by the language metrics and the judge. The final
//! score is a weighted sum of the four component scores.

pub mod judge;
pub mod report;
pub mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctag::parse_tags;

pub use judge::{HttpJudge, JudgeClient, JudgeError, StubJudge};
pub use report::{score, GroundTruth, MetricReport, Prediction, ScoreConfig};
pub use text::{bleu_n, cider, cider_scores, rouge_l, tokenize, BleuStats};

/// Maximum center distance, in normalized units, for two objects to match.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 16.0;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0}")]
    Invalid(String),
    #[error("weights must sum to 1, got {0}")]
    WeightSum(f64),
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Split a multiple-choice answer `"A. Going ahead."` into letter and text.
pub fn parse_choice(answer: &str) -> Option<(char, &str)> {
    let s = answer.trim_start();
    let mut chars = s.chars();
    let letter = chars.next()?;
    if !('A'..='D').contains(&letter) || chars.next() != Some('.') {
        return None;
    }
    Some((letter, s[2..].trim()))
}

/// First standalone `A`–`D` token in a prediction.
pub fn extract_choice(pred: &str) -> Option<char> {
    pred.split(|c: char| !c.is_alphanumeric())
        .find_map(|tok| match tok {
            "A" | "B" | "C" | "D" => tok.chars().next(),
            _ => None,
        })
}

/// 1 when the prediction picks the ground-truth option, 0 otherwise.
///
/// `None` when the ground truth is not in `"<LETTER>. <text>"` form. A
/// prediction without an option letter is compared by its words against
/// the option text.
pub fn accuracy(pred: &str, gt: &str) -> Option<u8> {
    let (letter, text) = parse_choice(gt)?;
    let hit = match extract_choice(pred) {
        Some(p) => p == letter,
        None => {
            let w = text::words(pred);
            !w.is_empty() && w == text::words(text)
        }
    };
    Some(u8::from(hit))
}

/// Number of objects matched by nearest-first greedy assignment.
///
/// All pairs within `threshold` are taken in order of increasing distance
/// (ties by ground-truth then prediction index); a pair is accepted when
/// neither side is already matched.
pub fn greedy_match_count(gt: &[(f64, f64)], pred: &[(f64, f64)], threshold: f64) -> usize {
    let mut pairs: Vec<(f64, usize, usize)> = gt
        .iter()
        .enumerate()
        .flat_map(|(i, g)| {
            pred.iter()
                .enumerate()
                .map(move |(j, p)| ((g.0 - p.0).hypot(g.1 - p.1), i, j))
        })
        .filter(|(d, _, _)| *d <= threshold)
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut matched = 0;
    for (_, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            matched += 1;
        }
    }
    matched
}

/// Tag centers in a text, or `None` if the text does not parse.
pub fn tag_centers(text: &str) -> Option<Vec<(f64, f64)>> {
    parse_tags(text)
        .ok()
        .map(|t| t.tags().iter().map(|tag| tag.geometry.center()).collect())
}

/// Percentage of ground-truth objects matched by predicted objects.
///
/// `None` when the ground truth carries no parseable tags. Boxes are
/// compared by their centers; unparseable predictions match nothing.
pub fn match_score(pred: &str, gt: &str, threshold: f64) -> Option<f64> {
    let gt_pts = tag_centers(gt)?;
    if gt_pts.is_empty() {
        return None;
    }
    let pred_pts = tag_centers(pred).unwrap_or_default();
    let matched = greedy_match_count(&gt_pts, &pred_pts, threshold);
    Some(100.0 * matched as f64 / gt_pts.len() as f64)
}

/// Weights of the final score over its four components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalWeights {
    pub accuracy: f64,
    pub chatgpt: f64,
    #[serde(rename = "match")]
    pub match_: f64,
    pub language: f64,
}

impl Default for FinalWeights {
    fn default() -> Self {
        Self {
            accuracy: 0.25,
            chatgpt: 0.25,
            match_: 0.25,
            language: 0.25,
        }
    }
}

impl FinalWeights {
    pub fn new(accuracy: f64, chatgpt: f64, match_: f64, language: f64) -> Result<Self, MetricError> {
        let w = Self {
            accuracy,
            chatgpt,
            match_,
            language,
        };
        w.validate()?;
        Ok(w)
    }

    /// Parse `"accuracy,chatgpt,match,language"`.
    pub fn parse_csv(s: &str) -> Result<Self, MetricError> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| MetricError::Invalid(format!("weights {s:?}: {e}")))?;
        match parts[..] {
            [a, c, m, l] => Self::new(a, c, m, l),
            _ => Err(MetricError::Invalid(format!(
                "expected 4 weights (accuracy,chatgpt,match,language), got {}",
                parts.len()
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let all = [self.accuracy, self.chatgpt, self.match_, self.language];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MetricError::Invalid(format!("weights must be non-negative: {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MetricError::WeightSum(sum));
        }
        Ok(())
    }
}

/// Mix of the language component over `(bleu_4, rouge_l, cider / 10)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanguageMix {
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl Default for LanguageMix {
    fn default() -> Self {
        Self {
            bleu_4: 1.0 / 3.0,
            rouge_l: 1.0 / 3.0,
            cider: 1.0 / 3.0,
        }
    }
}

impl LanguageMix {
    pub fn combine(&self, bleu_4: f64, rouge_l: f64, cider: f64) -> f64 {
        self.bleu_4 * bleu_4 + self.rouge_l * rouge_l + self.cider * cider / text::CIDER_SCALE
    }
}

/// Final-score components, each in `[0, 1]`; absent ones had no questions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalComponents {
    pub accuracy: Option<f64>,
    /// Judge score divided by 100.
    pub chatgpt: Option<f64>,
    /// Match score divided by 100.
    #[serde(rename = "match")]
    pub match_: Option<f64>,
    pub language: Option<f64>,
}

/// Weighted sum of the components.
///
/// Weights of absent components are dropped and the rest renormalized; the
/// weights actually applied are returned alongside the score.
pub fn final_score(c: &FinalComponents, weights: &FinalWeights) -> Result<(f64, FinalWeights), MetricError> {
    weights.validate()?;
    let pick = |v: Option<f64>, w: f64| if v.is_some() { w } else { 0.0 };
    let raw = FinalWeights {
        accuracy: pick(c.accuracy, weights.accuracy),
        chatgpt: pick(c.chatgpt, weights.chatgpt),
        match_: pick(c.match_, weights.match_),
        language: pick(c.language, weights.language),
    };
    let total = raw.accuracy + raw.chatgpt + raw.match_ + raw.language;
    if total == 0.0 {
        return Ok((0.0, raw));
    }
    let used = FinalWeights {
        accuracy: raw.accuracy / total,
        chatgpt: raw.chatgpt / total,
        match_: raw.match_ / total,
        language: raw.language / total,
    };
    let score = used.accuracy * c.accuracy.unwrap_or(0.0)
        + used.chatgpt * c.chatgpt.unwrap_or(0.0)
        + used.match_ * c.match_.unwrap_or(0.0)
        + used.language * c.language.unwrap_or(0.0);
    Ok((score, used))
}
