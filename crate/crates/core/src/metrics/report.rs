//! File-level scoring and the metric report.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::judge::JudgeClient;
use super::text::{self, BleuStats};
use super::{
    accuracy, final_score, match_score, FinalComponents, FinalWeights, LanguageMix, MetricError,
    DEFAULT_MATCH_THRESHOLD,
};

/// Marker that identifies multiple-choice questions.
pub const MCQ_MARKER: &str = "Please select the correct answer";

/// A ground-truth line. Reads both `{"id","question","answer"}` and the
/// converter's `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(alias = "sample_id")]
    pub id: String,
    #[serde(default, alias = "user_text")]
    pub question: String,
    #[serde(alias = "assistant_text")]
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(alias = "sample_id")]
    pub id: String,
    #[serde(alias = "predicted_answer", alias = "assistant_text")]
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub match_threshold: f64,
    pub mcq_marker: String,
    pub weights: FinalWeights,
    pub language_mix: LanguageMix,
    /// Concurrent judge requests.
    pub judge_in_flight: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            mcq_marker: MCQ_MARKER.to_string(),
            weights: FinalWeights::default(),
            language_mix: LanguageMix::default(),
            judge_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    MultipleChoice,
    Open,
}

/// Scores of one question. Fields are absent when the question was not
/// routed to that metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowScore {
    pub id: String,
    pub question_type: QuestionType,
    pub accuracy: Option<u8>,
    #[serde(rename = "match")]
    pub match_: Option<f64>,
    pub bleu: Option<BleuStats>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub judge: Option<f64>,
    pub judge_missing: bool,
    pub prediction_missing: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub accuracy: Option<f64>,
    pub chatgpt: Option<f64>,
    pub bleu_1: Option<f64>,
    pub bleu_2: Option<f64>,
    pub bleu_3: Option<f64>,
    pub bleu_4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    #[serde(rename = "match")]
    pub match_: Option<f64>,
    pub language: Option<f64>,
    #[serde(rename = "final")]
    pub final_score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub questions: usize,
    pub accuracy_rows: usize,
    /// Multiple-choice questions whose answer is not in option form.
    pub accuracy_excluded: usize,
    pub match_rows: usize,
    pub language_rows: usize,
    pub judge_rows: usize,
    pub judge_missing: usize,
    pub missing_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregates: Aggregates,
    pub counts: Counts,
    pub weights: FinalWeights,
    /// Weights after dropping components without questions.
    pub weights_used: FinalWeights,
    pub language_mix: LanguageMix,
    pub match_threshold: f64,
    pub rows: Vec<RowScore>,
}

/// Fold per-question rows into aggregates.
pub fn aggregate(
    rows: &[RowScore],
    weights: &FinalWeights,
    mix: &LanguageMix,
) -> Result<(Aggregates, Counts, FinalWeights), MetricError> {
    fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
        let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    let mut counts = Counts {
        questions: rows.len(),
        ..Default::default()
    };
    for r in rows {
        counts.accuracy_rows += usize::from(r.accuracy.is_some());
        counts.accuracy_excluded +=
            usize::from(r.question_type == QuestionType::MultipleChoice && r.accuracy.is_none());
        counts.match_rows += usize::from(r.match_.is_some());
        counts.language_rows += usize::from(r.bleu.is_some());
        counts.judge_rows += usize::from(r.judge.is_some());
        counts.judge_missing += usize::from(r.judge_missing);
        counts.missing_predictions += usize::from(r.prediction_missing);
    }

    let bleu_stats = rows
        .iter()
        .filter_map(|r| r.bleu.as_ref())
        .fold(None::<BleuStats>, |acc, s| Some(acc.unwrap_or_default().merge(s)));
    let bleu = |n| bleu_stats.map(|s| s.bleu(n));

    let mut agg = Aggregates {
        accuracy: mean(rows.iter().filter_map(|r| r.accuracy).map(f64::from)),
        chatgpt: mean(rows.iter().filter_map(|r| r.judge)),
        bleu_1: bleu(1),
        bleu_2: bleu(2),
        bleu_3: bleu(3),
        bleu_4: bleu(4),
        rouge_l: mean(rows.iter().filter_map(|r| r.rouge_l)),
        cider: mean(rows.iter().filter_map(|r| r.cider)),
        match_: mean(rows.iter().filter_map(|r| r.match_)),
        language: None,
        final_score: 0.0,
    };
    if let (Some(b), Some(r), Some(c)) = (agg.bleu_4, agg.rouge_l, agg.cider) {
        agg.language = Some(mix.combine(b, r, c));
    }
    let components = FinalComponents {
        accuracy: agg.accuracy,
        chatgpt: agg.chatgpt.map(|v| v / 100.0),
        match_: agg.match_.map(|v| v / 100.0),
        language: agg.language,
    };
    let (final_value, used) = final_score(&components, weights)?;
    agg.final_score = final_value;
    Ok((agg, counts, used))
}

impl MetricReport {
    /// Aggregates recomputed from the stored rows.
    pub fn recompute(&self) -> Result<Aggregates, MetricError> {
        Ok(aggregate(&self.rows, &self.weights, &self.language_mix)?.0)
    }

    /// Human-readable summary.
    pub fn to_table(&self) -> String {
        let a = &self.aggregates;
        let fmt = |v: Option<f64>, digits: usize| match v {
            Some(x) => format!("{x:.digits$}"),
            None => "-".to_string(),
        };
        let lines = [
            ("Accuracy", fmt(a.accuracy, 4), self.counts.accuracy_rows),
            ("ChatGPT", fmt(a.chatgpt, 4), self.counts.judge_rows),
            ("Bleu_1", fmt(a.bleu_1, 4), self.counts.language_rows),
            ("Bleu_2", fmt(a.bleu_2, 4), self.counts.language_rows),
            ("Bleu_3", fmt(a.bleu_3, 4), self.counts.language_rows),
            ("Bleu_4", fmt(a.bleu_4, 4), self.counts.language_rows),
            ("ROUGE_L", fmt(a.rouge_l, 4), self.counts.language_rows),
            ("CIDEr", fmt(a.cider, 4), self.counts.language_rows),
            ("Match", fmt(a.match_, 4), self.counts.match_rows),
            ("Final Score", format!("{:.4}", a.final_score), self.counts.questions),
        ];
        let mut out = format!("{:<12} {:>10} {:>8}\n", "metric", "value", "n");
        for (name, value, n) in lines {
            let _ = writeln!(out, "{name:<12} {value:>10} {n:>8}");
        }
        if self.counts.judge_missing > 0 {
            let _ = writeln!(out, "judge missing for {} question(s)", self.counts.judge_missing);
        }
        if self.counts.missing_predictions > 0 {
            let _ = writeln!(out, "no prediction for {} question(s)", self.counts.missing_predictions);
        }
        out
    }
}

/// Score `preds` against `gts`. Questions without a prediction are scored
/// against an empty answer.
pub fn score(
    gts: &[GroundTruth],
    preds: &[Prediction],
    judge: Option<&dyn JudgeClient>,
    config: &ScoreConfig,
) -> Result<MetricReport, MetricError> {
    config.weights.validate()?;
    let by_id: HashMap<&str, &str> = preds.iter().map(|p| (p.id.as_str(), p.answer.as_str())).collect();

    let mut rows: Vec<RowScore> = Vec::with_capacity(gts.len());
    let mut open_idx = Vec::new();
    for gt in gts {
        let pred = by_id.get(gt.id.as_str()).copied();
        let answer = pred.unwrap_or("");
        let mcq = gt.question.contains(&config.mcq_marker);
        let acc = if mcq { accuracy(answer, &gt.answer) } else { None };
        let mut row = RowScore {
            id: gt.id.clone(),
            question_type: if mcq { QuestionType::MultipleChoice } else { QuestionType::Open },
            accuracy: acc,
            match_: match_score(answer, &gt.answer, config.match_threshold),
            bleu: None,
            rouge_l: None,
            cider: None,
            judge: None,
            judge_missing: false,
            prediction_missing: pred.is_none(),
        };
        if acc.is_none() {
            let (h, r) = (text::tokenize(answer), text::tokenize(&gt.answer));
            row.bleu = Some(BleuStats::from_tokens(&h, &r));
            row.rouge_l = Some(text::rouge_l_tokens(&h, &r));
            open_idx.push(rows.len());
        }
        rows.push(row);
    }

    if !open_idx.is_empty() {
        let hyps: Vec<&str> = open_idx
            .iter()
            .map(|&i| by_id.get(gts[i].id.as_str()).copied().unwrap_or(""))
            .collect();
        let refs: Vec<&str> = open_idx.iter().map(|&i| gts[i].answer.as_str()).collect();
        for (&i, c) in open_idx.iter().zip(text::cider_scores(&hyps, &refs)?) {
            rows[i].cider = Some(c);
        }
        if let Some(judge) = judge {
            let results = run_judge(judge, &open_idx, gts, &hyps, config.judge_in_flight.max(1));
            for (&i, r) in open_idx.iter().zip(results) {
                match r {
                    Some(s) => rows[i].judge = Some(s),
                    None => rows[i].judge_missing = true,
                }
            }
        }
    }

    let (aggregates, counts, weights_used) = aggregate(&rows, &config.weights, &config.language_mix)?;
    Ok(MetricReport {
        aggregates,
        counts,
        weights: config.weights,
        weights_used,
        language_mix: config.language_mix,
        match_threshold: config.match_threshold,
        rows,
    })
}

fn run_judge(
    judge: &dyn JudgeClient,
    open_idx: &[usize],
    gts: &[GroundTruth],
    hyps: &[&str],
    in_flight: usize,
) -> Vec<Option<f64>> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(vec![None; open_idx.len()]);
    std::thread::scope(|s| {
        for _ in 0..in_flight.min(open_idx.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= open_idx.len() {
                    break;
                }
                let gt = &gts[open_idx[k]];
                let r = match judge.score(&gt.question, &gt.answer, hyps[k]) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        log::warn!("judge: {}: {e}", gt.id);
                        None
                    }
                };
                results.lock().expect("judge results lock")[k] = r;
            });
        }
    });
    results.into_inner().expect("judge results lock")
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, id_of: impl Fn(&T) -> &str) -> Result<Vec<T>, MetricError> {
    let io_err = |source| MetricError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |message: String| MetricError::Line {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let item: T = serde_json::from_str(&line).map_err(|e| line_err(e.to_string()))?;
        if !seen.insert(id_of(&item).to_string()) {
            return Err(line_err(format!("duplicate id {:?}", id_of(&item))));
        }
        out.push(item);
    }
    Ok(out)
}

/// Read `{"id","answer"}` lines; ids must be unique.
pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, MetricError> {
    read_jsonl(path, |p: &Prediction| &p.id)
}

/// Read ground truth lines; ids must be unique.
pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>, MetricError> {
    read_jsonl(path, |g: &GroundTruth| &g.id)
}
