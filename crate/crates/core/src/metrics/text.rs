//! Text metrics: tokenization, BLEU, ROUGE-L and CIDEr.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MetricError;

/// Highest n-gram order used by BLEU and CIDEr.
pub const MAX_ORDER: usize = 4;
/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;
/// Multiplier applied to the mean cosine similarity in CIDEr.
pub const CIDER_SCALE: f64 = 10.0;

/// Lowercase, split off ASCII punctuation (except `_`) as separate tokens,
/// split on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in s.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else if ch.is_ascii_punctuation() && ch != '_' {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            out.push(ch.to_string());
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Tokens with punctuation removed, for loose text comparisons.
pub fn words(s: &str) -> Vec<String> {
    tokenize(s)
        .into_iter()
        .filter(|t| !(t.len() == 1 && t.chars().all(|c| c.is_ascii_punctuation())))
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sufficient statistics for corpus BLEU from one hypothesis/reference pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped n-gram matches for orders 1..=4.
    pub matches: [u64; MAX_ORDER],
    /// Hypothesis n-gram totals for orders 1..=4.
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn from_tokens(hyp: &[String], reference: &[String]) -> Self {
        let mut stats = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            stats.totals[n - 1] = h.values().sum();
            stats.matches[n - 1] = h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    pub fn merge(mut self, other: &BleuStats) -> Self {
        for k in 0..MAX_ORDER {
            self.matches[k] += other.matches[k];
            self.totals[k] += other.totals[k];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
        self
    }

    /// BLEU-`n` with uniform weights and the brevity penalty.
    ///
    /// Zero when any order up to `n` has no matches or no hypothesis n-grams.
    pub fn bleu(&self, n: usize) -> f64 {
        assert!((1..=MAX_ORDER).contains(&n), "BLEU order {n} out of range");
        let mut log_sum = 0.0;
        for k in 0..n {
            if self.matches[k] == 0 || self.totals[k] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[k] as f64 / self.totals[k] as f64).ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        bp * (log_sum / n as f64).exp()
    }
}

/// Corpus-level BLEU-`n` over paired hypotheses and references.
pub fn bleu_n(hyps: &[&str], refs: &[&str], n: usize) -> Result<f64, MetricError> {
    check_corpus(hyps, refs)?;
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(MetricError::Invalid(format!("BLEU order {n} not in 1..=4")));
    }
    let stats = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| BleuStats::from_tokens(&tokenize(h), &tokenize(r)))
        .fold(BleuStats::default(), |acc, s| acc.merge(&s));
    Ok(stats.bleu(n))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weight [`ROUGE_BETA`].
pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(hyp), &tokenize(reference))
}

pub fn rouge_l_tokens(hyp: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Per-pair CIDEr scores.
///
/// Document frequencies come from the references. The weight of an n-gram
/// is its count times `ln(N) - ln(max(1, df))`; each pair scores
/// `10 × mean over n of cos(hyp_n, ref_n)`, a zero vector giving cosine 0.
pub fn cider_scores(hyps: &[&str], refs: &[&str]) -> Result<Vec<f64>, MetricError> {
    check_corpus(hyps, refs)?;
    Ok(cider_scores_scaled(hyps, refs, 1.0))
}

/// Corpus CIDEr: mean of [`cider_scores`].
pub fn cider(hyps: &[&str], refs: &[&str]) -> Result<f64, MetricError> {
    let scores = cider_scores(hyps, refs)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub(crate) fn cider_scores_scaled(hyps: &[&str], refs: &[&str], idf_scale: f64) -> Vec<f64> {
    let hyp_tokens: Vec<Vec<String>> = hyps.iter().map(|h| tokenize(h)).collect();
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
    let log_n = (refs.len() as f64).ln();

    let mut scores = vec![0.0; hyps.len()];
    for n in 1..=MAX_ORDER {
        let ref_counts: Vec<_> = ref_tokens.iter().map(|t| ngram_counts(t, n)).collect();
        let mut df: HashMap<&[String], u64> = HashMap::new();
        for counts in &ref_counts {
            for g in counts.keys() {
                *df.entry(*g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| idf_scale * (log_n - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln());
        for (i, h) in hyp_tokens.iter().enumerate() {
            let hv: HashMap<&[String], f64> = ngram_counts(h, n)
                .into_iter()
                .map(|(g, c)| (g, c as f64 * idf(g)))
                .collect();
            let rv: HashMap<&[String], f64> = ref_counts[i]
                .iter()
                .map(|(g, &c)| (*g, c as f64 * idf(g)))
                .collect();
            scores[i] += cosine(&hv, &rv);
        }
    }
    scores
        .into_iter()
        .map(|s| CIDER_SCALE * s / MAX_ORDER as f64)
        .collect()
}

fn cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let norm = |v: &HashMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

fn check_corpus(hyps: &[&str], refs: &[&str]) -> Result<(), MetricError> {
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(MetricError::Invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}
