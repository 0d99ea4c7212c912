//! Corpus-level response-diversity metrics (distinct-n for n = 1, 2, 3)
//! and a pluggable coherence-scorer interface.
//!
//! Distinct-n is corpus-pooled: all n-grams from every response are
//! thrown into one bag and the metric is unique/total over that bag, not
//! a per-response average. The n-grams are computed on exactly the token
//! stream the model emitted — no re-tokenization.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

// ── distinct-n ──────────────────────────────────────────────────────────

/// Unique n-grams across all responses divided by total n-gram count.
/// Responses shorter than n contribute nothing; an empty bag yields 0.
pub fn distinct_n(responses: &[Vec<String>], n: usize) -> Result<f64> {
    let (unique, total) = ngram_counts(responses, n)?;
    if total == 0 {
        return Ok(0.0);
    }
    Ok(unique as f64 / total as f64)
}

fn ngram_counts(responses: &[Vec<String>], n: usize) -> Result<(u64, u64)> {
    if n == 0 {
        return Err(CoreError::InvalidConfig("distinct-n needs n >= 1".into()));
    }
    let mut seen: HashSet<&[String]> = HashSet::new();
    let mut total: u64 = 0;
    for response in responses {
        for gram in response.windows(n) {
            seen.insert(gram);
            total += 1;
        }
    }
    Ok((seen.len() as u64, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    /// Indexed by n - 1 for n = 1, 2, 3.
    pub unique_ngrams: [u64; 3],
    pub total_ngrams: [u64; 3],
    pub response_count: usize,
}

pub fn diversity_report(responses: &[Vec<String>]) -> Result<DiversityReport> {
    if responses.is_empty() {
        return Err(CoreError::Data("no responses to score".into()));
    }
    let mut unique = [0u64; 3];
    let mut total = [0u64; 3];
    let mut distinct = [0.0f64; 3];
    for n in 1..=3usize {
        let (u, t) = ngram_counts(responses, n)?;
        unique[n - 1] = u;
        total[n - 1] = t;
        distinct[n - 1] = if t == 0 { 0.0 } else { u as f64 / t as f64 };
    }
    Ok(DiversityReport {
        distinct_1: distinct[0],
        distinct_2: distinct[1],
        distinct_3: distinct[2],
        unique_ngrams: unique,
        total_ngrams: total,
        response_count: responses.len(),
    })
}

// ── coherence scorers ───────────────────────────────────────────────────

/// Context/response coherence in [0, 1]. The trait is the seam where an
/// entailment-based scorer would plug in; the bundled default is a plain
/// lexical proxy and is labeled as such everywhere it is reported.
pub trait CoherenceScorer {
    /// Stable label used in report column headers.
    fn name(&self) -> &'static str;
    fn score(&self, context: &[String], response: &[String]) -> Result<f64>;
}

pub fn coherence_score(
    scorer: &dyn CoherenceScorer,
    context: &[String],
    response: &[String],
) -> Result<f64> {
    scorer.score(context, response)
}

/// Placeholder scorer: the fraction of distinct response tokens that also
/// appear in the context. This is *not* an entailment metric — it only
/// measures lexical grounding — and its name says so in every report.
#[derive(Debug, Default, Clone, Copy)]
pub struct LexicalOverlapScorer;

impl CoherenceScorer for LexicalOverlapScorer {
    fn name(&self) -> &'static str {
        "lexical_overlap_placeholder"
    }

    fn score(&self, context: &[String], response: &[String]) -> Result<f64> {
        let distinct: HashSet<&String> = response.iter().collect();
        if distinct.is_empty() {
            return Ok(0.0);
        }
        let context_tokens: HashSet<&String> = context.iter().collect();
        let shared = distinct.iter().filter(|t| context_tokens.contains(**t)).count();
        Ok(shared as f64 / distinct.len() as f64)
    }
}

/// Fixed-value scorer for exercising the delegation seam in tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl CoherenceScorer for ConstantScorer {
    fn name(&self) -> &'static str {
        "constant_stub"
    }

    fn score(&self, _context: &[String], _response: &[String]) -> Result<f64> {
        Ok(self.0)
    }
}

// ── tests ───────────────────────────────────────────────────────────────
