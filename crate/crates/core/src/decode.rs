//! Response generation: greedy, temperature sampling, top-k, top-p, and
//! length-normalized beam search, plus the per-context frozen-weight
//! redraw that is the default inference mode for randomized models.
//!
//! Composition order for the sampling strategies is temperature scaling
//! first, then the top-k/top-p filter, then the draw. Wherever randomness
//! is not intended, ties break toward the lower token id so results are
//! reproducible.

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::rng::SeedStream;
use crate::tensor::{Graph, Tensor};

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecodeStrategy {
    Greedy,
    Temperature { t: f64 },
    TopK { k: usize, t: f64 },
    TopP { p: f64, t: f64 },
    Beam { width: usize },
}

impl fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeStrategy::Greedy => write!(f, "greedy"),
            DecodeStrategy::Temperature { t } => write!(f, "temperature(T={t})"),
            DecodeStrategy::TopK { k, t } => write!(f, "topk(k={k},T={t})"),
            DecodeStrategy::TopP { p, t } => write!(f, "topp(p={p},T={t})"),
            DecodeStrategy::Beam { width } => write!(f, "beam({width})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Redraw the frozen registry once before decoding each context — the
    /// default inference mode for models with randomized layers.
    pub reinit_per_context: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 32,
            seed: 0,
            reinit_per_context: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            DecodeStrategy::Greedy => Ok(()),
            DecodeStrategy::Temperature { t } => check_t(t),
            DecodeStrategy::TopK { k, t } => {
                check_t(t)?;
                if k == 0 {
                    return Err(CoreError::Decode("top-k needs k >= 1".into()));
                }
                Ok(())
            }
            DecodeStrategy::TopP { p, t } => {
                check_t(t)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(CoreError::Decode(format!("top-p needs 0 < p <= 1, got {p}")));
                }
                Ok(())
            }
            DecodeStrategy::Beam { width } => {
                if width == 0 {
                    return Err(CoreError::Decode("beam needs width >= 1".into()));
                }
                Ok(())
            }
        }
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(CoreError::Decode(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

// ── distribution transforms ─────────────────────────────────────────────

/// softmax(logits / T), computed stably.
pub fn apply_temperature(logits: &[f64], t: f64) -> Result<Vec<f64>> {
    check_t(t)?;
    if logits.is_empty() {
        return Err(CoreError::Decode("empty logit vector".into()));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
    let exps: Vec<f64> = logits.iter().map(|&x| (x / t - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Token indices sorted by probability descending, ties toward lower id.
fn by_descending_prob(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order
}

/// Zero all but the k most probable entries and renormalize the survivors.
pub fn top_k_filter(probs: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > probs.len() {
        return Err(CoreError::Decode(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            probs.len()
        )));
    }
    let order = by_descending_prob(probs);
    let mut out = vec![0.0; probs.len()];
    let kept: f64 = order[..k].iter().map(|&i| probs[i]).sum();
    for &i in &order[..k] {
        out[i] = probs[i] / kept;
    }
    Ok(out)
}

/// Keep the smallest descending-probability prefix whose cumulative mass
/// reaches p (the crossing token included), then renormalize.
pub fn top_p_filter(probs: &[f64], p: f64) -> Result<Vec<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(CoreError::Decode(format!("top-p needs 0 < p <= 1, got {p}")));
    }
    let order = by_descending_prob(probs);
    let mut cutoff = order.len();
    let mut cum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        cum += probs[i];
        if cum >= p {
            cutoff = rank + 1;
            break;
        }
    }
    let kept: f64 = order[..cutoff].iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..cutoff] {
        out[i] = probs[i] / kept;
    }
    Ok(out)
}

fn argmax_lowest_id(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    // Float round-off can leave cum fractionally below 1.
    last_nonzero
}

// ── generation ──────────────────────────────────────────────────────────

/// Generate a response (token ids, without bos/eos) for one context.
/// All randomness — the optional per-context frozen redraw and any
/// sampling draws — derives from `stream`, so a fixed stream reproduces
/// the output exactly.
pub fn generate(
    model: &Model,
    context_ids: &[usize],
    cfg: &DecodeConfig,
    stream: &SeedStream,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if context_ids.is_empty() {
        return Err(CoreError::Data("cannot decode from an empty context".into()));
    }
    if cfg.reinit_per_context {
        model.reinit_frozen(&model.init, &stream.child("reinit"))?;
    }
    match cfg.strategy {
        DecodeStrategy::Beam { width } => {
            beam_search(model, context_ids, width, cfg.max_new_tokens)
        }
        _ => {
            let mut rng = stream.child("sample").rng();
            sample_loop(model, context_ids, cfg, &mut rng)
        }
    }
}

fn last_row(logits: &Tensor) -> Vec<f64> {
    let data = logits.to_vec();
    let cols = logits.cols();
    data[data.len() - cols..].to_vec()
}

fn sample_loop(
    model: &Model,
    context_ids: &[usize],
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let enc = model.encode(&mut g, context_ids)?;
    let mut prefix = vec![BOS];
    for _ in 0..cfg.max_new_tokens {
        let mut g = Graph::new();
        let logits = model.decode(&mut g, &enc, context_ids, &prefix)?;
        let row = last_row(&logits);
        let next = match cfg.strategy {
            DecodeStrategy::Greedy => argmax_lowest_id(&row),
            DecodeStrategy::Temperature { t } => sample_index(&apply_temperature(&row, t)?, rng),
            DecodeStrategy::TopK { k, t } => {
                sample_index(&top_k_filter(&apply_temperature(&row, t)?, k)?, rng)
            }
            DecodeStrategy::TopP { p, t } => {
                sample_index(&top_p_filter(&apply_temperature(&row, t)?, p)?, rng)
            }
            DecodeStrategy::Beam { .. } => unreachable!("beam handled separately"),
        };
        if next == EOS {
            break;
        }
        prefix.push(next);
        if prefix.len() >= model.config.max_len {
            break;
        }
    }
    Ok(prefix[1..].to_vec())
}

// ── beam search ─────────────────────────────────────────────────────────

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

#[derive(Debug, Clone)]
struct Hypothesis {
    /// Decoder prefix including the leading bos (never the eos).
    prefix: Vec<usize>,
    logp_sum: f64,
    steps: usize,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.logp_sum / self.steps as f64
        }
    }

    fn response(&self) -> Vec<usize> {
        self.prefix[1..].to_vec()
    }
}

/// Beam search over an arbitrary next-token log-probability function, so
/// the algorithm can be exercised against hand-set tables. The score of a
/// hypothesis is its mean log-probability per generated step (the eos
/// step counts); finished hypotheses retire into a completed pool and the
/// best completed one wins, falling back to the best live hypothesis at
/// the horizon.
fn beam_over<F>(
    mut step: F,
    width: usize,
    max_new_tokens: usize,
    max_prefix: usize,
) -> Result<(Vec<usize>, f64)>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if width == 0 {
        return Err(CoreError::Decode("beam needs width >= 1".into()));
    }
    let mut live = vec![Hypothesis { prefix: vec![BOS], logp_sum: 0.0, steps: 0 }];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_new_tokens {
        if live.is_empty() {
            break;
        }
        let mut candidates: Vec<(Hypothesis, usize)> = Vec::new();
        for hyp in live.drain(..) {
            if hyp.prefix.len() >= max_prefix {
                completed.push(hyp);
                continue;
            }
            let logps = step(&hyp.prefix)?;
            for (tok, &lp) in logps.iter().enumerate() {
                let mut next = hyp.clone();
                next.logp_sum += lp;
                next.steps += 1;
                candidates.push((next, tok));
            }
        }
        // Stable sort: candidates were pushed in (parent order, token id)
        // order, so equal scores resolve toward the lower token id.
        candidates.sort_by(|a, b| b.0.score().partial_cmp(&a.0.score()).unwrap());
        for (mut hyp, tok) in candidates.into_iter().take(width) {
            if tok == EOS {
                completed.push(hyp);
            } else {
                hyp.prefix.push(tok);
                live.push(hyp);
            }
        }
    }
    completed.extend(live);
    let best = completed
        .iter()
        .max_by(|a, b| a.score().partial_cmp(&b.score()).unwrap().then(std::cmp::Ordering::Less))
        .cloned()
        .unwrap_or(Hypothesis { prefix: vec![BOS], logp_sum: 0.0, steps: 0 });
    Ok((best.response(), best.score()))
}

/// Length-normalized beam search over the model's next-token distribution.
pub fn beam_search(
    model: &Model,
    context_ids: &[usize],
    width: usize,
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    if context_ids.is_empty() {
        return Err(CoreError::Data("cannot decode from an empty context".into()));
    }
    let mut g = Graph::new();
    let enc = model.encode(&mut g, context_ids)?;
    let (ids, _) = beam_over(
        |prefix| {
            let mut g = Graph::new();
            let logits = model.decode(&mut g, &enc, context_ids, prefix)?;
            Ok(log_softmax(&last_row(&logits)))
        },
        width,
        max_new_tokens,
        model.config.max_len,
    )?;
    Ok(ids)
}

// ── generation records (JSONL) ──────────────────────────────────────────

/// One line of a generation output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub context: String,
    pub response: String,
    pub strategy: String,
    pub seed: u64,
}

pub fn write_generations<W: Write>(w: &mut W, records: &[GenerationRecord]) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| CoreError::Data(format!("cannot serialize generation record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_generations<R: BufRead>(r: R) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(&line).map_err(|e| {
            CoreError::DataLine { line: idx + 1, msg: format!("bad generation record: {e}") }
        })?;
        out.push(rec);
    }
    Ok(out)
}

// ── tests ───────────────────────────────────────────────────────────────
