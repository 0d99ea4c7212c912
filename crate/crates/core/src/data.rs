//! Dialogue corpus ingestion, vocabulary, context windowing, and batching.
//!
//! The corpus format is UTF-8 JSONL: one object per line with a "context"
//! array of utterance strings and a "response" string. Tokenization is
//! lowercased whitespace splitting, matching word-level embeddings.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Deserialize;

use crate::error::{CoreError, Result};
use crate::init::sample_normal;
use crate::rng::SeedStream;

// Reserved vocabulary ids, never remapped.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Separator inserted between context turns when they are joined into one
/// encoder sequence.
pub const SEP: usize = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

/// Dialogue contexts are capped at this many most-recent turns.
pub const MAX_CONTEXT_TURNS: usize = 5;

/// One dialogue: an ordered list of context utterances and the reference
/// response, all whitespace-tokenized and lowercased.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueExample {
    pub context: Vec<Vec<String>>,
    pub response: Vec<String>,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Deserialize)]
struct RawExample {
    context: Vec<String>,
    response: String,
}

/// Parse a JSONL dialogue corpus. Malformed lines fail with their line
/// number; an entirely empty corpus is a data error.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<DialogueExample>> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        CoreError::Data(format!("cannot open corpus {}: {e}", path.as_ref().display()))
    })?;
    parse_corpus(BufReader::new(file))
}

/// Reader-based variant of [`load_corpus`], for corpora that are not
/// files (embedded assets, in-memory fixtures).
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<DialogueExample>> {
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line).map_err(|e| CoreError::DataLine {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        if raw.context.is_empty() {
            return Err(CoreError::DataLine { line: idx + 1, msg: "empty context".into() });
        }
        examples.push(DialogueExample {
            context: raw.context.iter().map(|u| tokenize(u)).collect(),
            response: tokenize(&raw.response),
        });
    }
    if examples.is_empty() {
        return Err(CoreError::Data("corpus contains no valid examples".into()));
    }
    Ok(examples)
}

/// Keep only the last `max_turns` context utterances.
pub fn window_context(example: &DialogueExample, max_turns: usize) -> DialogueExample {
    let skip = example.context.len().saturating_sub(max_turns);
    DialogueExample {
        context: example.context[skip..].to_vec(),
        response: example.response.clone(),
    }
}

// ── vocabulary ──────────────────────────────────────────────────────────

/// Token table with fixed reserved ids. Non-reserved ids are assigned in
/// descending corpus frequency with a lexicographic tie-break, so the
/// mapping is deterministic for a given corpus.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub fn build(examples: &[DialogueExample], min_count: usize) -> Result<Vocab> {
        if examples.is_empty() {
            return Err(CoreError::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ex in examples {
            for utterance in ex.context.iter().chain(std::iter::once(&ex.response)) {
                for tok in utterance {
                    *counts.entry(tok.as_str()).or_insert(0) += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, c)| c >= min_count && !RESERVED_TOKENS.contains(&tok))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(tok, _)| tok.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { token_to_id, id_to_token })
    }

    /// Rebuild from an ordered token list (checkpoint sidecar format).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        for (i, expected) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*expected) {
                return Err(CoreError::Data(format!(
                    "vocabulary list must start with the reserved tokens; slot {i} is {:?}",
                    tokens.get(i)
                )));
            }
        }
        let token_to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { token_to_id, id_to_token: tokens })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[UNK]).to_string())
            .collect()
    }
}

// ── batching ────────────────────────────────────────────────────────────

/// A padded minibatch. `response_in` rows start with bos; `response_target`
/// rows are the same tokens shifted left with eos appended, so position t
/// of the target is the token that should follow position t of the input.
/// Mask entries are `true` where the token is real (not padding).
#[derive(Debug, Clone)]
pub struct Batch {
    pub context_ids: Vec<Vec<usize>>,
    pub response_in: Vec<Vec<usize>>,
    pub response_target: Vec<Vec<usize>>,
    pub context_mask: Vec<Vec<bool>>,
    pub response_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.context_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context_ids.is_empty()
    }
}

/// Join context turns with the separator token and encode, keeping the
/// most recent `max_len` tokens.
pub fn encode_context(example: &DialogueExample, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut ids = Vec::new();
    for (i, turn) in example.context.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(turn.iter().map(|t| vocab.id(t)));
    }
    if ids.is_empty() {
        ids.push(UNK);
    }
    let skip = ids.len().saturating_sub(max_len);
    ids.split_off(skip)
}

/// Shuffle (seed-derived order), window contexts to the turn cap, encode,
/// and pad each batch to its own maximum lengths.
pub fn make_batches(
    examples: &[DialogueExample],
    vocab: &Vocab,
    batch_size: usize,
    max_len: usize,
    stream: &SeedStream,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(CoreError::InvalidConfig("batch_size must be at least 1".into()));
    }
    if max_len < 2 {
        return Err(CoreError::InvalidConfig("max_len must be at least 2".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut stream.child("batch-order").rng());

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut ctx_rows = Vec::with_capacity(chunk.len());
        let mut in_rows = Vec::with_capacity(chunk.len());
        let mut tgt_rows = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let windowed = window_context(&examples[i], MAX_CONTEXT_TURNS);
            let ctx = encode_context(&windowed, vocab, max_len);
            let mut resp = vocab.encode(&windowed.response);
            resp.truncate(max_len - 1);
            let mut resp_in = vec![BOS];
            resp_in.extend_from_slice(&resp);
            let mut resp_tgt = resp;
            resp_tgt.push(EOS);
            ctx_rows.push(ctx);
            in_rows.push(resp_in);
            tgt_rows.push(resp_tgt);
        }
        let ctx_max = ctx_rows.iter().map(Vec::len).max().unwrap_or(1);
        let resp_max = in_rows.iter().map(Vec::len).max().unwrap_or(1);
        let mut context_mask = Vec::with_capacity(chunk.len());
        let mut response_mask = Vec::with_capacity(chunk.len());
        for row in &mut ctx_rows {
            let real = row.len();
            row.resize(ctx_max, PAD);
            context_mask.push((0..ctx_max).map(|j| j < real).collect());
        }
        for (inp, tgt) in in_rows.iter_mut().zip(&mut tgt_rows) {
            let real = inp.len();
            inp.resize(resp_max, PAD);
            tgt.resize(resp_max, PAD);
            response_mask.push((0..resp_max).map(|j| j < real).collect::<Vec<bool>>());
        }
        batches.push(Batch {
            context_ids: ctx_rows,
            response_in: in_rows,
            response_target: tgt_rows,
            context_mask,
            response_mask,
        });
    }
    Ok(batches)
}

// ── pretrained word vectors ─────────────────────────────────────────────

/// Read plain-text word vectors ("token v1 ... vn" per line) for a vocab.
/// Covered tokens get their file rows; uncovered non-pad tokens are drawn
/// from N(0, 0.01^2) so they do not dominate the pretrained rows; the pad
/// row stays zero. Returns the row-major `[vocab.size() x n]` table and
/// the fraction of non-reserved tokens covered.
pub fn load_word_vectors(
    path: impl AsRef<Path>,
    vocab: &Vocab,
    n: usize,
    stream: &SeedStream,
) -> Result<(Vec<f64>, f64)> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        CoreError::Data(format!("cannot open word vectors {}: {e}", path.as_ref().display()))
    })?;
    let reader = BufReader::new(file);

    let mut table = vec![0.0; vocab.size() * n];
    let mut covered = vec![false; vocab.size()];
    covered[PAD] = true;

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|v| {
                v.parse::<f64>().map_err(|e| CoreError::DataLine {
                    line: idx + 1,
                    msg: format!("bad float {v:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != n {
            return Err(CoreError::DataLine {
                line: idx + 1,
                msg: format!("expected {n} values, got {}", values.len()),
            });
        }
        let id = vocab.id(token);
        if id != UNK || token == RESERVED_TOKENS[UNK] {
            table[id * n..(id + 1) * n].copy_from_slice(&values);
            covered[id] = true;
        }
    }

    for (id, cov) in covered.iter().enumerate() {
        if !cov {
            let mut rng = stream.child("word-vectors").child(&format!("row{id}")).rng();
            let row = sample_normal(n, 0.01, &mut rng)?;
            table[id * n..(id + 1) * n].copy_from_slice(&row);
        }
    }

    let non_reserved = vocab.size().saturating_sub(RESERVED_TOKENS.len());
    let covered_non_reserved = covered
        .iter()
        .enumerate()
        .skip(RESERVED_TOKENS.len())
        .filter(|&(_, &c)| c)
        .count();
    let coverage = if non_reserved == 0 {
        0.0
    } else {
        covered_non_reserved as f64 / non_reserved as f64
    };
    Ok((table, coverage))
}
