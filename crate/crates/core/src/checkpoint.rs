//! Binary checkpoint container and the plain-text vocabulary sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    5 bytes  "PARA1"
//! version  u32
//! header   u64 length + JSON (config, plan, init family, seed,
//!          epochs completed, optimizer-present flag)
//! tensors  u64 count, then per tensor: name, registry flag, frozen role,
//!          fan-in, rows, cols, row-major f64 payload
//! adam     (when present) step count, then per slot: name, length,
//!          first-moment payload, second-moment payload
//! ```
//!
//! Values are written as raw IEEE-754 bits, so a load reproduces every
//! parameter bitwise. Loading rebuilds the model from the stored shape
//! description and then overwrites each tensor by its registry name,
//! erroring on any name, shape, or registry mismatch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{CoreError, Result};
use crate::init::{FrozenRole, InitSpec};
use crate::model::{EmbeddingInit, LayerPlan, Model, ModelConfig};
use crate::training::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PARA1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on any length field read from disk, to keep a corrupt file
/// from requesting an absurd allocation.
const MAX_FIELD_LEN: u64 = 1 << 32;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    plan: LayerPlan,
    init: InitSpec,
    seed: u64,
    epochs_done: u64,
    has_optimizer: bool,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub epochs_done: u64,
}

const ROLE_TRAINABLE: u8 = 255;

fn role_code(role: FrozenRole) -> u8 {
    match role {
        FrozenRole::AttentionQkv => 0,
        FrozenRole::FeedForwardFirst => 1,
        FrozenRole::Pretrained => 2,
    }
}

fn role_from_code(code: u8) -> Result<FrozenRole> {
    match code {
        0 => Ok(FrozenRole::AttentionQkv),
        1 => Ok(FrozenRole::FeedForwardFirst),
        2 => Ok(FrozenRole::Pretrained),
        other => Err(CoreError::Checkpoint(format!("unknown frozen role code {other}"))),
    }
}

// ── writing ─────────────────────────────────────────────────────────────

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_u64::<LittleEndian>(v.to_bits())?;
    }
    Ok(())
}

/// Serialize a model (and optionally its optimizer state after
/// `epochs_done` completed epochs) to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optimizer: Option<(&AdamState, u64)>,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;

    let header = Header {
        config: model.config,
        plan: model.plan.clone(),
        init: model.init,
        seed: model.seed,
        epochs_done: optimizer.map(|(_, e)| e).unwrap_or(0),
        has_optimizer: optimizer.is_some(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CoreError::Checkpoint(format!("header serialization failed: {e}")))?;
    w.write_u64::<LittleEndian>(header_json.len() as u64)?;
    w.write_all(&header_json)?;

    let total = model.trainable_params().len() + model.frozen_params().len();
    w.write_u64::<LittleEndian>(total as u64)?;
    for p in model.trainable_params() {
        write_string(&mut w, &p.name)?;
        w.write_u8(ROLE_TRAINABLE)?;
        w.write_u64::<LittleEndian>(0)?;
        w.write_u64::<LittleEndian>(p.tensor.rows() as u64)?;
        w.write_u64::<LittleEndian>(p.tensor.cols() as u64)?;
        write_f64s(&mut w, &p.tensor.to_vec())?;
    }
    for p in model.frozen_params() {
        write_string(&mut w, &p.name)?;
        w.write_u8(role_code(p.role))?;
        w.write_u64::<LittleEndian>(p.fan_in as u64)?;
        w.write_u64::<LittleEndian>(p.tensor.rows() as u64)?;
        w.write_u64::<LittleEndian>(p.tensor.cols() as u64)?;
        write_f64s(&mut w, &p.tensor.to_vec())?;
    }

    if let Some((adam, _)) = optimizer {
        w.write_u64::<LittleEndian>(adam.step_count())?;
        w.write_u64::<LittleEndian>(adam.slots().len() as u64)?;
        for slot in adam.slots() {
            write_string(&mut w, &slot.name)?;
            w.write_u64::<LittleEndian>(slot.m.len() as u64)?;
            write_f64s(&mut w, &slot.m)?;
            write_f64s(&mut w, &slot.v)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ── reading ─────────────────────────────────────────────────────────────

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let len = r.read_u64::<LittleEndian>()?;
    if len > MAX_FIELD_LEN {
        return Err(CoreError::Checkpoint(format!("{what} length {len} is implausible")));
    }
    Ok(len as usize)
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_len(r, "string")?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CoreError::Checkpoint(format!("invalid utf-8: {e}")))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(f64::from_bits(r.read_u64::<LittleEndian>()?));
    }
    Ok(out)
}

struct TensorRecord {
    name: String,
    trainable: bool,
    role: Option<FrozenRole>,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "bad magic {magic:?}: not a model checkpoint"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }

    let header_len = read_len(&mut r, "header")?;
    let mut header_buf = vec![0u8; header_len];
    r.read_exact(&mut header_buf)?;
    let header: Header = serde_json::from_slice(&header_buf)
        .map_err(|e| CoreError::Checkpoint(format!("malformed header: {e}")))?;

    let tensor_count = read_len(&mut r, "tensor table")?;
    let mut records = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = read_string(&mut r)?;
        let role_code = r.read_u8()?;
        let _fan_in = r.read_u64::<LittleEndian>()?;
        let rows = read_len(&mut r, "tensor rows")?;
        let cols = read_len(&mut r, "tensor cols")?;
        if rows.checked_mul(cols).is_none() {
            return Err(CoreError::Checkpoint(format!("tensor {name} shape overflow")));
        }
        let data = read_f64s(&mut r, rows * cols)?;
        let (trainable, role) = if role_code == ROLE_TRAINABLE {
            (true, None)
        } else {
            (false, Some(role_from_code(role_code)?))
        };
        records.push(TensorRecord { name, trainable, role, rows, cols, data });
    }

    // A frozen embedding record means the model was built around a
    // pretrained table; rebuild it the same way so the registries match.
    let embedding_init = match records.iter().find(|t| t.name == "embedding") {
        Some(rec) if !rec.trainable => {
            EmbeddingInit::Pretrained { table: rec.data.clone(), trainable: false }
        }
        Some(_) => EmbeddingInit::Random,
        None => return Err(CoreError::Checkpoint("checkpoint has no embedding tensor".into())),
    };
    let model = Model::build_with_embedding(
        &header.config,
        &header.plan,
        &header.init,
        header.seed,
        embedding_init,
    )?;

    let expected = model.trainable_params().len() + model.frozen_params().len();
    if records.len() != expected {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint stores {} tensors but the model shape needs {expected}",
            records.len()
        )));
    }
    for rec in &records {
        let (tensor, registry_trainable, registry_role) = model
            .trainable_params()
            .iter()
            .find(|p| p.name == rec.name)
            .map(|p| (&p.tensor, true, None))
            .or_else(|| {
                model
                    .frozen_params()
                    .iter()
                    .find(|p| p.name == rec.name)
                    .map(|p| (&p.tensor, false, Some(p.role)))
            })
            .ok_or_else(|| {
                CoreError::Checkpoint(format!("checkpoint tensor {} is not in the model", rec.name))
            })?;
        if rec.trainable != registry_trainable || rec.role != registry_role {
            return Err(CoreError::Checkpoint(format!(
                "tensor {} registry tag disagrees with the model structure",
                rec.name
            )));
        }
        if [rec.rows, rec.cols] != tensor.shape() {
            return Err(CoreError::Checkpoint(format!(
                "tensor {} has shape {}x{}, model expects {:?}",
                rec.name, rec.rows, rec.cols, tensor.shape()
            )));
        }
        tensor.set_data(rec.data.clone())?;
    }

    let optimizer = if header.has_optimizer {
        let step = r.read_u64::<LittleEndian>()?;
        let slot_count = read_len(&mut r, "optimizer table")?;
        let mut entries = Vec::with_capacity(slot_count);
        for _ in 0..slot_count {
            let name = read_string(&mut r)?;
            let len = read_len(&mut r, "optimizer slot")?;
            let m = read_f64s(&mut r, len)?;
            let v = read_f64s(&mut r, len)?;
            entries.push((name, m, v));
        }
        Some(AdamState::from_parts(model.trainable_params(), step, entries)?)
    } else {
        None
    };

    Ok(LoadedCheckpoint { model, optimizer, epochs_done: header.epochs_done })
}

// ── vocabulary sidecar ──────────────────────────────────────────────────

/// One token per line, in id order. Tokens never contain whitespace, so
/// the format is unambiguous.
pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for token in vocab.tokens() {
        writeln!(w, "{token}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let mut text = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut text)?;
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    Vocab::from_tokens(tokens)
}

// ── tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, DialogueExample};
    use crate::model::LayerPlan;
    use crate::tensor::Graph;
    use crate::training::{fit_with_state, TrainConfig};

    fn tiny_model(seed: u64) -> Model {
        let config = ModelConfig {
            vocab_size: 11,
            n: 8,
            d_qkv: 4,
            d_ff: 16,
            heads: 2,
            layers: 2,
            max_len: 12,
        };
        Model::build(&config, &LayerPlan::alt(2), &InitSpec::kaiming_defaults(), seed).unwrap()
    }

    fn all_values(model: &Model) -> Vec<(String, Vec<f64>)> {
        model
            .trainable_params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.to_vec()))
            .chain(model.frozen_params().iter().map(|p| (p.name.clone(), p.tensor.to_vec())))
            .collect()
    }

    #[test]
    fn round_trip_preserves_every_tensor_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(21);
        save_checkpoint(&path, &model, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epochs_done, 0);
        assert!(loaded.optimizer.is_none());
        assert_eq!(loaded.model.config, model.config);
        assert_eq!(loaded.model.plan, model.plan);
        assert_eq!(loaded.model.seed, model.seed);

        let (a, b) = (all_values(&model), all_values(&loaded.model));
        assert_eq!(a.len(), b.len());
        for ((name_a, va), (name_b, vb)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            assert!(
                va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{name_a} drifted through the round trip"
            );
        }
    }

    #[test]
    fn logits_are_bitwise_identical_after_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(5);
        save_checkpoint(&path, &model, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap().model;
        for (ctx, resp) in [(vec![5usize, 6, 7], vec![1usize, 8]), (vec![9, 10], vec![1, 5, 6, 7])] {
            let a = model.forward(&mut Graph::new(), &ctx, &resp).unwrap().to_vec();
            let b = loaded.forward(&mut Graph::new(), &ctx, &resp).unwrap().to_vec();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn optimizer_state_round_trips_and_resumes_identically() {
        let examples: Vec<DialogueExample> = (0..8)
            .map(|i| DialogueExample {
                context: vec![tokenize(if i % 2 == 0 { "red blue" } else { "blue red" })],
                response: tokenize(if i % 2 == 0 { "red" } else { "blue" }),
            })
            .collect();
        let vocab = Vocab::build(&examples, 1).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };

        let build = || {
            let config = ModelConfig {
                vocab_size: vocab.size(),
                n: 8,
                d_qkv: 4,
                d_ff: 16,
                heads: 2,
                layers: 1,
                max_len: 8,
            };
            Model::build(&config, &LayerPlan::alt(1), &InitSpec::standard_defaults(), 33).unwrap()
        };

        // Uninterrupted: two epochs straight through.
        let full = build();
        let mut adam_full = AdamState::new(full.trainable_params());
        fit_with_state::<Vec<u8>>(&full, &mut adam_full, &cfg, &examples, &examples, &vocab, 1, None)
            .unwrap();

        // Interrupted: one epoch, checkpoint to disk, reload, finish.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.ckpt");
        let half = build();
        let mut adam_half = AdamState::new(half.trainable_params());
        let cfg1 = TrainConfig { epochs: 1, ..cfg.clone() };
        fit_with_state::<Vec<u8>>(&half, &mut adam_half, &cfg1, &examples, &examples, &vocab, 1, None)
            .unwrap();
        save_checkpoint(&path, &half, Some((&adam_half, 1))).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epochs_done, 1);
        let mut adam = loaded.optimizer.expect("optimizer saved");
        assert_eq!(adam.step_count(), adam_half.step_count());
        fit_with_state::<Vec<u8>>(
            &loaded.model,
            &mut adam,
            &cfg,
            &examples,
            &examples,
            &vocab,
            2,
            None,
        )
        .unwrap();

        for (p, q) in full.trainable_params().iter().zip(loaded.model.trainable_params()) {
            let (a, b) = (p.tensor.to_vec(), q.tensor.to_vec());
            assert!(
                a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{} differs between resumed and uninterrupted runs",
                p.name
            );
        }
    }

    #[test]
    fn pretrained_frozen_embedding_round_trips() {
        let config = ModelConfig {
            vocab_size: 7,
            n: 4,
            d_qkv: 2,
            d_ff: 8,
            heads: 1,
            layers: 1,
            max_len: 6,
        };
        let table: Vec<f64> = (0..28).map(|i| (i as f64).sin()).collect();
        let model = Model::build_with_embedding(
            &config,
            &LayerPlan::alt(1),
            &InitSpec::standard_defaults(),
            2,
            EmbeddingInit::Pretrained { table: table.clone(), trainable: false },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.ckpt");
        save_checkpoint(&path, &model, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap().model;
        let entry = loaded
            .frozen_params()
            .iter()
            .find(|p| p.name == "embedding")
            .expect("embedding stays frozen");
        assert_eq!(entry.role, FrozenRole::Pretrained);
        assert_eq!(loaded.embedding.to_vec(), table);
        assert!(!loaded.embedding.grad_enabled());
    }

    #[test]
    fn bad_magic_version_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model(3);
        save_checkpoint(&path, &model, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("magic.ckpt");
        let mut tampered = bytes.clone();
        tampered[0] = b'X';
        std::fs::write(&bad_magic, &tampered).unwrap();
        let err = load_checkpoint(&bad_magic).unwrap_err();
        assert!(matches!(err, CoreError::Checkpoint(_)), "{err}");

        let bad_version = dir.path().join("version.ckpt");
        let mut tampered = bytes.clone();
        tampered[5] = 99;
        std::fs::write(&bad_version, &tampered).unwrap();
        let err = load_checkpoint(&bad_version).unwrap_err();
        assert!(matches!(err, CoreError::Checkpoint(_)), "{err}");

        let truncated = dir.path().join("short.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&truncated).is_err());
    }

    #[test]
    fn vocab_sidecar_round_trips() {
        let examples = vec![DialogueExample {
            context: vec![tokenize("the quick fox")],
            response: tokenize("jumps over the fence"),
        }];
        let vocab = Vocab::build(&examples, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.vocab");
        save_vocab(&path, &vocab).unwrap();
        let loaded = load_vocab(&path).unwrap();
        assert_eq!(loaded.size(), vocab.size());
        for id in 0..vocab.size() {
            assert_eq!(loaded.token(id), vocab.token(id));
        }
        assert_eq!(loaded.id("fox"), vocab.id("fox"));
    }
}
