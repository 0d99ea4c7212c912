//! Adam optimizer and the epoch loop with per-epoch frozen-weight redraws.
//!
//! The optimizer state covers exactly the trainable registry; handing it a
//! gradient for any other tensor is an error, which keeps frozen weights
//! provably outside the update path. Every epoch derives its randomness
//! (frozen redraws, batch shuffling) statelessly from `(model seed, epoch
//! number)`, so a run resumed from a checkpoint replays the same epochs an
//! uninterrupted run would have seen.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, DialogueExample, Vocab, PAD};
use crate::error::{CoreError, Result};
use crate::model::{Model, TrainableParam};
use crate::rng::SeedStream;
use crate::tensor::{Graph, TensorId};

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Redraw the frozen registry at the start of every epoch. Turning
    /// this off leaves frozen weights at their build-time draw.
    pub reinit_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.0006,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            reinit_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::InvalidConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CoreError::InvalidConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Per-parameter first/second moment estimates, keyed by the stable
/// registry name so checkpoints can rebind state to a rebuilt model.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub name: String,
    pub tensor: crate::tensor::Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug)]
pub struct AdamState {
    step: u64,
    slots: Vec<AdamSlot>,
    index: HashMap<TensorId, usize>,
}

impl AdamState {
    pub fn new(params: &[TrainableParam]) -> Self {
        let slots: Vec<AdamSlot> = params
            .iter()
            .map(|p| AdamSlot {
                name: p.name.clone(),
                tensor: p.tensor.clone(),
                m: vec![0.0; p.tensor.numel()],
                v: vec![0.0; p.tensor.numel()],
            })
            .collect();
        let index = slots.iter().enumerate().map(|(i, s)| (s.tensor.id(), i)).collect();
        AdamState { step: 0, slots, index }
    }

    /// Rebuild saved state against a (re)built model's trainable registry.
    /// Every parameter must find its saved moments by name, with matching
    /// sizes.
    pub fn from_parts(
        params: &[TrainableParam],
        step: u64,
        entries: Vec<(String, Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        if entries.len() != params.len() {
            return Err(CoreError::Optimizer(format!(
                "optimizer state has {} entries for {} trainable parameters",
                entries.len(),
                params.len()
            )));
        }
        let mut by_name: HashMap<String, (Vec<f64>, Vec<f64>)> =
            entries.into_iter().map(|(n, m, v)| (n, (m, v))).collect();
        let mut state = AdamState::new(params);
        state.step = step;
        for slot in &mut state.slots {
            let (m, v) = by_name.remove(&slot.name).ok_or_else(|| {
                CoreError::Optimizer(format!("no optimizer state for parameter {}", slot.name))
            })?;
            if m.len() != slot.m.len() || v.len() != slot.v.len() {
                return Err(CoreError::Optimizer(format!(
                    "optimizer state size mismatch for {}: {} vs {}",
                    slot.name,
                    m.len(),
                    slot.m.len()
                )));
            }
            slot.m = m;
            slot.v = v;
        }
        Ok(state)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[AdamSlot] {
        &self.slots
    }

    /// One bias-corrected Adam update. Gradients must address registered
    /// (trainable) tensors only; parameters absent from `grads` keep their
    /// moments and values untouched this step.
    pub fn step(
        &mut self,
        cfg: &TrainConfig,
        grads: &HashMap<TensorId, Vec<f64>>,
    ) -> Result<()> {
        for id in grads.keys() {
            if !self.index.contains_key(id) {
                return Err(CoreError::Optimizer(format!(
                    "gradient supplied for tensor {id:?}, which is not a trainable parameter"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(&slot.tensor.id()) else { continue };
            if g.len() != slot.m.len() {
                return Err(CoreError::Optimizer(format!(
                    "gradient for {} has {} values, expected {}",
                    slot.name,
                    g.len(),
                    slot.m.len()
                )));
            }
            for i in 0..g.len() {
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            }
            let (m, v) = (&slot.m, &slot.v);
            slot.tensor
                .update_data(|i, x| x - cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps));
        }
        Ok(())
    }
}

// ── epoch loop ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub reinit_count: usize,
}

/// Token-weighted mean cross entropy over a corpus, grouping alike with
/// training batches. Forward passes are per example, so the grouping and
/// padding cannot change the value — only how work is chunked.
pub fn evaluate_loss(
    model: &Model,
    examples: &[DialogueExample],
    vocab: &Vocab,
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(CoreError::Data("evaluation set is empty".into()));
    }
    let batches = make_batches(
        examples,
        vocab,
        batch_size,
        model.config.max_len,
        &SeedStream::new(0).child("eval"),
    )?;
    let mut sum = 0.0;
    let mut tokens = 0usize;
    for batch in &batches {
        for i in 0..batch.len() {
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &batch.context_ids[i], &batch.response_in[i])?;
            let (loss, count) = g.cross_entropy_sum(&logits, &batch.response_target[i], PAD)?;
            sum += loss.item();
            tokens += count;
        }
    }
    if tokens == 0 {
        return Err(CoreError::Data("evaluation set has no non-pad targets".into()));
    }
    Ok(sum / tokens as f64)
}

/// One epoch: redraw the frozen registry (when enabled), shuffle into
/// batches, and take one Adam step per batch on the token-mean gradient.
/// Returns `(train_loss, reinit_count)`; `epoch` is 1-based.
pub fn train_epoch(
    model: &Model,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    examples: &[DialogueExample],
    vocab: &Vocab,
    epoch: usize,
) -> Result<(f64, usize)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(CoreError::Data("training set is empty".into()));
    }
    let master = SeedStream::new(model.seed).child("train");
    let reinit_count = if cfg.reinit_each_epoch {
        model.reinit_frozen(&model.init, &master.child("frozen-epoch").child_idx(epoch as u64))?
    } else {
        0
    };
    let batches = make_batches(
        examples,
        vocab,
        cfg.batch_size,
        model.config.max_len,
        &master.child("epoch-batches").child_idx(epoch as u64),
    )?;

    let mut epoch_sum = 0.0;
    let mut epoch_tokens = 0usize;
    for batch in &batches {
        let mut acc: HashMap<TensorId, Vec<f64>> = HashMap::new();
        let mut batch_tokens = 0usize;
        for i in 0..batch.len() {
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &batch.context_ids[i], &batch.response_in[i])?;
            let (loss, count) = g.cross_entropy_sum(&logits, &batch.response_target[i], PAD)?;
            if count == 0 {
                continue;
            }
            batch_tokens += count;
            epoch_sum += loss.item();
            for (id, grad) in g.backward(&loss)? {
                match acc.entry(id) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (a, b) in e.get_mut().iter_mut().zip(&grad) {
                            *a += b;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(grad);
                    }
                }
            }
        }
        if batch_tokens == 0 {
            continue;
        }
        let scale = 1.0 / batch_tokens as f64;
        for grad in acc.values_mut() {
            for x in grad.iter_mut() {
                *x *= scale;
            }
        }
        adam.step(cfg, &acc)?;
        epoch_tokens += batch_tokens;
    }
    if epoch_tokens == 0 {
        return Err(CoreError::Data("training set has no non-pad targets".into()));
    }
    Ok((epoch_sum / epoch_tokens as f64, reinit_count))
}

/// Full training run with a fresh optimizer. Writes one CSV line per epoch
/// (`epoch,train_loss,eval_loss,reinit_count`) to `log` when given.
pub fn fit<W: Write>(
    model: &Model,
    cfg: &TrainConfig,
    train: &[DialogueExample],
    eval: &[DialogueExample],
    vocab: &Vocab,
    log: Option<&mut W>,
) -> Result<Vec<EpochStats>> {
    let mut adam = AdamState::new(model.trainable_params());
    fit_with_state(model, &mut adam, cfg, train, eval, vocab, 1, log)
}

/// Training run from `start_epoch` (1-based, inclusive) through
/// `cfg.epochs`, reusing existing optimizer state — the checkpoint-resume
/// path. The CSV header is written only when starting from epoch 1.
#[allow(clippy::too_many_arguments)]
pub fn fit_with_state<W: Write>(
    model: &Model,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    train: &[DialogueExample],
    eval: &[DialogueExample],
    vocab: &Vocab,
    start_epoch: usize,
    mut log: Option<&mut W>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if start_epoch == 0 {
        return Err(CoreError::InvalidConfig("start_epoch is 1-based".into()));
    }
    if let (1, Some(w)) = (start_epoch, log.as_deref_mut()) {
        writeln!(w, "epoch,train_loss,eval_loss,reinit_count")?;
    }
    let mut stats = Vec::new();
    for epoch in start_epoch..=cfg.epochs {
        let (train_loss, reinit_count) = train_epoch(model, adam, cfg, train, vocab, epoch)?;
        let eval_loss = evaluate_loss(model, eval, vocab, cfg.batch_size)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{epoch},{train_loss},{eval_loss},{reinit_count}")?;
        }
        stats.push(EpochStats { epoch, train_loss, eval_loss, reinit_count });
    }
    Ok(stats)
}

// ── tests ───────────────────────────────────────────────────────────────
