//! The partially randomized encoder–decoder model.
//!
//! Each encoder/decoder position is either a *randomized* layer — its
//! attention Q/K/V projections and first feed-forward matrix+bias frozen
//! at random draws — or a fully trainable standard layer, chosen by a
//! [`LayerPlan`]. Decoder cross-attention is always trainable: freezing it
//! is known to prevent convergence. Frozen tensors live in a registry that
//! the per-epoch reinitialization walks; trainable tensors live in the
//! optimizer's registry. Every parameter is in exactly one of the two.

use serde::{Deserialize, Serialize};

use crate::data::PAD;
use crate::error::{CoreError, Result};
use crate::init::{init_frozen_layer, kaiming_std, sample_normal, FrozenRole, InitSpec};
use crate::rng::SeedStream;
use crate::tensor::{Graph, Tensor};

/// Additive score for blocked attention positions. Large enough that the
/// stable softmax underflows it to an exactly zero weight, while staying
/// finite so no NaN can propagate.
pub const MASK_BLOCK: f64 = -1e30;

const LN_EPS: f64 = 1e-5;

// ── configuration ───────────────────────────────────────────────────────

/// Architecture dimensions. `layers` is the encoder count and the decoder
/// count (the stacks are always the same depth).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Embedding / residual width.
    pub n: usize,
    /// Per-head query/key/value width.
    pub d_qkv: usize,
    /// Feed-forward inner width.
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    /// Maximum sequence length per side (positional-encoding horizon).
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("n", self.n),
            ("d_qkv", self.d_qkv),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("layers", self.layers),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(CoreError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Which stack positions are randomized (`true`) versus standard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub encoder_mask: Vec<bool>,
    pub decoder_mask: Vec<bool>,
}

impl LayerPlan {
    /// Alternate randomized/standard, randomized first: positions 0, 2, 4...
    pub fn alt(layers: usize) -> Self {
        let mask: Vec<bool> = (0..layers).map(|i| i % 2 == 0).collect();
        LayerPlan { encoder_mask: mask.clone(), decoder_mask: mask }
    }

    /// Every position randomized.
    pub fn full(layers: usize) -> Self {
        LayerPlan { encoder_mask: vec![true; layers], decoder_mask: vec![true; layers] }
    }

    /// Only the first ⌊layers/2⌋ positions randomized.
    pub fn seq1(layers: usize) -> Self {
        let mask: Vec<bool> = (0..layers).map(|i| i < layers / 2).collect();
        LayerPlan { encoder_mask: mask.clone(), decoder_mask: mask }
    }

    /// Only the last ⌊layers/2⌋ positions randomized.
    pub fn seq2(layers: usize) -> Self {
        let mask: Vec<bool> = (0..layers).map(|i| i >= layers - layers / 2).collect();
        LayerPlan { encoder_mask: mask.clone(), decoder_mask: mask }
    }

    /// No randomized positions: a standard transformer.
    pub fn none(layers: usize) -> Self {
        LayerPlan { encoder_mask: vec![false; layers], decoder_mask: vec![false; layers] }
    }

    pub fn custom(encoder_mask: Vec<bool>, decoder_mask: Vec<bool>) -> Self {
        LayerPlan { encoder_mask, decoder_mask }
    }

    pub fn from_name(name: &str, layers: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "alt" => Ok(Self::alt(layers)),
            "full" => Ok(Self::full(layers)),
            "seq1" => Ok(Self::seq1(layers)),
            "seq2" => Ok(Self::seq2(layers)),
            "none" => Ok(Self::none(layers)),
            other => Err(CoreError::InvalidConfig(format!(
                "unknown layer plan {other:?} (expected alt, full, seq1, seq2, or none)"
            ))),
        }
    }

    pub fn has_randomized(&self) -> bool {
        self.encoder_mask.iter().chain(&self.decoder_mask).any(|&m| m)
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.encoder_mask.len() != layers || self.decoder_mask.len() != layers {
            return Err(CoreError::InvalidConfig(format!(
                "layer plan masks ({} enc / {} dec) do not match layers = {layers}",
                self.encoder_mask.len(),
                self.decoder_mask.len()
            )));
        }
        Ok(())
    }
}

// ── building blocks ─────────────────────────────────────────────────────

/// Multi-head attention. When `randomized`, the per-head Q/K/V projections
/// are frozen random draws; the output projection `wz` that mixes the
/// concatenated heads back to width n is always trainable.
#[derive(Debug)]
pub struct AttentionBlock {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wz: Tensor,
    pub randomized: bool,
}

impl AttentionBlock {
    pub fn new(
        n: usize,
        d_qkv: usize,
        heads: usize,
        randomized: bool,
        spec: &InitSpec,
        stream: &SeedStream,
    ) -> Result<Self> {
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for h in 0..heads {
            for (slot, label) in [(&mut wq, "wq"), (&mut wk, "wk"), (&mut wv, "wv")] {
                let mut rng = stream.child(&format!("h{h}.{label}")).rng();
                let t = if randomized {
                    init_frozen_layer(FrozenRole::AttentionQkv, [n, d_qkv], n, spec, &mut rng)?
                } else {
                    let std = kaiming_std(n, 1.0, false)?;
                    Tensor::new([n, d_qkv], sample_normal(n * d_qkv, std, &mut rng)?, true)?
                };
                slot.push(t);
            }
        }
        let std = kaiming_std(heads * d_qkv, 1.0, false)?;
        let wz = Tensor::new(
            [heads * d_qkv, n],
            sample_normal(heads * d_qkv * n, std, &mut stream.child("wz").rng())?,
            true,
        )?;
        Ok(AttentionBlock { wq, wk, wv, wz, randomized })
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    fn width(&self) -> usize {
        self.wq[0].rows()
    }

    /// Scaled dot-product attention per head, heads concatenated, then the
    /// shared output projection. `mask` (if any) is added to the scaled
    /// scores before the softmax.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries_in: &Tensor,
        kv_in: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let n = self.width();
        if queries_in.cols() != n || kv_in.cols() != n {
            return Err(CoreError::ShapeMismatch {
                op: "attention",
                detail: format!(
                    "expected width {n}, got queries {:?} and keys/values {:?}",
                    queries_in.shape(),
                    kv_in.shape()
                ),
            });
        }
        let d_qkv = self.wq[0].cols();
        let inv_sqrt_d = 1.0 / (d_qkv as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads());
        for h in 0..self.heads() {
            let q = g.matmul(queries_in, &self.wq[h])?;
            let k = g.matmul(kv_in, &self.wk[h])?;
            let v = g.matmul(kv_in, &self.wv[h])?;
            let kt = g.transpose(&k)?;
            let scores = g.matmul(&q, &kt)?;
            let scaled = g.scale(&scores, inv_sqrt_d)?;
            let masked = match mask {
                Some(m) => g.add(&scaled, m)?,
                None => scaled,
            };
            let weights = g.softmax_rows(&masked)?;
            head_outputs.push(g.matmul(&weights, &v)?);
        }
        let concat = g.concat_cols(&head_outputs)?;
        g.matmul(&concat, &self.wz)
    }
}

/// Two-layer feed-forward with relu. When `randomized`, the first layer
/// (w1, b1) is frozen; the second (w2, b2) is always trainable.
#[derive(Debug)]
pub struct FeedForwardBlock {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub randomized: bool,
}

impl FeedForwardBlock {
    pub fn new(
        n: usize,
        d_ff: usize,
        randomized: bool,
        spec: &InitSpec,
        stream: &SeedStream,
    ) -> Result<Self> {
        let (w1, b1) = if randomized {
            let w1 = init_frozen_layer(
                FrozenRole::FeedForwardFirst,
                [n, d_ff],
                n,
                spec,
                &mut stream.child("w1").rng(),
            )?;
            // The frozen bias shares the layer's distribution; its shape
            // cannot carry the fan-in, which is the block input width n.
            let b1 = init_frozen_layer(
                FrozenRole::FeedForwardFirst,
                [1, d_ff],
                n,
                spec,
                &mut stream.child("b1").rng(),
            )?;
            (w1, b1)
        } else {
            let std = kaiming_std(n, 1.0, false)?;
            let w1 = Tensor::new([n, d_ff], sample_normal(n * d_ff, std, &mut stream.child("w1").rng())?, true)?;
            (w1, Tensor::zeros([1, d_ff], true))
        };
        // w2's input is relu output, hence the doubled variance target.
        let std = kaiming_std(d_ff, 1.0, true)?;
        let w2 = Tensor::new([d_ff, n], sample_normal(d_ff * n, std, &mut stream.child("w2").rng())?, true)?;
        let b2 = Tensor::zeros([1, n], true);
        Ok(FeedForwardBlock { w1, b1, w2, b2, randomized })
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.w1.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "feed_forward",
                detail: format!("expected width {}, got {:?}", self.w1.rows(), x.shape()),
            });
        }
        let pre = g.matmul(x, &self.w1)?;
        let pre = g.add_row(&pre, &self.b1)?;
        let act = g.relu(&pre)?;
        let out = g.matmul(&act, &self.w2)?;
        g.add_row(&out, &self.b2)
    }
}

/// Learned per-feature gain and bias for a layer norm.
#[derive(Debug)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn new(n: usize) -> Self {
        LayerNormParams {
            gain: Tensor::new([1, n], vec![1.0; n], true).expect("consistent shape"),
            bias: Tensor::zeros([1, n], true),
        }
    }

    fn apply(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        g.layer_norm(x, &self.gain, &self.bias, LN_EPS)
    }
}

#[derive(Debug)]
pub struct EncoderLayer {
    pub self_attn: AttentionBlock,
    pub norm1: LayerNormParams,
    pub ff: FeedForwardBlock,
    pub norm2: LayerNormParams,
}

impl EncoderLayer {
    /// Post-norm residual ordering: sublayer, add, normalize.
    pub fn forward(&self, g: &mut Graph, x: &Tensor, pad_mask: Option<&Tensor>) -> Result<Tensor> {
        let attn = self.self_attn.forward(g, x, x, pad_mask)?;
        let res = g.add(x, &attn)?;
        let x = self.norm1.apply(g, &res)?;
        let ff = self.ff.forward(g, &x)?;
        let res = g.add(&x, &ff)?;
        self.norm2.apply(g, &res)
    }
}

#[derive(Debug)]
pub struct DecoderLayer {
    pub self_attn: AttentionBlock,
    pub norm1: LayerNormParams,
    pub cross_attn: AttentionBlock,
    pub norm2: LayerNormParams,
    pub ff: FeedForwardBlock,
    pub norm3: LayerNormParams,
}

impl DecoderLayer {
    pub fn forward(
        &self,
        g: &mut Graph,
        y: &Tensor,
        enc_out: &Tensor,
        self_mask: Option<&Tensor>,
        cross_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let attn = self.self_attn.forward(g, y, y, self_mask)?;
        let res = g.add(y, &attn)?;
        let y = self.norm1.apply(g, &res)?;
        let cross = self.cross_attn.forward(g, &y, enc_out, cross_mask)?;
        let res = g.add(&y, &cross)?;
        let y = self.norm2.apply(g, &res)?;
        let ff = self.ff.forward(g, &y)?;
        let res = g.add(&y, &ff)?;
        self.norm3.apply(g, &res)
    }
}

// ── parameter registries ────────────────────────────────────────────────

/// A frozen parameter: reinitialization redraws it (unless pretrained)
/// and the optimizer must never touch it.
#[derive(Debug, Clone)]
pub struct FrozenParam {
    pub name: String,
    pub tensor: Tensor,
    pub role: FrozenRole,
    pub fan_in: usize,
}

/// A trainable parameter: owned by the optimizer.
#[derive(Debug, Clone)]
pub struct TrainableParam {
    pub name: String,
    pub tensor: Tensor,
}

/// How the embedding table starts out.
pub enum EmbeddingInit {
    Random,
    /// Row-major `[vocab_size x n]` values, e.g. from pretrained word
    /// vectors. When not trainable the table joins the frozen registry as
    /// a pretrained entry that reinitialization skips.
    Pretrained { table: Vec<f64>, trainable: bool },
}

// ── the model ───────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub plan: LayerPlan,
    pub init: InitSpec,
    pub seed: u64,
    pub embedding: Tensor,
    pub encoders: Vec<EncoderLayer>,
    pub decoders: Vec<DecoderLayer>,
    pub out_proj: Tensor,
    pos_encoding: Vec<f64>,
    frozen: Vec<FrozenParam>,
    trainable: Vec<TrainableParam>,
}

impl Model {
    pub fn build(config: &ModelConfig, plan: &LayerPlan, spec: &InitSpec, seed: u64) -> Result<Model> {
        Self::build_with_embedding(config, plan, spec, seed, EmbeddingInit::Random)
    }

    pub fn build_with_embedding(
        config: &ModelConfig,
        plan: &LayerPlan,
        spec: &InitSpec,
        seed: u64,
        embedding_init: EmbeddingInit,
    ) -> Result<Model> {
        config.validate()?;
        spec.validate()?;
        plan.validate(config.layers)?;

        let master = SeedStream::new(seed);
        let build = master.child("build");
        let (n, d_qkv, d_ff, heads) = (config.n, config.d_qkv, config.d_ff, config.heads);

        let embedding = match embedding_init {
            EmbeddingInit::Random => {
                let std = kaiming_std(n, 1.0, false)?;
                let data = sample_normal(config.vocab_size * n, std, &mut build.child("embedding").rng())?;
                Tensor::new([config.vocab_size, n], data, true)?
            }
            EmbeddingInit::Pretrained { table, trainable } => {
                if table.len() != config.vocab_size * n {
                    return Err(CoreError::InvalidConfig(format!(
                        "pretrained embedding has {} values, expected {} x {}",
                        table.len(),
                        config.vocab_size,
                        n
                    )));
                }
                Tensor::new([config.vocab_size, n], table, trainable)?
            }
        };

        let mut encoders = Vec::with_capacity(config.layers);
        for (i, &randomized) in plan.encoder_mask.iter().enumerate() {
            let s = build.child(&format!("enc{i}"));
            encoders.push(EncoderLayer {
                self_attn: AttentionBlock::new(n, d_qkv, heads, randomized, spec, &s.child("self"))?,
                norm1: LayerNormParams::new(n),
                ff: FeedForwardBlock::new(n, d_ff, randomized, spec, &s.child("ff"))?,
                norm2: LayerNormParams::new(n),
            });
        }
        let mut decoders = Vec::with_capacity(config.layers);
        for (i, &randomized) in plan.decoder_mask.iter().enumerate() {
            let s = build.child(&format!("dec{i}"));
            decoders.push(DecoderLayer {
                self_attn: AttentionBlock::new(n, d_qkv, heads, randomized, spec, &s.child("self"))?,
                norm1: LayerNormParams::new(n),
                // Cross-attention stays trainable in every plan; freezing it
                // stops the decoder from learning to read the encoder at all.
                cross_attn: AttentionBlock::new(n, d_qkv, heads, false, spec, &s.child("cross"))?,
                norm2: LayerNormParams::new(n),
                ff: FeedForwardBlock::new(n, d_ff, randomized, spec, &s.child("ff"))?,
                norm3: LayerNormParams::new(n),
            });
        }

        let std = kaiming_std(n, 1.0, false)?;
        let out_proj = Tensor::new(
            [n, config.vocab_size],
            sample_normal(n * config.vocab_size, std, &mut build.child("out.w").rng())?,
            true,
        )?;

        let mut model = Model {
            config: *config,
            plan: plan.clone(),
            init: *spec,
            seed,
            embedding,
            encoders,
            decoders,
            out_proj,
            pos_encoding: sinusoidal_encoding(config.max_len, n),
            frozen: Vec::new(),
            trainable: Vec::new(),
        };
        let (frozen, trainable) = model.collect_params();
        model.frozen = frozen;
        model.trainable = trainable;
        Ok(model)
    }

    /// Walk the structure in a fixed order, assigning each tensor its
    /// stable name and registry. This is the single source of truth for
    /// parameter naming (checkpoints, reinitialization, optimizer state).
    fn collect_params(&self) -> (Vec<FrozenParam>, Vec<TrainableParam>) {
        let mut frozen = Vec::new();
        let mut trainable = Vec::new();
        let n = self.config.n;

        let mut add = |name: String, tensor: &Tensor, role: Option<(FrozenRole, usize)>| match role {
            Some((role, fan_in)) if !tensor.grad_enabled() => frozen.push(FrozenParam {
                name,
                tensor: tensor.clone(),
                role,
                fan_in,
            }),
            _ => trainable.push(TrainableParam { name, tensor: tensor.clone() }),
        };

        let emb_role = Some((FrozenRole::Pretrained, n));
        add("embedding".into(), &self.embedding, emb_role);

        let add_attention = |add: &mut dyn FnMut(String, &Tensor, Option<(FrozenRole, usize)>),
                             prefix: &str,
                             block: &AttentionBlock| {
            let qkv_role = block.randomized.then_some((FrozenRole::AttentionQkv, n));
            for h in 0..block.heads() {
                add(format!("{prefix}.h{h}.wq"), &block.wq[h], qkv_role);
                add(format!("{prefix}.h{h}.wk"), &block.wk[h], qkv_role);
                add(format!("{prefix}.h{h}.wv"), &block.wv[h], qkv_role);
            }
            add(format!("{prefix}.wz"), &block.wz, None);
        };
        let add_ff = |add: &mut dyn FnMut(String, &Tensor, Option<(FrozenRole, usize)>),
                      prefix: &str,
                      block: &FeedForwardBlock| {
            let role = block.randomized.then_some((FrozenRole::FeedForwardFirst, n));
            add(format!("{prefix}.w1"), &block.w1, role);
            add(format!("{prefix}.b1"), &block.b1, role);
            add(format!("{prefix}.w2"), &block.w2, None);
            add(format!("{prefix}.b2"), &block.b2, None);
        };
        let add_norm = |add: &mut dyn FnMut(String, &Tensor, Option<(FrozenRole, usize)>),
                        prefix: &str,
                        norm: &LayerNormParams| {
            add(format!("{prefix}.gain"), &norm.gain, None);
            add(format!("{prefix}.bias"), &norm.bias, None);
        };

        for (i, layer) in self.encoders.iter().enumerate() {
            let p = format!("enc{i}");
            add_attention(&mut add, &format!("{p}.self"), &layer.self_attn);
            add_norm(&mut add, &format!("{p}.norm1"), &layer.norm1);
            add_ff(&mut add, &format!("{p}.ff"), &layer.ff);
            add_norm(&mut add, &format!("{p}.norm2"), &layer.norm2);
        }
        for (i, layer) in self.decoders.iter().enumerate() {
            let p = format!("dec{i}");
            add_attention(&mut add, &format!("{p}.self"), &layer.self_attn);
            add_norm(&mut add, &format!("{p}.norm1"), &layer.norm1);
            add_attention(&mut add, &format!("{p}.cross"), &layer.cross_attn);
            add_norm(&mut add, &format!("{p}.norm2"), &layer.norm2);
            add_ff(&mut add, &format!("{p}.ff"), &layer.ff);
            add_norm(&mut add, &format!("{p}.norm3"), &layer.norm3);
        }
        add("out.w".into(), &self.out_proj, None);

        (frozen, trainable)
    }

    pub fn frozen_params(&self) -> &[FrozenParam] {
        &self.frozen
    }

    pub fn trainable_params(&self) -> &[TrainableParam] {
        &self.trainable
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.trainable
            .iter()
            .map(|p| (&p.name, &p.tensor))
            .chain(self.frozen.iter().map(|p| (&p.name, &p.tensor)))
            .find(|(n, _)| n.as_str() == name)
            .map(|(_, t)| t)
    }

    /// Redraw every non-pretrained frozen tensor from per-name child
    /// streams of `stream`, so the registry walk order can never affect
    /// the values. Returns the number of tensors redrawn.
    pub fn reinit_frozen(&self, spec: &InitSpec, stream: &SeedStream) -> Result<usize> {
        let redrawable: Vec<&FrozenParam> =
            self.frozen.iter().filter(|p| p.role != FrozenRole::Pretrained).collect();
        if redrawable.is_empty() && self.plan.has_randomized() {
            return Err(CoreError::InvalidConfig(
                "plan expects randomized layers but the frozen registry has none".into(),
            ));
        }
        for p in &redrawable {
            let std = spec.frozen_std(p.role, p.fan_in)?;
            let data = sample_normal(p.tensor.numel(), std, &mut stream.child(&p.name).rng())?;
            p.tensor.set_data(data)?;
        }
        Ok(redrawable.len())
    }

    fn positions_tensor(&self, len: usize) -> Tensor {
        let n = self.config.n;
        Tensor::new([len, n], self.pos_encoding[..len * n].to_vec(), false)
            .expect("positional slice shape")
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len == 0 {
            return Err(CoreError::Data(format!("{what} is empty")));
        }
        if len > self.config.max_len {
            return Err(CoreError::Data(format!(
                "{what} length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Scaled embedding lookup plus the fixed sinusoidal positions.
    fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Tensor> {
        let emb = g.embedding_lookup(&self.embedding, ids)?;
        let scaled = g.scale(&emb, (self.config.n as f64).sqrt())?;
        let positions = self.positions_tensor(ids.len());
        g.add(&scaled, &positions)
    }

    /// Run the encoder stack over a context sequence.
    pub fn encode(&self, g: &mut Graph, context_ids: &[usize]) -> Result<Tensor> {
        self.check_len("context", context_ids.len())?;
        let mask = key_pad_mask(context_ids.len(), context_ids);
        let mut x = self.embed(g, context_ids)?;
        for layer in &self.encoders {
            x = layer.forward(g, &x, mask.as_ref())?;
        }
        Ok(x)
    }

    /// Run the decoder stack over a response prefix given encoder output,
    /// returning next-token logits for every prefix position.
    pub fn decode(
        &self,
        g: &mut Graph,
        enc_out: &Tensor,
        context_ids: &[usize],
        response_prefix_ids: &[usize],
    ) -> Result<Tensor> {
        self.check_len("response prefix", response_prefix_ids.len())?;
        let self_mask = causal_pad_mask(response_prefix_ids);
        let cross_mask = key_pad_mask(response_prefix_ids.len(), context_ids);
        let mut y = self.embed(g, response_prefix_ids)?;
        for layer in &self.decoders {
            y = layer.forward(g, &y, enc_out, Some(&self_mask), cross_mask.as_ref())?;
        }
        g.matmul(&y, &self.out_proj)
    }

    /// Full teacher-forced forward: logits of shape
    /// `[len(response_prefix_ids), vocab_size]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        context_ids: &[usize],
        response_prefix_ids: &[usize],
    ) -> Result<Tensor> {
        let enc_out = self.encode(g, context_ids)?;
        self.decode(g, &enc_out, context_ids, response_prefix_ids)
    }
}

/// `[q_len x key count]` additive mask blocking pad keys, or None when
/// nothing is padded.
fn key_pad_mask(q_len: usize, key_ids: &[usize]) -> Option<Tensor> {
    if key_ids.iter().all(|&id| id != PAD) {
        return None;
    }
    let k_len = key_ids.len();
    let mut data = vec![0.0; q_len * k_len];
    for (j, &id) in key_ids.iter().enumerate() {
        if id == PAD {
            for i in 0..q_len {
                data[i * k_len + j] = MASK_BLOCK;
            }
        }
    }
    Some(Tensor::new([q_len, k_len], data, false).expect("mask shape"))
}

/// Causal mask for decoder self-attention: position i sees keys ≤ i, and
/// pad keys are blocked as well.
fn causal_pad_mask(ids: &[usize]) -> Tensor {
    let len = ids.len();
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in 0..len {
            if j > i || (ids[j] == PAD && j != i) {
                data[i * len + j] = MASK_BLOCK;
            }
        }
    }
    Tensor::new([len, len], data, false).expect("mask shape")
}

/// Fixed sine/cosine position features: even columns sin, odd columns cos,
/// wavelengths geometric in 10000^(2i/n).
fn sinusoidal_encoding(max_len: usize, n: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * n];
    for pos in 0..max_len {
        for j in 0..n {
            let i = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i / n as f64);
            pe[pos * n + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

// ── parameter accounting ────────────────────────────────────────────────

/// The published per-component parameter-count formulas, evaluated
/// verbatim. Note two deliberate quirks preserved from the source: the
/// norm term is `2·n·n` even though a gain+bias layer norm actually has
/// `2·n` parameters, and the attention term is the single-head form.
/// `count_actual_params` reports the as-built ground truth instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaperParamCounts {
    pub attn: u64,
    pub norm: u64,
    pub ff: u64,
    pub rl_attn: u64,
    pub rl_ff: u64,
}

pub fn count_paper_params(n: u64, d_qkv: u64, d_ff: u64, d_r: u64) -> PaperParamCounts {
    PaperParamCounts {
        attn: 4 * n * d_qkv,
        norm: 2 * n * n,
        ff: (n * d_ff + d_ff) + (d_ff * n + n),
        rl_attn: 3 * (n * d_r) + 3 * ((d_r + n) * d_qkv) + d_qkv * d_r + (d_r + d_qkv) * n,
        rl_ff: (n * d_ff + d_ff) + ((d_ff + n) * n + n),
    }
}

/// Exact parameter counts of a built model, split by registry, with a
/// per-component breakdown (component = name prefix before the first dot).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActualParamCounts {
    pub trainable: u64,
    pub frozen: u64,
    pub total: u64,
    /// (component, trainable, frozen) in structure order.
    pub per_component: Vec<(String, u64, u64)>,
}

pub fn count_actual_params(model: &Model) -> ActualParamCounts {
    let mut per: Vec<(String, u64, u64)> = Vec::new();
    let mut bump = |name: &str, count: u64, frozen: bool| {
        let component = name.split('.').next().unwrap_or(name).to_string();
        let slot = match per.iter_mut().find(|(c, _, _)| *c == component) {
            Some(s) => s,
            None => {
                per.push((component, 0, 0));
                per.last_mut().expect("just pushed")
            }
        };
        if frozen {
            slot.2 += count;
        } else {
            slot.1 += count;
        }
    };
    for p in model.trainable_params() {
        bump(&p.name, p.tensor.numel() as u64, false);
    }
    for p in model.frozen_params() {
        bump(&p.name, p.tensor.numel() as u64, true);
    }
    let trainable: u64 = per.iter().map(|(_, t, _)| t).sum();
    let frozen: u64 = per.iter().map(|(_, _, f)| f).sum();
    ActualParamCounts { trainable, frozen, total: trainable + frozen, per_component: per }
}

// ── tests ───────────────────────────────────────────────────────────────
