//! Experiment configuration: a flat `key = value` file format with
//! section prefixes (`model.n`, `init.kind`, `train.lr`, ...), two
//! built-in profiles, and a canonical serialization that reports embed so
//! any run can be reproduced from its own header.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use paraformer_core::{
    CoreError, DecodeConfig, DecodeStrategy, InitSpec, LayerPlan, ModelConfig, Result, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    fn as_str(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "markdown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Small dimensions for single-machine experiments and tests.
    Desk,
    /// The published architecture dimensions. Training at this scale on a
    /// laptop is possible but slow; no result reproduction is implied.
    Paper,
}

#[derive(Debug, Clone)]
pub struct ModelDims {
    pub n: usize,
    pub d_qkv: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Whether the config file set the seed (flags and the environment
    /// fall back in a fixed order).
    pub seed_from_config: bool,
    pub dims: ModelDims,
    pub plan: String,
    pub init_kind: String,
    pub sigma_sa: f64,
    pub sigma_ff: f64,
    pub gain_sa: f64,
    pub gain_ff: f64,
    pub freeze_embedding: bool,
    pub train: TrainConfig,
    pub decode_strategy: String,
    pub temperature: f64,
    pub k: usize,
    pub p: f64,
    pub width: usize,
    pub max_new_tokens: usize,
    pub reinit_per_context: bool,
    pub min_count: usize,
    pub eval_fraction: f64,
    /// Number of decode seeds that sweep rows average metrics over.
    pub decode_seeds: usize,
    pub corpus: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = ExperimentConfig {
            seed: 0,
            seed_from_config: false,
            dims: ModelDims { n: 24, d_qkv: 12, d_ff: 48, heads: 2, layers: 2, max_len: 16 },
            plan: "alt".into(),
            init_kind: "standard".into(),
            sigma_sa: 0.01,
            sigma_ff: 0.05,
            gain_sa: 2.5,
            gain_ff: 1.5,
            freeze_embedding: false,
            train: TrainConfig { epochs: 8, batch_size: 8, lr: 0.002, ..TrainConfig::default() },
            decode_strategy: "greedy".into(),
            temperature: 1.0,
            k: 10,
            p: 0.9,
            width: 5,
            max_new_tokens: 12,
            reinit_per_context: true,
            min_count: 1,
            eval_fraction: 0.1,
            decode_seeds: 1,
            corpus: None,
            vectors: None,
            checkpoint: None,
            out: None,
            format: ReportFormat::Csv,
        };
        match profile {
            Profile::Desk => base,
            Profile::Paper => ExperimentConfig {
                dims: ModelDims { n: 300, d_qkv: 128, d_ff: 2048, heads: 4, layers: 6, max_len: 64 },
                train: TrainConfig { epochs: 30, batch_size: 32, lr: 0.0006, ..TrainConfig::default() },
                max_new_tokens: 32,
                min_count: 2,
                ..base
            },
        }
    }

    // ── file parsing ────────────────────────────────────────────────────

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut seen: HashSet<String> = HashSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let line = match raw_line.find('#') {
                Some(pos) => &raw_line[..pos],
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CoreError::InvalidConfig(format!(
                    "config line {}: expected `key = value`, got {line:?}",
                    idx + 1
                ))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(CoreError::InvalidConfig(format!(
                    "config line {}: duplicate key {key}",
                    idx + 1
                )));
            }
            self.apply_key(key, value).map_err(|e| {
                CoreError::InvalidConfig(format!("config line {}: {e}", idx + 1))
            })?;
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
            value.parse().map_err(|_| {
                CoreError::InvalidConfig(format!("{key}: cannot parse {value:?} as {kind}"))
            })
        }
        let usize_of = |v: &str| parse::<usize>(key, v, "an integer");
        let f64_of = |v: &str| parse::<f64>(key, v, "a number");
        let bool_of = |v: &str| parse::<bool>(key, v, "true or false");
        match key {
            "seed" => {
                self.seed = parse::<u64>(key, value, "an integer")?;
                self.seed_from_config = true;
            }
            "model.n" => self.dims.n = usize_of(value)?,
            "model.d_qkv" => self.dims.d_qkv = usize_of(value)?,
            "model.d_ff" => self.dims.d_ff = usize_of(value)?,
            "model.heads" => self.dims.heads = usize_of(value)?,
            "model.layers" => self.dims.layers = usize_of(value)?,
            "model.max_len" => self.dims.max_len = usize_of(value)?,
            "plan" => self.plan = value.to_string(),
            "init.kind" => match value {
                "standard" | "kaiming" => self.init_kind = value.to_string(),
                other => {
                    return Err(CoreError::InvalidConfig(format!(
                        "init.kind must be standard or kaiming, got {other:?}"
                    )))
                }
            },
            "init.sigma_sa" => self.sigma_sa = f64_of(value)?,
            "init.sigma_ff" => self.sigma_ff = f64_of(value)?,
            "init.gain_sa" => self.gain_sa = f64_of(value)?,
            "init.gain_ff" => self.gain_ff = f64_of(value)?,
            "init.freeze_embedding" => self.freeze_embedding = bool_of(value)?,
            "train.epochs" => self.train.epochs = usize_of(value)?,
            "train.batch_size" => self.train.batch_size = usize_of(value)?,
            "train.lr" => self.train.lr = f64_of(value)?,
            "train.beta1" => self.train.beta1 = f64_of(value)?,
            "train.beta2" => self.train.beta2 = f64_of(value)?,
            "train.eps" => self.train.eps = f64_of(value)?,
            "train.reinit_each_epoch" => self.train.reinit_each_epoch = bool_of(value)?,
            "decode.strategy" => self.decode_strategy = value.to_string(),
            "decode.temperature" => self.temperature = f64_of(value)?,
            "decode.k" => self.k = usize_of(value)?,
            "decode.p" => self.p = f64_of(value)?,
            "decode.width" => self.width = usize_of(value)?,
            "decode.max_new_tokens" => self.max_new_tokens = usize_of(value)?,
            "decode.reinit_per_context" => self.reinit_per_context = bool_of(value)?,
            "data.min_count" => self.min_count = usize_of(value)?,
            "data.eval_fraction" => self.eval_fraction = f64_of(value)?,
            "sweep.decode_seeds" => self.decode_seeds = usize_of(value)?,
            "paths.corpus" => self.corpus = Some(PathBuf::from(value)),
            "paths.vectors" => self.vectors = Some(PathBuf::from(value)),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "paths.out" => self.out = Some(PathBuf::from(value)),
            "report.format" => match value {
                "csv" => self.format = ReportFormat::Csv,
                "markdown" => self.format = ReportFormat::Markdown,
                other => {
                    return Err(CoreError::InvalidConfig(format!(
                        "report.format must be csv or markdown, got {other:?}"
                    )))
                }
            },
            other => {
                return Err(CoreError::InvalidConfig(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    // ── resolution into core types ──────────────────────────────────────

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            n: self.dims.n,
            d_qkv: self.dims.d_qkv,
            d_ff: self.dims.d_ff,
            heads: self.dims.heads,
            layers: self.dims.layers,
            max_len: self.dims.max_len,
        }
    }

    pub fn layer_plan(&self) -> Result<LayerPlan> {
        LayerPlan::from_name(&self.plan, self.dims.layers)
    }

    pub fn init_spec(&self) -> Result<InitSpec> {
        let spec = match self.init_kind.as_str() {
            "standard" => InitSpec::StandardNormal { sigma_sa: self.sigma_sa, sigma_ff: self.sigma_ff },
            "kaiming" => InitSpec::ScalableKaiming { gain_sa: self.gain_sa, gain_ff: self.gain_ff },
            other => {
                return Err(CoreError::InvalidConfig(format!("unknown init kind {other:?}")))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        let strategy = match self.decode_strategy.as_str() {
            "greedy" => DecodeStrategy::Greedy,
            "temperature" => DecodeStrategy::Temperature { t: self.temperature },
            "topk" => DecodeStrategy::TopK { k: self.k, t: self.temperature },
            "topp" => DecodeStrategy::TopP { p: self.p, t: self.temperature },
            "beam" => DecodeStrategy::Beam { width: self.width },
            other => {
                return Err(CoreError::InvalidConfig(format!(
                    "unknown decode strategy {other:?} (expected greedy, temperature, topk, topp, or beam)"
                )))
            }
        };
        let cfg = DecodeConfig {
            strategy,
            max_new_tokens: self.max_new_tokens,
            seed: self.seed,
            reinit_per_context: self.reinit_per_context,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.init_spec()?;
        self.layer_plan()?;
        self.train.validate()?;
        self.decode_config()?;
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "data.eval_fraction must be in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        if self.decode_seeds == 0 {
            return Err(CoreError::InvalidConfig("sweep.decode_seeds must be positive".into()));
        }
        Ok(())
    }

    // ── canonical form ──────────────────────────────────────────────────

    /// Deterministic serialization of everything that affects results
    /// (paths excluded). Reports embed this and hash it.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let d = &self.dims;
        let t = &self.train;
        for (key, value) in [
            ("seed", self.seed.to_string()),
            ("model.n", d.n.to_string()),
            ("model.d_qkv", d.d_qkv.to_string()),
            ("model.d_ff", d.d_ff.to_string()),
            ("model.heads", d.heads.to_string()),
            ("model.layers", d.layers.to_string()),
            ("model.max_len", d.max_len.to_string()),
            ("plan", self.plan.clone()),
            ("init.kind", self.init_kind.clone()),
            ("init.sigma_sa", self.sigma_sa.to_string()),
            ("init.sigma_ff", self.sigma_ff.to_string()),
            ("init.gain_sa", self.gain_sa.to_string()),
            ("init.gain_ff", self.gain_ff.to_string()),
            ("init.freeze_embedding", self.freeze_embedding.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.reinit_each_epoch", t.reinit_each_epoch.to_string()),
            ("decode.strategy", self.decode_strategy.clone()),
            ("decode.temperature", self.temperature.to_string()),
            ("decode.k", self.k.to_string()),
            ("decode.p", self.p.to_string()),
            ("decode.width", self.width.to_string()),
            ("decode.max_new_tokens", self.max_new_tokens.to_string()),
            ("decode.reinit_per_context", self.reinit_per_context.to_string()),
            ("data.min_count", self.min_count.to_string()),
            ("data.eval_fraction", self.eval_fraction.to_string()),
            ("sweep.decode_seeds", self.decode_seeds.to_string()),
            ("report.format", self.format.as_str().to_string()),
        ] {
            s.push_str(key);
            s.push_str(" = ");
            s.push_str(&value);
            s.push('\n');
        }
        s
    }

    pub fn config_hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical().as_bytes()))
    }
}

/// FNV-1a, used instead of the stdlib hasher because report hashes must
/// stay stable across toolchain versions.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
