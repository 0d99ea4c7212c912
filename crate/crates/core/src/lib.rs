//! Sequence-to-sequence transformer in which selected layers keep frozen,
//! randomly drawn weights that are redrawn at the start of every training
//! epoch, while the remaining parameters train normally.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: a tape-based reverse-mode autodiff core over row-major
//!   2-D `f64` tensors;
//! - [`rng`]: labeled, splittable deterministic seed streams;
//! - [`init`]: the frozen-weight initialization families and their
//!   variance rules;
//! - [`data`]: dialogue corpus loading, vocabulary, and batching;
//! - [`model`]: the encoder–decoder with per-layer randomization plans
//!   and the frozen/trainable parameter registries.

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod init;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{CoreError, Result};
pub use init::{init_frozen_layer, kaiming_std, sample_normal, std_normal_init, FrozenRole, InitSpec};
pub use metrics::{
    coherence_score, distinct_n, diversity_report, CoherenceScorer, ConstantScorer,
    DiversityReport, LexicalOverlapScorer,
};
pub use model::{
    count_actual_params, count_paper_params, ActualParamCounts, AttentionBlock, DecoderLayer,
    EmbeddingInit, EncoderLayer, FeedForwardBlock, FrozenParam, LayerPlan, Model, ModelConfig,
    PaperParamCounts, TrainableParam,
};
pub use rng::SeedStream;
pub use tensor::{finite_diff_check, Graph, Tensor, TensorId};

pub use data::{Batch, DialogueExample, Vocab, BOS, EOS, PAD, SEP, UNK};
pub use checkpoint::{load_checkpoint, load_vocab, save_checkpoint, save_vocab, LoadedCheckpoint};
pub use decode::{
    apply_temperature, beam_search, generate, read_generations, top_k_filter, top_p_filter,
    write_generations, DecodeConfig, DecodeStrategy, GenerationRecord,
};
pub use training::{evaluate_loss, fit, fit_with_state, train_epoch, AdamState, EpochStats, TrainConfig};
