//! Shared fixtures for the benchmark targets: a small model, corpus, and
//! vocabulary at desk dimensions, sized so one iteration is milliseconds.

use paraformer_core::{
    DialogueExample, InitSpec, LayerPlan, Model, ModelConfig, SeedStream, Vocab,
};

pub fn bench_corpus(count: usize) -> Vec<DialogueExample> {
    let words = ["alpha", "bravo", "delta", "echo", "golf", "hotel", "kilo", "lima"];
    (0..count)
        .map(|i| {
            let a = words[i % words.len()].to_string();
            let b = words[(i / words.len()) % words.len()].to_string();
            DialogueExample {
                context: vec![vec![a.clone(), b.clone()]],
                response: vec![b, a],
            }
        })
        .collect()
}

pub fn bench_vocab() -> Vocab {
    Vocab::build(&bench_corpus(64), 1).expect("bench corpus vocabulary")
}

pub fn bench_model(vocab: &Vocab, layers: usize) -> Model {
    let config = ModelConfig {
        vocab_size: vocab.size(),
        n: 32,
        d_qkv: 16,
        d_ff: 64,
        heads: 2,
        layers,
        max_len: 16,
    };
    Model::build(&config, &LayerPlan::alt(layers), &InitSpec::standard_defaults(), 7)
        .expect("bench model")
}

pub fn reinit_stream() -> SeedStream {
    SeedStream::new(7).child("bench-reinit")
}
