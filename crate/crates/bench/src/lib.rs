//! Benchmark fixtures.

use auprompt::data::synth_generate;
use auprompt::{Checkpoint, EmbeddingSequence, ModelConfig, ModelParams, Role, SynthSpec};

/// A default-sized corpus with an untrained model; training is not needed for timing.
pub struct Fixture {
    pub sources: Vec<EmbeddingSequence>,
    pub targets: Vec<EmbeddingSequence>,
    pub checkpoint: Checkpoint,
}

pub fn fixture(seed: u64) -> Fixture {
    let corpus = synth_generate(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .expect("default corpus is valid");
    let config = ModelConfig::new(corpus.prompts.dim(), corpus.prompts.len(), corpus.spec.n_classes);
    let params = ModelParams::init(config, seed).expect("default model is valid");
    Fixture {
        sources: corpus.sequences(Role::Source),
        targets: corpus.sequences(Role::Target),
        checkpoint: Checkpoint::new(params, corpus.prompts).expect("prompt count matches"),
    }
}
