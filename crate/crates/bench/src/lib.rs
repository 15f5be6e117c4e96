//! Inputs shared by the benchmarks.

use boxttt_core::backbone::tokenizer::{ANSWER_VOCAB_SIZE, BOX_VOCAB_SIZE};
use boxttt_core::{BackboneKind, EngineConfig, Image, ToyBackbone};

/// Toy grounding and answer backbones at the reference vocabularies.
pub fn toy_pair(seed: u64) -> (ToyBackbone, ToyBackbone) {
    (
        ToyBackbone::new(seed, BOX_VOCAB_SIZE, 8, BackboneKind::Grounding).expect("valid toy grounding"),
        ToyBackbone::new(seed + 1, ANSWER_VOCAB_SIZE, 8, BackboneKind::Answer).expect("valid toy answerer"),
    )
}

pub fn image(side: u32) -> Image {
    Image::synthetic(7, side, side).expect("valid synthetic image")
}

/// Default schedule cut to `epochs` mini-epochs.
pub fn engine(epochs: usize) -> EngineConfig {
    EngineConfig { mini_epochs: epochs, ..Default::default() }
}
