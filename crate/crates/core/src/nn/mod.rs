//! Neural transition parser: parameter store, autodiff tape, and the
//! encoder/decoder model.

pub mod checkpoint;
pub mod model;
pub mod params;
pub mod tape;

pub use model::{BatchExample, Decoded, Parser, ParserConfig, WordVocab, UNK_WORD_ID};
pub use params::{
    adam_step, name_seed, AdamState, GradStore, Init, ParamId, ParamStore, Partition, Tensor,
    TrainMask, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
pub use tape::{softmax_values, NodeId, Tape};
