//! Encoder-decoder transformer, teacher-forced forward pass and decoding.

mod config;
mod decode;
mod transformer;

pub use config::{ModelConfig, NormOrder};
pub use decode::{beam_search_with, greedy_with, length_penalty, DecodeConfig, ModelScorer, StepScorer};
pub(crate) use transformer::LinearKind;
pub use transformer::{parameter_shapes, AdapterState, Dropout, Encoded, TransformerModel, BOS, EOS, PAD, UNK};
