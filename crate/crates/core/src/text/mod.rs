//! Tokenizer and causal text encoder.

pub mod encoder;
pub mod vocab;

pub use encoder::{param_checksum, EncoderMode, PretrainConfig, TextEncoder, TextEncoderConfig};
pub use vocab::{build_vocab, normalize, TokenSeq, VocabConfig, Vocabulary, EOS, PAD, SOS};
