//! Decoder-only language model over mixed point/text sequences.

pub mod infer;
pub mod model;
pub mod sequence;
pub mod vocab;

pub use infer::{Decoding, GenerateOptions, KvCache};
pub use model::{total_loss, Lm, LmConfig};
pub use sequence::{build_sequence, Sequence};
pub use vocab::Vocab;
