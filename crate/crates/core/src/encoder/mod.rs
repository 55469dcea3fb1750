//! The hybrid encoder: a sparse CNN over the fine scales and a transformer
//! over the unmasked junction cells.

pub mod cnn;
pub mod vit;

pub use cnn::encode_cnn;
pub use vit::{patchify, unpatchify, vit_encode, TokenSequence};
