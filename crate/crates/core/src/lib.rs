//! Hybrid sparse masked image modeling for 3D volumes.
//!
//! A CNN and a transformer encode one masked volume. The CNN runs
//! submanifold sparse convolutions on the visible voxels of a bottom-up mask
//! pyramid ([`mask`], [`sparse`]), the transformer sees one token per visible
//! junction cell ([`encoder`]), and a decoder with per-scale mask embeddings
//! reconstructs the hidden patches ([`decoder`], [`model`]).
//!
//! [`pretrain`] and [`finetune`] hold the training loops, [`checkpoint`] and
//! [`volume`] the file formats, and [`oracle`] and [`verify`] the reference
//! implementations the sparse path is checked against.

mod error;
mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub mod config;
pub mod mask;
pub mod params;
pub mod sparse;

pub mod decoder;
pub mod encoder;
pub mod model;

pub mod dataset;
pub mod phantom;
pub mod volume;

pub mod checkpoint;
pub mod finetune;
pub mod optim;
pub mod pretrain;

pub mod ablation;
pub mod oracle;
pub mod verify;
