//! Sparse encoder attention for long inputs.
//!
//! The crate is organised around four modules:
//!
//! * [`numerics`]: a small dense tensor type with a reverse-mode tape and a
//!   finite-difference gradient checker.
//! * [`attention`]: relative position bucketing, packing-aware masks, the dense
//!   oracle and the banded local / transient-global kernels.
//! * [`model`]: a toy encoder-decoder built on those kernels, with an Adam
//!   trainer, greedy decoding and a binary checkpoint format.
//! * [`psg`]: principle-sentence selection, span corruption and sequence
//!   packing for building pre-training examples.
//!
//! [`verify`] bundles the invariant suites that the command-line tool exposes.

pub mod attention;
pub mod container;
mod error;
pub mod model;
pub mod numerics;
pub mod psg;
pub mod verify;

pub use attention::{AttentionConfig, AttentionMask, AttentionMode, BiasKind, BiasTable, PackedBatch};
pub use error::{Error, Result};
pub use model::{Checkpoint, Model, ModelConfig, Seq2SeqBatch};
pub use numerics::{Real, Tape, Tensor, Var};
pub use psg::{Document, SentenceScore, Seq2SeqExample, Vocab};
