//! # hyperlora
//!
//! Zero-shot dialect adaptation at desk scale. A small hypernetwork maps a
//! dialect's typological feature vector to low-rank (LoRA) adapters on the
//! query and value projections of a frozen transformer encoder. The
//! hypernetwork is trained on parallel standard / pseudo-dialect corpora to
//! minimise the debiased Sinkhorn divergence between the two token
//! representation clouds, then generates adapters for dialects it never saw.
//!
//! | Module | What it holds |
//! |--------|---------------|
//! | [`typology`] | feature vectors, Manhattan distance, coverage, source selection |
//! | [`transform`] | miniature rule catalog and pseudo-dialect corpus generation |
//! | [`encoder`] | frozen encoder with LoRA injection points |
//! | [`hypernet`] | the two MLPs producing down- and up-projections |
//! | [`ot`] | log-domain Sinkhorn, Sinkhorn divergence, exact transport |
//! | [`grad`] | reverse-mode tape and the training loss gradient |
//! | [`trainer`] | hypernetwork-only training loop with checkpoints |
//! | [`eval`] | alignment / probe evaluation, paired bootstrap, source sweeps |
//!
//! The runnable programs in `examples/` walk through each of these.

pub mod audit;
pub mod checkpoint;
pub mod encoder;
mod error;
pub mod eval;
pub mod grad;
pub mod hypernet;
pub mod kernels;
pub mod ot;
pub mod trainer;
pub mod transform;
pub mod typology;

pub use error::{Error, Result};
