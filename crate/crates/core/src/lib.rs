//! Layer pruning for residual networks driven by centered kernel alignment.
//!
//! A trained residual classifier is pruned one block at a time: every
//! removable block is tentatively dropped, the penultimate representation of
//! the shallower net is compared with that of the intact net by CKA, and the
//! block whose absence changes the representation least is removed for good.
//! The net is then fine-tuned and the loop repeats.
//!
//! Module map:
//!
//! - [`linalg`]: dense matrices, Gram matrices and centering.
//! - [`similarity`]: HSIC, CKA and the layer score `1 − CKA`.
//! - [`network`]: residual MLPs, block removal, FLOP/parameter counts,
//!   checkpoints.
//! - [`training`]: datasets, SGD training and evaluation.
//! - [`pruner`]: the iterative CKA pruning loop, ℓ1 filter pruning, the
//!   random-layer baseline and the brute-force oracle ranking.
//! - [`evaluation`]: latency, FGSM, synthetic corruptions, CO2 estimates.
//! - [`experiment`]: config-driven pipelines behind the `toolkit` CLI.

pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod linalg;
pub mod network;
pub mod pruner;
pub mod rng;
pub mod similarity;
pub mod training;

pub use error::{Error, Result};
pub use linalg::{GramMatrix, Matrix};
pub use network::{ArchSpec, BlockId, FlopCount, ResidualNet, StageCap};
pub use similarity::{KernelKind, SimilarityScore};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/similarity.md")]
    mod similarity {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/toolkit.md")]
    mod toolkit {}
}
