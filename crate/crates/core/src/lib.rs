//! Upcycle a dense decoder-only language model into a Mixture-of-Experts,
//! teach the new experts an expanded language while the original FFN stays
//! frozen, then review the router with a language-prior routing loss.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: define-by-run reverse-mode graph over `f64` matrices,
//!   Adam with a trainability mask, cosine schedule, finite-difference oracle.
//! - [`model`]: pre-norm transformer with MoE FFN slots and routing traces.
//! - [`upcycle`]: dense to MoE surgery, stage masks, checkpoint format.
//! - [`objectives`]: next-token, load-balancing and LPR losses.
//! - [`data`]: byte tokenizer, tagged corpora, batching and mixing.
//! - [`pipeline`]: stage trainer, evaluation, routing statistics and the
//!   forgetting experiment.

pub mod autodiff;
pub mod data;
mod error;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod upcycle;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/upcycling.md")]
    mod upcycling {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
