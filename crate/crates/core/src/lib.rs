//! Prompt-aware rank selection for low-rank compressed transformers.
//!
//! Projection weights are factorized with activation-whitened SVD into rank-1
//! "experts"; per-matrix routers pick which `K` of the stored experts serve a
//! prompt; a pattern cache reuses those picks for similar prompts; and the
//! execution engine lays the factors out and batches launches so a routed
//! pattern is cheap to run. [`pipeline`] wires it all into stages over a run
//! directory, and the `rankroute` binary exposes those stages.

pub mod checkpoint;
pub mod compress;
pub mod corpus_gen;
pub mod error;
pub mod exec_engine;
pub mod factorizer;
pub mod numerics;
pub mod pattern_cache;
pub mod pipeline;
pub mod rank_experts;
pub mod router;
pub mod routing;
pub mod toy_lm;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rank-experts.md")]
    mod rank_experts {}
    #[doc = include_str!("../../../book/src/budgets.md")]
    mod budgets {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/pattern-cache.md")]
    mod pattern_cache {}
    #[doc = include_str!("../../../book/src/execution.md")]
    mod execution {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
