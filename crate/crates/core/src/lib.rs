//! Desk-scale prompt optimization for abstract concepts.
//!
//! A small prompt-rewriting language model learns to replace abstract
//! concepts ("peace") with concrete objects ("dove", "olive_branch"), and a
//! conditional diffusion model over a synthetic embedding space is then
//! fine-tuned with reward feedback so its samples match both the original
//! and the rewritten prompt.

pub mod autodiff;
pub mod diffusion;
pub mod eval;
mod error;
pub mod gradcheck;
pub mod lexicon;
pub mod plm;
pub mod refl;
pub mod reward;
pub mod seed;
pub mod textworld;

pub use error::{Error, Result};
