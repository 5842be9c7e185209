//! Prompt language model: a small decoder-only transformer trained on
//! (source, target) prompt pairs and decoded greedily.

mod model;
mod train;

pub use model::{format_pair, strip_prefix, Formatted, PlmArch, PlmModel};
pub use train::{
    canonical_order, corpus_loss, rewrite, sft_loss, sft_train, Decode, PlmConfig, Rewrite, DESK_LR, PAPER_BATCH,
    PAPER_LR, PAPER_MAX_LEN,
};
