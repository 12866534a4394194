//! Tape operations, grouped by kind. All ops are methods on [`Tape`].

mod attention;
mod basic;
mod conv;
mod embed;
mod linalg;
mod norm;
mod reduce;
mod resize;
mod shape;

pub use attention::{attention_memory_bound, AttentionCfg};
pub use conv::conv_out_hw;
