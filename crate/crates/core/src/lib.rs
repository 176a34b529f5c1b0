//! Parameter-efficient mixture-of-experts fine-tuning on a small frozen
//! encoder-decoder transformer.
//!
//! Experts are lightweight adapters: (IA)³ rescaling vectors (MoV) or LoRA
//! low-rank pairs (MoLORA). A per-block router mixes them per token, either by
//! soft merging of expert parameters or by discrete top-k selection.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod params;
pub mod optim;
pub mod site;
pub mod stats;
pub mod tape;
pub mod taskgen;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
