//! Differential attention for fine-tuning a toy vision-language transformer.
//!
//! The crate contains a small reverse-mode autodiff engine, vanilla and
//! differential attention kernels, pre-norm transformer blocks, low-rank
//! adapters, a desk-scale image-encoder/text-decoder model, an Adam
//! fine-tuning loop with a binary checkpoint format, and two evaluation
//! harnesses: VQA consensus scoring and a needle-in-a-haystack grid probe.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imaging;
pub mod io;
pub mod lora;
pub mod par;
pub mod params;
pub mod rng;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vlm;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, ParamVars};
pub use tape::{Tape, Var};
pub use tensor::{Float, Tensor};
