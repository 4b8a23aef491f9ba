//! Random-sampling (RS-Win) and important-region (IR-Win) window attention
//! inside a hierarchical vision transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors with a tape-based reverse-mode autodiff engine.
//! - [`permwin`]: sample maps, permutation plans, window partition/reverse.
//! - [`attention`]: window MSA, RS-Win, IR-Win and the two-group RSIR-Win layer.
//! - [`backbone`]: the four-stage model, parameter and FLOP accounting.
//! - [`harness`]: data, AdamW, cosine schedule, checkpoints, training, bench, inspect.
//!
//! Runnable walkthroughs for each piece live under `examples/`.

pub mod attention;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod permwin;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeedRng;
pub use tensor::{Element, ParamStore, Tape, Tensor, Var};
