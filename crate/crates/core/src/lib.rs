//! Embedding refinement and matching for few-shot novel instance detection.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod matcher;
pub mod par;
pub mod trainer;

pub use error::{NidsError, Result};
