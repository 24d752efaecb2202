//! Keyword spotting on raw audio with an elastic Conv1D supernet.

// `!(x > 0.0)` rejects NaN; slices take one range per axis.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::single_range_in_vec_init)]

pub mod audio;
pub mod binio;
pub mod cost;
pub mod data;
pub mod error;
pub mod mfcc;
pub mod prepare;
pub mod quant;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
