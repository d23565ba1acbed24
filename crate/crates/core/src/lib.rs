// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assign;
mod binio;
pub mod data;
pub mod error;
pub mod geom;
pub mod infer;
pub mod net;
pub mod numeric;
pub mod pipeline;
pub mod selftrain;
pub mod text;
pub mod train;

pub use error::{Error, Result};
