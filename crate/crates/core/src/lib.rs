// Negated comparisons deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod dataio;
pub mod error;
pub mod evalcli;
pub mod grid;
pub mod model;
pub mod numcore;
pub mod peft;
pub mod train;

pub use error::{Error, Result};
