// `!(a < b)` guards are meant to reject NaN as well; quadrature nodes are
// kept at the precision they are published with.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod basis;
pub mod cli;
pub mod data;
pub mod error;
pub mod hazard;
pub mod longitudinal;
pub mod mcmc;
pub mod model;
pub mod simulate;
pub mod spec;
