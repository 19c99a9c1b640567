//! Sequential passivity verification and passivating controller synthesis
//! for cascade interconnections of linear subsystems.

// `!(x >= tol)` is used on purpose: NaN must fail every acceptance test.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blockla;
pub mod cli;
pub mod fixtures;
pub mod lmi;
pub mod model;
pub mod oracle;
pub mod protocol;
