//! Reverse-mode differentiation for the network.

pub mod gradcheck;
pub mod scalar;
pub mod suite;
pub mod tape;

pub use gradcheck::{finite_difference_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck};
pub use tape::{Record, Tape};
