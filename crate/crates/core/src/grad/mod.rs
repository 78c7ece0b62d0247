//! Reverse-mode differentiation for the reordering pipeline and a
//! finite-difference verifier.

pub mod check;
pub mod tape;

pub use check::{
    central_differences, differences, finite_diff_check, finite_diff_check_with, relative_error, FdReport, Stencil,
    DEFAULT_STEP, EXTRAPOLATED_STEP, REL_ERROR_FLOOR,
};
pub use tape::{Gradients, ParamGroup, ParamId, Tape, Var};
