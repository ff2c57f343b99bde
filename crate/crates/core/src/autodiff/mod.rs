//! Reverse-mode automatic differentiation on a define-by-run tape.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport, REL_FLOOR};
pub use params::{Bindings, Group, ParamId, ParamSnapshot, ParamStore, Parameter, SnapshotEntry};
pub use tape::{Gradients, Tape, Var};
