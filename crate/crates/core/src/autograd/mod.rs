//! Tape-based reverse-mode differentiation.

pub mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport, Stencil};
pub use graph::{Gradients, Graph, Kinks, Mode, Var};
pub use params::{uniform, uniform_init, ParamId, ParamKind, ParamStore};
