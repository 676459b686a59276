//! Partial-order resolution: recovering the actual firing order of the
//! eight taps of each carry cell from which bins produce hits.

mod dag;
mod library;
mod state;
mod unit;

pub use dag::{build_dag, enumerate_consistent, select_candidate, PartialOrderDag};
pub use library::{build_error_library, expected_pattern, ErrorLibrary};
pub use state::{por_iteration, Ansatz, PorParams, PorState, PorStep, UnitState};
pub use unit::{UnitMask, UnitOrder};
