//! Simulation and calibration of FPGA carry-chain time-to-digital converters
//! whose tapped delay lines exhibit bubbles: partial-order resolution of the
//! bin ordering, interleaving of several lines, linearity metrics and
//! time-interval measurement.

pub mod calib;
pub mod density;
pub mod encoder;
pub mod error;
pub mod iti;
pub mod model;
pub mod phase;
pub mod pipeline;
pub mod por;
pub mod seed;
pub mod ti;

pub use error::{Error, Result};
