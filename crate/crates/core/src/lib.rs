//! Rolling-horizon, chance-constrained optimal power flow for active
//! distribution grids that offer frequency-control reserves while staying
//! able to island and serve critical load for 24 hours.

pub mod cli;
pub mod devices;
pub mod error;
pub mod exec;
pub mod grid;
pub mod io;
pub mod mpc;
pub mod opf;
pub mod powerflow;
pub mod reference;
pub mod signal;
pub mod solver;
pub mod uncertainty;

pub use error::{Error, Result};
