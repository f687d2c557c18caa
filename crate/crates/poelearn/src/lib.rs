//! Density learning for planar robots as products of experts over task-space
//! transformations, together with samplers, trackers and coverage planners
//! derived from the learned densities.

pub mod control;
pub mod error;
pub mod experts;
pub mod io;
pub mod kinematics;
pub mod metrics;
pub mod opt;
pub mod poe;
pub mod scenario;
pub mod svg;
pub mod trainer;
pub mod variational;

pub use error::{Error, Result};

/// Entry point used by the `poelearn` binary.
pub fn cli_main() -> i32 {
    eprintln!("command line interface not wired up yet");
    1
}
