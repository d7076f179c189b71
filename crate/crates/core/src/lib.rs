//! Structure-preserving finite-difference solver for the Maxwell–Ampère
//! Nernst–Planck equations on periodic two-dimensional grids.

pub mod ampere;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod linsolve;
pub mod model;
pub mod runner;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{CellField, CornerField, FaceField, GridSpec};
