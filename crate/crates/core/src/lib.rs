//! Simulation core for a three-mode microwave–optical transducer driven
//! through a dark state, plus the ¹⁶⁷Er:Y₂SiO₅ spin Hamiltonian used to pick
//! clock transitions for it.

pub mod error;
pub mod experiments;
pub mod lindblad;
pub mod opalg;
pub mod protocol;
pub mod spinham;

pub use error::{Error, Result};
pub use opalg::{DensityMatrix, ModeSpace, Operator, C64};
