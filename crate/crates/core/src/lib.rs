//! Continuous-depth networks parameterized by Hamiltonian particle ensembles.
//!
//! The weights `θ(t)` of an UpDown vector field are not optimized directly.
//! They are recovered at every instant from a small set of (position,
//! momentum) particles that evolve by Hamilton's equations, so only the
//! particles' initial conditions are learned.

pub mod autodiff;
pub mod datasets;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod integrator;
pub mod objective;
pub mod parameterizations;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Activation, Tape, Var};
pub use error::{Error, Result, ShapeError};
pub use tensor::Tensor;
