//! Training networks with discrete weights as a discrete-time optimal control
//! problem: forward states, backward co-states, and layer-wise maximization
//! of the Hamiltonian.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod msa;
pub mod propagation;

pub use error::{Error, Result, Shape};
pub use layers::{ActivationKind, Layer, Mode, Network};
pub use linalg::{Matrix, Vector};
