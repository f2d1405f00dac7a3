//! Planar parameterization by elliptic grid generation on truncated
//! hierarchical B-spline spaces, with goal-oriented adaptivity.

pub mod assembly;
pub mod boundary;
pub mod domopt;
pub mod dwr;
pub mod error;
pub mod io;
pub mod linalg;
pub mod optim;
pub mod par;
pub mod quadrature;
pub mod quality;
pub mod solvers;
pub mod splinecore;
pub mod thb;

pub use error::{Error, Result};
