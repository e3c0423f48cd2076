//! Chord measures of convex bodies and the Gauss curvature flow that solves
//! the associated Minkowski problem.

pub mod body;
pub mod chord;
pub mod ellipsoid_space;
pub mod error;
pub mod flow;
pub mod sphere;
pub mod validation;

pub use error::{Error, Result};
