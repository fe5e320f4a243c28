//! Hybrid localized spectral decomposition (LSD) for `-div(A∇u) = f` with
//! heterogeneous, possibly high-contrast coefficients.

pub mod coeff;
pub mod error;
pub mod field;
pub mod linalg;
pub mod localize;
pub mod localop;
pub mod mesh;
pub mod pipeline;
pub mod spectral;
pub mod traces;

pub use error::{Error, Result};
