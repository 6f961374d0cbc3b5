//! Small-noise exit from an unstable critical point whose linearization is a
//! single Jordan block: closed-form linear algebra, the limiting laws of exit
//! time and location, path simulation and the statistics used to compare the
//! two.

pub mod conjugation;
pub mod error;
pub mod linalg;
pub mod model;
pub mod records;
pub mod simulate;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::{CovarianceMatrix, JordanBlock};
pub use model::{Problem, ProblemSpec};
