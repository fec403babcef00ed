//! Simulation and analytical prediction of identity by descent in a
//! density-regulated spatial Lambda-Fleming-Viot model on a one-dimensional
//! lattice.

pub mod analysis;
pub mod error;
pub mod field;
pub mod model;
pub mod numerics;
pub mod operators;
pub mod pde;
pub mod predict;
pub mod sim;
pub mod snapshot;

pub use error::{AnalysisError, FormatError, ModelError, OperatorError, PdeError, PredictError, SimError};
pub use field::{PopulationField, TypeId};
pub use model::{Boundary, GrowthSpec, ModelParams};
pub use operators::{SiteFunction, WorkingGrid};
