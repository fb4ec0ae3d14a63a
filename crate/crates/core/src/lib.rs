//! Causal decomposition of outcome disparities between two groups under a
//! partition of covariates into outcome-allowable, target-allowable and
//! non-allowable sets.

pub mod data;
pub mod dgp;
pub mod dist;
pub mod error;
pub mod estimator;
pub mod fixtures;
pub mod gformula;
pub mod nuisance;
pub mod partition;
pub mod quadrature;
pub mod reductions;
pub mod weights;

pub use data::{CohortTable, Column};
pub use dist::{FiniteJoint, VariableSpec};
pub use error::{Error, Result};
pub use gformula::{Backend, DecompositionEstimate, Factorization};
pub use partition::{AllowabilityPartition, RoleBindings, Standardization};
