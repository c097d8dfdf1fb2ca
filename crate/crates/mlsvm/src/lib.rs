//! Multilevel training for nonlinear weighted support vector machines.
//!
//! The pipeline builds per-class k-NN proximity graphs, coarsens them into a
//! hierarchy (AMG-style weighted aggregation or iterative independent sets),
//! trains an exact weighted SVM with full model selection at the coarsest
//! level, then walks back up: support vectors and hyperparameters are
//! inherited, refined level by level, and the training set is partitioned
//! into paired sub-models when it grows too large. The best model across all
//! levels is returned.
//!
//! Entry points live in [`driver`]: [`driver::mlsvm_train`],
//! [`driver::mlsvm_predict`] and [`driver::cross_validate`]. The lower-level
//! building blocks (graph construction, coarsening, the SMO solver, model
//! selection, partitioning, refinement) are public so they can be driven and
//! tested independently.

pub mod coarsen;
pub mod data;
pub mod driver;
pub mod graph;
pub mod model_io;
pub mod modelsel;
pub mod partition;
pub mod qp;
pub mod refine;

mod error;

pub use error::{Error, Result};
