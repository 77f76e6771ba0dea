//! Constrained network flow problems and the projected dynamics that solve them.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`] – incidence matrix, Laplacian and the edge-coordinate transform.
//! * [`problem`] – the constrained flow problem, feasibility checks and KKT residuals.
//! * [`oracle`] – an independent dual-bisection solver used as ground truth.
//! * [`dynamics`] – networked, droop-form, edge primal-dual and node primal-dual
//!   vector fields plus a projected forward-Euler integrator.
//! * [`analysis`] – closed-form synchronous frequency, the edge eigen-split and
//!   cross-coordinate KKT checks.
//! * [`scenario`], [`runner`], [`verify`] – scenario files, segmented load-step
//!   simulation and the randomized property harness behind the CLI.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dynamics;
pub mod error;
pub mod graph;
pub mod oracle;
pub mod problem;
pub mod random;
pub mod runner;
pub mod scenario;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{EdgeTransform, NetworkGraph};
pub use problem::{ActiveSets, FlowProblem, KktPoint, KktResiduals};
