//! Prescribed-mass bound states of the mass-supercritical stationary NLS
//! on compact metric graphs with Kirchhoff vertex conditions.
//!
//! The crate discretizes a compact metric graph with conforming linear
//! elements, solves the Kirchhoff-Laplacian eigenproblem, evaluates the
//! constrained NLS energy and its gradient on the mass sphere, and drives a
//! descending flow that finds constant, positive and sign-changing bound
//! states of prescribed mass. It also computes the closed-form mass
//! thresholds governing the variational regime, audits cone/barrier
//! invariance of trajectories, continues sign-changing branches toward
//! vanishing mass, and ships a small finite-dimensional lab for the abstract
//! invariance framework behind the flow.

pub mod bifurcation;
pub mod cones;
pub mod error;
pub mod flow;
pub mod functional;
pub mod gradient;
pub mod graph_core;
pub mod lab;
pub mod minmax;
pub mod spectrum;
pub mod util;

pub use error::{Error, Result};
pub use graph_core::{build_graph, Discretization, FieldOnGraph, GraphSpec, MetricGraph};
pub use spectrum::{eigenpairs, spectral_gap_indices, SpectralData};
