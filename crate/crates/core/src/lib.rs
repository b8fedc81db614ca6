//! Directed random walks on the backbone of supercritical oriented
//! percolation.
//!
//! The crate computes exact quenched laws of the walk for a fixed sampled
//! environment, Monte Carlo annealed laws, prefactor fields (the density of
//! the invariant measure for the environment seen from the particle), and a
//! suite of diagnostics comparing these objects.

pub mod annealed;
pub mod cluster;
pub mod environment;
pub mod experiments;
pub mod error;
pub mod geometry;
pub mod rng;
pub mod measures;
pub mod prefactor;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
pub use geometry::{Boundary, BoxPartition, Grid, SpaceTimePoint, SpatialBox};
