//! Traffic state estimation with physics-embedded Gaussian processes.
//!
//! The library reconstructs macroscopic traffic state (density, speed) on a
//! regular space-time grid from sparse observations. Covariance kernels
//! embed linearized ARZ and LWR traffic-flow operators; inference uses a
//! sparse variational multi-output GP. Classic baselines (adaptive
//! smoothing, rotated anisotropic GP), error metrics, physics/residual
//! diagnostics, and a synthetic PDE ground-truth generator round out the
//! toolkit so everything is verifiable at desk scale.

pub use nalgebra;

pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod metrics;
pub mod observe;
pub mod physics;
pub mod rng;
pub mod sim;
pub mod standardize;
pub mod svgp;
pub mod traj;

pub use error::{Error, Result};
pub use grid::{Field, SpaceTimeGrid};
pub use observe::{Observation, ObservationSet, Output};
pub use physics::{
    equilibrium_constants, invert_invariants, map_invariants, EquilibriumConstants,
    FundamentalDiagram, PressureLaw,
};
pub use standardize::{CoordMap, Standardizer, TaskScaler};
