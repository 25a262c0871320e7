//! Linear-quadratic control of a system whose linear dynamics are one of
//! finitely many known regimes, with the active regime learned from noisy
//! observations.
//!
//! - [`regime`]: ensembles, beliefs, entropy.
//! - [`riccati`]: per-regime Riccati equations.
//! - [`filter`]: regime-belief filtering.
//! - [`closedloop`]: Monte Carlo closed-loop simulation.
//! - [`bellman`]: candidate value functions and their Bellman residuals.

// `!(a < b)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bellman;
pub mod closedloop;
pub mod error;
pub mod filter;
pub mod fleet;
pub mod linalg;
pub mod regime;
pub mod riccati;

pub use bellman::{Classification, FeedbackCertificate, ValueKind, ValueSpec};
pub use closedloop::{OpenLoopTable, Policy, PolicyView, SimConfig, SimRun};
pub use error::{Error, Result};
pub use filter::{EntropyLedger, FilterState, ObservationPath};
pub use regime::{entropy, Belief, Diagnostic, HyperState, LinearRegime, RegimeEnsemble};
pub use riccati::{RiccatiOptions, RiccatiSolution};

pub use nalgebra::{DMatrix, DVector};
