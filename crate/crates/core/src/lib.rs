//! Drifted internal DLA, the unfair divisible sandpile and the continuum
//! parabolic obstacle problem whose non-coincidence set is their common
//! scaling limit, a bounded "true heat ball".

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod continuum;
pub mod error;
pub mod idla;
pub mod io;
pub mod lattice;
pub mod sandpile;
pub mod walks;

pub use error::{Error, Result};
pub use lattice::{ClusterSet, LatticeBox, MassField, ModelParams, Site, StepLaw, Variant};
