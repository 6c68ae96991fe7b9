//! Spectral CT base-material decomposition with neural fields.
//!
//! Material density maps are represented by a coordinate network (positional
//! encoding followed by an MLP). Training fits the network to measured
//! polychromatic projections through a ray-driven forward model, with
//! hand-written reverse-mode gradients and Adam.

pub mod cli;
pub mod error;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod spectra;
pub mod trainer;

pub use error::{Error, Result};
