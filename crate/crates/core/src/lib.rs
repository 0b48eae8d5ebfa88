//! Local, deterministic two-station model whose weighted correlations equal
//! the singlet correlations `−cos(b − a)`.
//!
//! The crate is organized bottom-up:
//!
//! - [`prng`]: SplitMix64 hidden-state sequence shared by both stations
//! - [`model`]: observables, local weights, transport maps
//! - [`quadrature`]: deterministic evaluation of the model's integrals
//! - [`station`]: one measurement party and its record files
//! - [`protocol`]: wire messages, transports and the run coordinator
//! - [`analysis`]: estimators, inequality checks and reports

pub mod analysis;
pub mod model;
pub mod prng;
pub mod protocol;
pub mod quadrature;
pub mod station;

pub use model::{Angle, HiddenState, Role, Sign};
