//! Line outage detection and localization from voltage phasor streams.
//!
//! [`grid`] builds admittance models, [`gaussmodel`] turns them into Gaussian
//! models over stacked voltage coordinates, [`detector`] runs the Bayesian
//! change-point test, [`localizer`] finds the out-of-service branches and
//! [`simgen`] synthesizes measurement streams.

pub mod detector;
pub mod error;
pub mod gaussmodel;
pub mod grid;
pub mod localizer;
pub mod rng;
pub mod simgen;

pub use error::{Error, Result};
