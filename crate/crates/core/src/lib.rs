//! Virtual thin slice toolkit: turns thick-slice CT volumes (3-10 mm
//! slice interval) into 1 mm virtual thin-slice volumes with a 3D
//! conditional GAN, and ships the degradation simulator, baselines and
//! image-quality evaluation around it.

pub mod degrade;
pub mod error;
pub mod evalkit;
pub mod inference;
pub mod io;
pub mod manifest;
pub mod nets;
pub mod nn;
pub mod phantom;
pub mod spline;
pub mod train;
pub mod trilinear;
pub mod volume;
pub mod zfilter;

pub use error::{Result, VtsError};
pub use volume::{ValueDomain, Volume};

/// Tool version recorded in provenance sidecars.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
