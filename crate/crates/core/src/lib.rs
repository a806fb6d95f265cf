//! Boundary-sharp monocular depth estimation at desk scale.

pub mod cli;
pub mod data;
pub mod depth_geometry;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
