pub mod conditions;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fx;
pub mod orchestrator;
pub mod procedural;
pub mod raster;
pub mod render;
pub mod seed;
pub mod surface;

pub use error::{Error, Result};
