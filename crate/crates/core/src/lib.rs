pub mod augment;
pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod image;
pub mod loss;
pub mod nn;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
