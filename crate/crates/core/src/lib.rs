pub mod backbone;
pub mod complexity;
pub mod config;
pub mod cues;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scenes;
pub mod text;
pub mod train;

pub use error::{Error, Result};
