pub mod bsseval;
pub mod dsp;
pub mod datapipe;
pub mod error;
pub mod fixtures;
pub mod labels;
pub mod model;
pub mod separator;
pub mod trainer;

pub use error::{Error, Result};
