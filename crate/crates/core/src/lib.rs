pub mod audio;
pub mod camera;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod morphable;
pub mod motiongen;
pub mod nn;
pub mod renderer;
pub mod splat;
pub mod training;
pub mod tape;

pub use error::{Error, Result};
