pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod hgsa;
pub mod kan;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod train;


pub use error::{Error, Result};
pub use tensor::{Parameters, Tensor};
