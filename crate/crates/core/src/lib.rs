pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod preproc;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
