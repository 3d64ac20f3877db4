pub mod accounting;
pub mod backbone;
pub mod data;
pub mod decoder;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub type EsfpNetF32 = model::EsfpNet<f32>;
pub type EsfpNetF64 = model::EsfpNet<f64>;
