//! Hyperbolic selective state-space sequential recommender.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod lorentz;
pub mod metrics;
pub mod model;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use lorentz::{Curvature, LorentzPoint, TangentVector, Tolerance};
pub use tensor::Tensor;
