//! Multi-task facial attribute prediction (age, gender, ethnicity) from masked faces.
//!
//! The crate is generic over the element type through [`Scalar`]; training runs in `f32`
//! and gradient checks in `f64`. The aliases below name the two concrete instantiations.

pub mod data;
pub mod eval;
pub mod error;
pub mod layers;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
