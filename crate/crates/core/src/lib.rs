pub mod cost;
pub mod data;
pub mod error;
pub mod net;
pub mod run;
pub mod selfcheck;
pub mod tensor;
pub mod train;
pub mod wavelet;
pub mod wtconv;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Tensor};
