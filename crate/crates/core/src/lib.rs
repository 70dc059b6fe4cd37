pub mod analysis;
pub mod error;
pub mod model;
pub mod params;
pub mod routers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
