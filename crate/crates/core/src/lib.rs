pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod head;
pub mod hffp;
pub mod hfrp;
pub mod model;
pub mod optim;
pub mod reference;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
