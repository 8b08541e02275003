pub mod calib;
pub mod error;
pub mod linalg;
pub mod lowrank;
pub mod model;
pub mod peft;
pub mod pipeline;
pub mod quantsim;
pub mod store;
pub mod transform;

pub use error::{QuadError, Result};
