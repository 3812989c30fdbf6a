pub mod backbone;
pub mod data;
pub mod error;
pub mod forest;
pub mod metrics;
pub mod persist;
pub mod selfpaced;
pub mod trainer;

pub use error::{Error, Result};
