pub mod attacks;
pub mod defenses;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};
