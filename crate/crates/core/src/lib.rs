pub mod analysis;
pub mod attention;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod metrics;
pub mod nets;
pub mod numerics;
pub mod scene;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
