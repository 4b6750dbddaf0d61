//! Interactive teaching service: operators correct proposed pick and place
//! poses, each correction becomes a training sample and the models keep
//! training in the background.

pub mod error;
pub mod http;
pub mod session;

pub use error::{Result, TeachError};
pub use session::{Correction, Phase, Source, Status, Target, TeachConfig, Teacher};
