pub mod cluster;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;

pub use error::{Error, Result};
