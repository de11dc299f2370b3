pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod kv;
pub mod model;
pub mod molt;
pub mod numerics;
pub mod par;
pub mod robustness;
pub mod training;

pub use error::{Error, Result};
