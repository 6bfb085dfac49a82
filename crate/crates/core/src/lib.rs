pub mod adapters;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod positional;
pub mod train;

pub use error::{Error, Result};
