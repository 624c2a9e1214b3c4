pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod ingest;
pub mod losses_matching;
pub mod network;
pub mod query_enhancement;
pub mod simulator;
pub mod spatial_sampling;
pub mod temporal_fusion;
pub mod tensor_io;
pub mod training;

pub use error::{Error, Result};
