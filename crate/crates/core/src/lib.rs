pub mod analysis;
pub mod batch;
pub mod checkpoint;
pub mod cmcn;
pub mod container;
pub mod dataset;
pub mod encoder;
pub mod env;
pub mod error;
pub mod fusion;
pub mod kernels;
pub mod mhfp;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod svg;
pub mod trainer;

pub use error::{Error, Result};
