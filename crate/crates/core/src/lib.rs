pub mod augmentation;
pub mod autograd;
pub mod bias_audit;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod debias_grl;
pub mod encoders;
pub mod error;
pub mod explain;
pub mod hex_projection;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod train_eval;

pub use error::{Error, ErrorClass, Result};
