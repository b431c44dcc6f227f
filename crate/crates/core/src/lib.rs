pub mod attention;
pub mod baselines;
pub mod channel;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod reservoir;
pub mod seed;
pub mod structnet;
pub mod toylab;
pub mod txchain;

pub use error::{Error, Result};
