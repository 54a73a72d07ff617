pub mod cli;
pub mod data;
pub mod error;
pub mod gnn;
pub mod hyperbolic;
pub mod kernels;
pub mod ndcore;
pub mod objectives;
pub mod pooling;
pub mod verify;

pub use error::{Error, Result};
