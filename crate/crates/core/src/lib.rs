pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod io;
pub mod kl;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
