pub mod config;
pub mod coordinator;
pub mod error;
pub mod hocbf;
pub mod nmpc;
pub mod planner;
pub mod sim;
pub mod srb;

pub use error::{Error, Result};
