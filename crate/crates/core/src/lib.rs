pub mod config;
pub mod correct;
pub mod data;
pub mod error;
pub mod eval;
pub mod interpolant;
pub mod io;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod predict;
pub mod run;
pub mod student;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
