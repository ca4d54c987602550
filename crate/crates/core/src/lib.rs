pub mod acpi;
pub mod admm;
pub mod basis;
pub mod data;
pub mod error;
pub mod grouping;
mod linalg;
pub mod moment;
pub mod penalty;
pub mod sim;

pub use error::{Error, Result};
