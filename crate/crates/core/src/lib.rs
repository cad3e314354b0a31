pub mod anchors;
pub mod backbone;
pub mod boxes;
pub mod cli;
pub mod config;
pub mod data;
pub mod detector;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod losses;
pub mod pyramid;
pub mod sbifpn;

pub use error::{Error, Result};
