//! Continuous-time incrementality bidding and attribution.

pub mod attribution;
pub mod bidding;
pub mod config;
pub mod error;
pub mod estimators;
pub mod events;
pub mod features;
pub mod panel;
pub mod replicate;
pub mod kernels;
pub mod simulator;
pub mod special;

pub use error::{Error, Result};
