//! Passive wireless clock synchronization: measurement simulation,
//! Cramér-Rao resolution limits and an online maximum-likelihood estimator
//! for a receive-only node that tracks a master clock with the help of
//! three relaying transceivers or a position prior.
//!
//! Units: nanoseconds for time, meters for distance.

pub mod bounds;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod sim;

pub use error::{Error, Result};
