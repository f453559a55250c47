//! Dense numeric kernel: primitives with explicit gradients, Adam, gradient
//! checking and checkpoint serialization.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod params;

pub use adam::{AdamConfig, AdamState};
pub use params::Parameters;
