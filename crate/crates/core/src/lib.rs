//! Desk-scale radiance fields with collaborative cross-view feature fusion
//! and self-supervised ray regularization.

pub mod ccvi;
pub mod encoder;
pub mod error;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod render;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
