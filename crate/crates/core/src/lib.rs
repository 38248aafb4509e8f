//! Frame-level bit allocation for pseudo-temporal-sequence light-field
//! coding: sweep-based R-D modeling, smoothness-aware convex allocation,
//! QP planning, and two-pass orchestration.

pub mod allocator;
pub mod backend;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod rdmodel;
pub mod yuv;

pub use error::{Error, Result};
