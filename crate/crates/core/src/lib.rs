//! Multi-view query consolidation.
//!
//! A view-independent feature field (the query field) is fit to the
//! self-attention queries that a denoiser produces for several views of the
//! same scene. Volume-rendered queries from that field are fed back into the
//! denoiser as a soft gradient step on each view's latent, which pulls the
//! per-view generations toward a single 3D-consistent geometry. The process is
//! organised in overlapping intervals that are rewound and replayed, so the
//! field is refit progressively as denoising advances.
//!
//! The denoiser here is a small fixed-weight attention network over a
//! synthetic scene, so every quantity has an analytic ground truth.

pub mod error;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod pipeline;
pub mod qfield;
pub mod store;
pub mod toydiff;
pub mod volrender;

pub mod cli;

pub use error::{Error, Result};
