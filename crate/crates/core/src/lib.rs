//! Learning unsigned distance and normal fields from raw triangle soups,
//! with sphere tracing and multi-resolution iso-surface extraction on top.

pub mod geometry;
pub mod nn;
pub mod soup_io;
pub mod sampler;
pub mod mlp;
pub mod field;
pub mod tracer;
mod mc_tables;
pub mod mesher;
pub mod metrics;
