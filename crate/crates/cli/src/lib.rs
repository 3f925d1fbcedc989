//! Command-line pipeline around `udfkit`: synthesize soups, sample, train,
//! render, extract and evaluate, with a manifest next to every artifact.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod synth;
