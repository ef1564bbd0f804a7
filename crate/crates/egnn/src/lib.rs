//! Streaming event-graph neural network engine.
//!
//! Classifies event-based time-series (spike rasters from multi-channel
//! sensors) one event at a time. Each incoming event is connected to the
//! most recent past event on nearby channels (skip-step graph generation
//! with O(1) context-memory lookups), pushed through a stack of streaming
//! point-convolution layers with constant-size per-channel state, pooled
//! into a running average, and scored by a small MLP head. Inference runs
//! either in floating point or fully in integer arithmetic (multiply-and-
//! shift requantization), and a batch reference path plus a desk-scale
//! trainer with quantization-aware fine-tuning round out the engine.

// The numerics kernels use explicit index loops so the code lines up with the
// matrix/vector arithmetic it implements; iterator rewrites would obscure that.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod events;
pub mod gconv;
pub mod graphgen;
pub mod head;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod train;
