//! Arousal event detection in polysomnography.
//!
//! Synthetic PSG generation, preprocessing, a convolutional-recurrent
//! anchor-based detector with its own reverse-mode autodiff engine,
//! focal/Huber training objective, transfer-learning surgery for
//! channel-mismatched targets, event decoding and evaluation, and the
//! nonparametric statistics used to compare experiments.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod rng;
pub mod selftest;
pub mod dsp;
pub mod nncore;
pub mod evalstats;
pub mod experiments;
pub mod events;
pub mod loss;
pub mod model;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
