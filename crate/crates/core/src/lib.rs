//! Core library of the `fxrn` toolkit: training, fixed-point quantization,
//! and embedded-cost accounting for two small gesture-recognition networks —
//! a CNN-LSTM over short image sequences and a plain LSTM over 3-axis
//! accelerometer traces.
//!
//! The pipeline is: train a float model ([`trainer`]), fit per-group uniform
//! quantizers ([`quantizer`], [`netcore::fit`]), measure per-group sensitivity
//! and pick a bit allocation ([`sensitivity`]), then pack the result into a
//! `.fxrn` file and account for its memory and multiplication budget
//! ([`modelstore`]).

pub mod error;
pub mod gesturedata;
pub mod modelstore;
pub mod netcore;
pub mod quantizer;
pub mod sensitivity;
pub mod trainer;

pub use error::{Error, Result};
