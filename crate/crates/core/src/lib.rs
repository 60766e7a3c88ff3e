//! Contact-force estimation from tri-axial fiber Bragg grating (FBG) sensors.
//!
//! The crate covers the whole pipeline: synthetic poke sessions with
//! shift-of-reference drift ([`simulate`]), spectral and time-domain peak
//! detection ([`peakdetect`]), resampling and windowing ([`preprocess`]), a
//! small f64 training engine ([`nn`]), the FCN / GRU / Transformer estimators
//! ([`models`]), persistence ([`dataio`]) and experiment drivers ([`bench`]).

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dataio;
pub mod models;
pub mod nn;
pub mod peakdetect;
pub mod preprocess;
pub mod simulate;
pub mod spline;
pub mod types;

pub use types::*;
