//! Single-photon LiDAR simulation and glare/pileup mitigation.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod app;
pub mod baseline;
pub mod cube;
pub mod deglare;
pub mod dsp;
pub mod error;
pub mod fft;
pub mod gsf;
pub mod io;
pub mod metrics;
pub mod pileup;
pub mod pipeline;
pub mod sensor;
pub mod sim;
pub mod synth;
pub mod waveform;

pub use error::{Error, Result};
