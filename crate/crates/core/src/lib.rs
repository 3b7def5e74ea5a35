//! Physics-informed neural classification of multichannel time series.
//!
//! The pipeline windows and band-decomposes raw trials ([`sigproc`]), maps
//! them through a convolutional/transformer network onto FitzHugh-Nagumo
//! membrane-potential and recovery fields ([`pinn`]), penalises violations of
//! the coupled FHN dynamics on those fields ([`fhn`]), and classifies trials
//! from features extracted off the fields ([`featx`]). Training, evaluation
//! and experiment protocols live in [`trainer`].
//!
//! Everything differentiable runs on the small reverse-mode engine in
//! [`diff`]. Inner loops use rayon when the `parallel` feature is enabled
//! (the default) and fall back to plain iteration otherwise; both paths give
//! bit-identical results.

pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod error;
pub mod featx;
pub mod fhn;
pub mod io;
pub mod model;
pub mod nn;
pub mod par;
pub mod pinn;
pub mod sigproc;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
