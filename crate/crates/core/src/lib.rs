//! Multi-class CT segmentation with a 3D encoder-decoder network.
//!
//! The crate covers the whole pipeline: SVOL volume I/O ([`volgrid`]),
//! resampling and augmentation ([`preprocess`]), a small CPU tensor engine
//! ([`neural`]) and the network built on it ([`unet`]), the class-weighted
//! loss and evaluation metrics ([`objective`]), training and sliding-window
//! inference ([`pipeline`]), and a synthetic CT generator ([`phantom`]).

pub mod error;
pub mod neural;
pub mod objective;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod unet;
pub mod volgrid;

pub use error::{Error, Result};
