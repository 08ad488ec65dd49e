//! Timepix3 intensified-camera calibration from photon-pair data.
//!
//! Raw pixel events are grouped into clusters, reduced to centroids and
//! matched into coincidences. The coincidence and singles images then give a
//! per-pixel detection efficiency map. A synthetic generator with full ground
//! truth drives the tests.

pub mod centroiding;
pub mod clustering;
pub mod coincidence;
pub mod efficiency;
pub mod error;
pub mod event_model;
pub mod pipeline;
pub mod stream_io;
pub mod synth;

pub use error::{Error, Result};
