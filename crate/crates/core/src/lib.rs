//! Contour-guided masked autoencoder pretraining and clustering-based
//! unsupervised re-identification at desk scale.
//!
//! The pipeline has two stages. [`mae`] pretrains a small vision transformer
//! by reconstructing masked patches, where the visible patches are chosen by
//! contour intensity ([`imagecore`] + [`masking`]). [`reid`] then fine-tunes
//! the encoder with DBSCAN pseudo-labels that are softened across epochs and
//! a momentum-updated cluster dictionary. [`eval`] scores retrieval with
//! mAP and CMC, and [`data`] renders a synthetic vehicle-like dataset.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod imagecore;
pub mod mae;
pub mod masking;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod reid;
pub mod seed;

pub use error::{Error, Result};
