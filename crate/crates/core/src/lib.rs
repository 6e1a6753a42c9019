//! Incomplete multi-view clustering with a unified transformer fusion
//! auto-encoder.
//!
//! The pipeline: cross-view KNN imputation and denoising augmentation
//! ([`impute`]), per-view neighbor encoders with cosine-distance positional
//! encoding feeding a view-fusion encoder with a three-level adaptive mask
//! ([`network`]), per-view reconstruction decoders, and a DEC-style
//! clustering head trained in two stages ([`training`]). Everything runs on
//! the fp64 reverse-mode autodiff engine in [`autodiff`]; [`mvdata`] holds
//! the dataset model and file formats and [`metrics`] the clustering
//! evaluation.

pub mod autodiff;
pub mod impute;
pub mod metrics;
pub mod mvdata;
pub mod network;
mod rng;
pub mod training;
