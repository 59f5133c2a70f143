//! Core library for a spectrum-conditioned recommender pipeline.

pub mod backbone;
pub mod cemb;
pub mod dataio;
pub mod encoders;
pub mod inferencer;
pub mod nn;
pub mod par;
pub mod profiles;
pub mod seeds;
pub mod spectrum;
pub mod synth;
pub mod trainer;
