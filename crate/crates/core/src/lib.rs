//! Contextualized speech recognition as mixed-modal decoder-only language
//! modeling, at desk scale.
//!
//! A CTC-pretrained downsampling audio encoder feeds a frozen decoder-only
//! transformer adapted with low-rank adapters. The decoder is prompted with
//! free-text context ahead of the audio tokens, and the whole protocol —
//! context perturbations, masking ablation, decoder-variant ablation — runs
//! on a synthetic corpus engineered so that context measurably matters.

pub mod bundle;
pub mod config;
pub mod corpus;
pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod rng;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
