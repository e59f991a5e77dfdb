//! Core primitives for far-field speaker verification.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! audio resampling and SNR mixing, mel/cepstral feature extraction,
//! energy and U-net voice activity detection, ResNet embedding extractors
//! with margin-based softmax objectives, cosine/CSML scoring with cohort
//! normalization, image-method room impulse responses, and detection
//! metrics (EER, minDCF, DET).
//!
//! The crate is `no_std` (with `alloc`); file formats, WAV IO and the
//! command-line frontend live in the companion `svkit` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod audio;
pub mod backend;
pub mod error;
pub mod eval;
pub mod features;
pub mod math;
pub mod nnet;
pub mod reverb;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod vad;

pub use error::{Error, Result};
pub use tensor::Tensor;
