//! A desk-scale laboratory for text-only domain adaptation of
//! encoder-decoder speech recognizers.
//!
//! The pieces, bottom to top:
//!
//! - [`numerics`] — dense f32 tensors, a reverse-mode tape, and Adam.
//! - [`nn`] — layer primitives (linear, conv, attention) built on the tape.
//! - [`world`] — a deterministic synthetic speech universe: phoneme
//!   prototypes, domain lexicons with novel target-only words, and an
//!   articulator that turns word sequences into pseudo-audio features.
//! - [`asr`] — the encoder-decoder recognizer with greedy/beam decoding.
//! - [`tle`] — the text-to-latent encoder: a convolutional VAE trained to
//!   imitate the acoustic encoder's output grid from tokens alone.
//! - [`adapt`] — training orchestration: base fine-tuning, TLE training,
//!   text-only adaptation with replay, TTS-sim adaptation, and combinations.
//! - [`lmfusion`] — trigram LM and shallow-fusion beam decoding.
//! - [`evalkit`] — WER, corpus evaluation, and the experiment matrix runner.
//! - [`io`] — configs, checkpoints, run manifests, and dataset files.
//!
//! Everything is deterministic given a seed: sampling draws from explicit
//! counter-based streams, and parallel code only ever writes disjoint,
//! pre-assigned outputs, so the `parallel` feature does not change results.

pub mod adapt;
pub mod asr;
pub mod evalkit;
pub mod io;
pub mod lmfusion;
pub mod nn;
pub mod numerics;
pub mod tle;
pub mod world;

mod error;

pub use error::{Error, Result};
