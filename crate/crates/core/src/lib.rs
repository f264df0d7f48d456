//! Determined multichannel blind source separation.
//!
//! Two optimizers share the same spatial machinery: ILRMA, which models each
//! source's variance with a low-rank NMF, and the fast neural variant, which
//! replaces that model with a trained encoder/decoder/classifier bundle
//! evaluated forward-only. Around them sit STFT and WAV handling, an
//! image-method room simulator and BSS-eval style scoring.

pub mod eval;
pub mod linalg;
pub mod models;
pub mod room;
pub mod separation;
pub mod signal;
