//! Shoebox room simulation and the synthetic corpus used for experiments.

pub mod corpus;
pub mod rir;
pub mod scene;

pub use corpus::{
    load_corpus, save_corpus, toy_corpus, toy_utterance, voice_template, CorpusEntry, CorpusIndex, LabeledWaveform,
    ToyCorpusConfig, VoiceTemplate,
};
pub use rir::{
    image_method_rir, schroeder_rt60, uniform_absorption, AbsorptionFormula, RoomSpec, SPEED_OF_SOUND,
};
pub use scene::{fft_convolve, make_scene, room_rirs, toy_scene, Scene, SceneLayout};

use crate::signal::SignalError;

#[derive(Debug, thiserror::Error)]
pub enum RoomError {
    #[error("invalid room: {0}")]
    Invalid(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("scene metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
