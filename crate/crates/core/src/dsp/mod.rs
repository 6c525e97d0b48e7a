//! Signal-analysis kernels: STFT, frame energy, novelty, chroma, tempo and key.
//!
//! All functions here are pure. Identical inputs give bitwise-identical
//! outputs, so they can be run in any order across worker threads.

mod chroma;
mod energy;
mod key;
mod stft;
mod tempo;

use thiserror::Error;

pub use chroma::{chroma, chroma_with, CHROMA_FRAME_SIZE, CHROMA_HOP, mean_chroma, ChromaMatrix, ChromaVector, PITCH_CLASS_NAMES, VOICED_RMS_THRESHOLD};
pub use energy::{novelty, rms_energy, EnergyEnvelope};
pub(crate) use energy::windowed_means;
pub use key::{estimate_key, KeyLabel, Mode, KK_MAJOR, KK_MINOR};
pub use stft::{stft, Spectrogram, StftPlan, DEFAULT_FRAME_SIZE, DEFAULT_HOP};
pub use tempo::{estimate_tempo, fold_bpm, TempoEstimate, MAX_BPM, MIN_BPM, MIN_TEMPO_SECONDS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("invalid frame parameters: frame_size={frame_size}, hop={hop}")]
    InvalidFrameParams { frame_size: usize, hop: usize },
    #[error("expected a mono buffer, got {0} channels")]
    NotMono(usize),
    #[error("input too short: {seconds:.3} s < {required} s")]
    TooShort { seconds: f64, required: f64 },
    #[error("chroma vector is all zero")]
    SilentInput,
}

fn require_mono(buffer: &crate::audio::AudioBuffer) -> Result<(), DspError> {
    if buffer.is_mono() {
        Ok(())
    } else {
        Err(DspError::NotMono(buffer.channel_count()))
    }
}
