use serde::{Deserialize, Serialize};

use super::stft::StftPlan;
use super::{require_mono, DspError};
use crate::audio::AudioBuffer;

pub const PITCH_CLASS_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

/// Frames at or below this RMS amplitude are unvoiced and map to the zero vector.
pub const VOICED_RMS_THRESHOLD: f64 = 1e-4;

/// Chroma analysis frame. Twice the general STFT default: at 2048 samples a
/// bin spans more than half a semitone near A4 and leakage into the
/// neighbouring classes depends on where a tone falls between bins.
pub const CHROMA_FRAME_SIZE: usize = 4096;
pub const CHROMA_HOP: usize = 1024;

/// Spectral range folded into pitch classes.
const MIN_FREQ_HZ: f64 = 55.0;
const MAX_FREQ_HZ: f64 = 5_000.0;

/// Pitch class of A in C-based numbering.
const A_CLASS: i64 = 9;

/// Twelve pitch-class weights, C first.
///
/// Either L2-normalized or exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChromaVector(pub [f64; 12]);

impl ChromaVector {
    pub const ZERO: ChromaVector = ChromaVector([0.0; 12]);

    /// Scales to unit L2 norm; vectors with no energy become [`Self::ZERO`].
    pub fn normalized(raw: [f64; 12]) -> Self {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            ChromaVector(raw.map(|x| x / norm))
        } else {
            Self::ZERO
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..12 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Circular shift up by `semitones`: weight at class `i` moves to `i + semitones`.
    pub fn rotate(&self, semitones: i32) -> Self {
        let mut out = [0.0; 12];
        for (i, &v) in self.0.iter().enumerate() {
            out[(i as i32 + semitones).rem_euclid(12) as usize] = v;
        }
        ChromaVector(out)
    }

    /// Cosine similarity clamped to `[0, 1]`. Zero if either side is zero.
    pub fn cosine(&self, other: &ChromaVector) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na: f64 = self.0.iter().map(|a| a * a).sum();
        let nb: f64 = other.0.iter().map(|b| b * b).sum();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        // sqrt(na * na) == na exactly, so cos(a, a) is exactly 1.
        (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
    }
}

/// Per-frame chroma with the hop it was computed at.
#[derive(Debug, Clone, PartialEq)]
pub struct ChromaMatrix {
    pub frames: Vec<ChromaVector>,
    pub hop_seconds: f64,
}

impl ChromaMatrix {
    pub fn voiced_frames(&self) -> impl Iterator<Item = &ChromaVector> {
        self.frames.iter().filter(|f| !f.is_zero())
    }
}

pub fn chroma(buffer: &AudioBuffer) -> Result<ChromaMatrix, DspError> {
    chroma_with(buffer, CHROMA_FRAME_SIZE, CHROMA_HOP)
}

/// Folds each frame's power spectrum into 12 equal-tempered pitch classes
/// referenced to A440.
pub fn chroma_with(buffer: &AudioBuffer, frame_size: usize, hop: usize) -> Result<ChromaMatrix, DspError> {
    require_mono(buffer)?;
    let plan = StftPlan::new(frame_size, hop)?;
    let spec = plan.process(buffer.samples(), buffer.sample_rate());
    let bin_classes: Vec<Option<usize>> = (0..spec.bin_count())
        .map(|k| pitch_class_of(spec.bin_frequency(k)))
        .collect();

    let samples = buffer.samples();
    let frames = spec
        .frames()
        .iter()
        .enumerate()
        .map(|(t, mags)| {
            let start = t * hop;
            let end = (start + frame_size).min(samples.len());
            let energy: f64 = samples[start..end].iter().map(|&x| f64::from(x).powi(2)).sum();
            let rms = (energy / frame_size as f64).sqrt();
            if rms <= VOICED_RMS_THRESHOLD {
                return ChromaVector::ZERO;
            }
            let mut raw = [0.0; 12];
            for (&m, class) in mags.iter().zip(&bin_classes) {
                if let Some(c) = class {
                    raw[*c] += f64::from(m) * f64::from(m);
                }
            }
            ChromaVector::normalized(raw)
        })
        .collect();
    Ok(ChromaMatrix {
        frames,
        hop_seconds: hop as f64 / f64::from(buffer.sample_rate()),
    })
}

fn pitch_class_of(freq: f64) -> Option<usize> {
    if !(MIN_FREQ_HZ..=MAX_FREQ_HZ).contains(&freq) {
        return None;
    }
    let semitones_from_a = (12.0 * (freq / 440.0).log2()).round() as i64;
    Some((semitones_from_a + A_CLASS).rem_euclid(12) as usize)
}

/// Mean of the voiced frames, renormalized. All-silent input gives zero.
pub fn mean_chroma(matrix: &ChromaMatrix) -> ChromaVector {
    let mut sum = [0.0; 12];
    let mut count = 0usize;
    for frame in matrix.voiced_frames() {
        for (s, v) in sum.iter_mut().zip(&frame.0) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return ChromaVector::ZERO;
    }
    ChromaVector::normalized(sum.map(|s| s / count as f64))
}
