//! Global tempo from the autocorrelation of a spectral-flux onset curve.

use super::stft::StftPlan;
use super::{require_mono, DspError};
use crate::audio::AudioBuffer;

pub const MIN_BPM: f64 = 60.0;
pub const MAX_BPM: f64 = 180.0;
pub const MIN_TEMPO_SECONDS: f64 = 5.0;

const ONSET_FRAME: usize = 1024;
const ONSET_HOP: usize = 256;
/// Periodicities searched before folding.
const SEARCH_MIN_BPM: f64 = 40.0;
const SEARCH_MAX_BPM: f64 = 320.0;
/// Reported when the onset curve carries no energy at all.
const FALLBACK_BPM: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempoEstimate {
    /// In `[MIN_BPM, MAX_BPM)`.
    pub bpm: f64,
    /// In `[0, 1]`.
    pub confidence: f64,
}

/// Doubles or halves `bpm` into `[MIN_BPM, MAX_BPM)`.
pub fn fold_bpm(mut bpm: f64) -> f64 {
    assert!(bpm.is_finite() && bpm > 0.0, "bpm must be positive and finite");
    while bpm >= MAX_BPM {
        bpm /= 2.0;
    }
    while bpm < MIN_BPM {
        bpm *= 2.0;
    }
    bpm
}

pub fn estimate_tempo(buffer: &AudioBuffer) -> Result<TempoEstimate, DspError> {
    require_mono(buffer)?;
    let seconds = buffer.duration_seconds();
    if seconds < MIN_TEMPO_SECONDS {
        return Err(DspError::TooShort {
            seconds,
            required: MIN_TEMPO_SECONDS,
        });
    }
    let rate = f64::from(buffer.sample_rate());
    let frames_per_second = rate / ONSET_HOP as f64;
    let onset = onset_curve(buffer)?;

    let min_lag = (frames_per_second * 60.0 / SEARCH_MAX_BPM).floor().max(1.0) as usize;
    let max_lag = ((frames_per_second * 60.0 / SEARCH_MIN_BPM).ceil() as usize).min(onset.len().saturating_sub(2));
    if max_lag <= min_lag + 1 {
        return Err(DspError::TooShort {
            seconds,
            required: MIN_TEMPO_SECONDS,
        });
    }
    let acf: Vec<f64> = (0..=max_lag + 1).map(|lag| autocorrelation(&onset, lag)).collect();
    if acf[0] <= 0.0 {
        return Ok(TempoEstimate {
            bpm: FALLBACK_BPM,
            confidence: 0.0,
        });
    }

    let mut peak = None;
    for lag in min_lag..=max_lag {
        let is_local_max = acf[lag] >= acf[lag - 1] && acf[lag] >= acf[lag + 1];
        if is_local_max && peak.is_none_or(|p: usize| acf[lag] > acf[p]) {
            peak = Some(lag);
        }
    }
    let Some(peak) = peak else {
        return Ok(TempoEstimate {
            bpm: FALLBACK_BPM,
            confidence: 0.0,
        });
    };

    // Parabolic refinement of the peak lag.
    let (a, b, c) = (acf[peak - 1], acf[peak], acf[peak + 1]);
    let curvature = a - 2.0 * b + c;
    let offset = if curvature < 0.0 {
        (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let lag = peak as f64 + offset;
    let bpm = fold_bpm(60.0 * frames_per_second / lag);

    let range = &acf[min_lag..=max_lag];
    let baseline = range.iter().sum::<f64>() / range.len() as f64;
    let confidence = if acf[0] > baseline {
        ((b - baseline) / (acf[0] - baseline)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(TempoEstimate { bpm, confidence })
}

/// Positive spectral flux per frame, lightly smoothed, mean removed.
/// The smoothing keeps autocorrelation peaks intact when the beat period
/// is not a whole number of frames.
fn onset_curve(buffer: &AudioBuffer) -> Result<Vec<f64>, DspError> {
    let plan = StftPlan::new(ONSET_FRAME, ONSET_HOP)?;
    let spec = plan.process(buffer.samples(), buffer.sample_rate());
    let frames = spec.frames();
    let mut flux = vec![0.0; frames.len()];
    for t in 1..frames.len() {
        flux[t] = frames[t]
            .iter()
            .zip(&frames[t - 1])
            .map(|(&now, &prev)| f64::from((now - prev).max(0.0)))
            .sum();
    }
    const KERNEL: [f64; 5] = [1.0, 2.0, 3.0, 2.0, 1.0];
    let smoothed: Vec<f64> = (0..flux.len())
        .map(|t| {
            KERNEL
                .iter()
                .enumerate()
                .filter_map(|(j, w)| (t + j).checked_sub(2).and_then(|i| flux.get(i)).map(|f| w * f))
                .sum::<f64>()
                / 9.0
        })
        .collect();
    let mean = smoothed.iter().sum::<f64>() / smoothed.len().max(1) as f64;
    Ok(smoothed.into_iter().map(|f| f - mean).collect())
}

fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    if lag >= x.len() {
        return 0.0;
    }
    x[..x.len() - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum()
}
