use super::{require_mono, DspError};
use crate::audio::AudioBuffer;

/// Frame-wise RMS amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyEnvelope {
    pub rms: Vec<f64>,
    pub hop_seconds: f64,
    pub frame_seconds: f64,
    /// Hop in samples at the source rate; `rms[t]` starts at `t * hop_samples`.
    pub hop_samples: usize,
}

impl EnergyEnvelope {
    pub fn len(&self) -> usize {
        self.rms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.rms.is_empty() {
            0.0
        } else {
            self.rms.iter().sum::<f64>() / self.rms.len() as f64
        }
    }
}

/// RMS of raw samples over frames of `frame_seconds`, advanced by
/// `hop_seconds`. Produces `ceil(len / hop)` frames; frames running past the
/// end average over the samples that exist.
pub fn rms_energy(
    buffer: &AudioBuffer,
    frame_seconds: f64,
    hop_seconds: f64,
) -> Result<EnergyEnvelope, DspError> {
    require_mono(buffer)?;
    let rate = f64::from(buffer.sample_rate());
    let frame = ((frame_seconds * rate).round() as usize).max(1);
    let hop = ((hop_seconds * rate).round() as usize).max(1);
    let samples = buffer.samples();

    // Sum squares once per block of gcd(frame, hop) samples; each frame is
    // then a run of whole blocks.
    let block = gcd(frame, hop);
    let block_sums: Vec<f64> = samples
        .chunks(block)
        .map(|c| c.iter().map(|&x| f64::from(x) * f64::from(x)).sum())
        .collect();
    let per_frame = frame / block;
    let per_hop = hop / block;

    let n_frames = samples.len().div_ceil(hop);
    let rms = (0..n_frames)
        .map(|t| {
            let first = t * per_hop;
            let last = (first + per_frame).min(block_sums.len());
            let sum: f64 = block_sums[first..last].iter().sum();
            let count = ((t * hop + frame).min(samples.len()) - t * hop) as f64;
            (sum / count).sqrt().min(1.0)
        })
        .collect();
    Ok(EnergyEnvelope {
        rms,
        hop_seconds: hop as f64 / rate,
        frame_seconds: frame as f64 / rate,
        hop_samples: hop,
    })
}

/// Means of the `m` envelope frames before and from `t`, where
/// `m = min(w, t, len - t)`. Windows shrink symmetrically at the edges, so
/// a constant envelope yields exactly equal pairs.
pub(crate) fn windowed_means(rms: &[f64], w: usize) -> Vec<(f64, f64)> {
    let len = rms.len();
    (0..len)
        .map(|t| {
            let m = w.min(t).min(len - t);
            if m == 0 {
                return (0.0, 0.0);
            }
            let left: f64 = rms[t - m..t].iter().sum();
            let right: f64 = rms[t..t + m].iter().sum();
            (left / m as f64, right / m as f64)
        })
        .collect()
}

/// Energy novelty: absolute difference between the moving averages of the
/// envelope just before and just after each frame. Rises and falls both
/// register. The first frame is always 0.
pub fn novelty(envelope: &EnergyEnvelope, smooth_seconds: f64) -> Vec<f64> {
    let w = ((smooth_seconds / envelope.hop_seconds).round() as usize).max(1);
    windowed_means(&envelope.rms, w)
        .into_iter()
        .map(|(left, right)| (right - left).abs())
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
