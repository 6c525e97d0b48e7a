//! Energy-novelty segmentation of full tracks into 10-30 s clips.
//!
//! The scan is greedy and left to right. From the current cut, the next cut
//! is the strongest novelty peak that lands inside the allowed clip-length
//! window; with no peak there, the clip is cut at the maximum length.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::dsp::{rms_energy, windowed_means, DspError};

/// Relative tolerance under which two novelty values count as equal. Keeps
/// peak picking stable under amplitude scaling, where values only change
/// by rounding.
const EQUAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("track is {seconds:.2} s, shorter than the {min_clip_s} s minimum clip")]
    TrackTooShort { seconds: f64, min_clip_s: f64 },
    #[error("invalid segmenter config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub min_clip_s: f64,
    pub max_clip_s: f64,
    pub frame_s: f64,
    pub hop_s: f64,
    pub smooth_s: f64,
    pub threshold_k: f64,
    pub drop_trailing_under_s: f64,
    /// A peak must also change the local level by at least this fraction.
    /// Filters tremolo and ripple out of otherwise steady material.
    pub min_relative_change: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            min_clip_s: 10.0,
            max_clip_s: 30.0,
            frame_s: 0.05,
            hop_s: 0.01,
            smooth_s: 0.5,
            threshold_k: 1.0,
            drop_trailing_under_s: 10.0,
            min_relative_change: 0.1,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        let bad = |m: &str| Err(SegmentError::InvalidConfig(m.to_string()));
        if !(self.min_clip_s > 0.0 && self.min_clip_s < self.max_clip_s) {
            return bad("need 0 < min_clip_s < max_clip_s");
        }
        if !(self.frame_s > 0.0 && self.hop_s > 0.0 && self.smooth_s > 0.0) {
            return bad("frame_s, hop_s and smooth_s must be positive");
        }
        if !(self.threshold_k >= 0.0) {
            return bad("threshold_k must be >= 0");
        }
        if !(self.drop_trailing_under_s >= 0.0 && self.min_relative_change >= 0.0) {
            return bad("drop_trailing_under_s and min_relative_change must be >= 0");
        }
        Ok(())
    }
}

/// One clip, in track-relative time. Sample offsets are the exact form;
/// seconds are derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpan {
    pub start_seconds: f64,
    pub end_seconds: f64,
    pub start_sample: u64,
    pub end_sample: u64,
    /// Novelty at the cut ending this clip; 0 for forced and final cuts.
    pub boundary_score: f64,
}

impl ClipSpan {
    pub fn from_samples(start: u64, end: u64, sample_rate: u32, boundary_score: f64) -> Self {
        Self {
            start_seconds: start as f64 / f64::from(sample_rate),
            end_seconds: end as f64 / f64::from(sample_rate),
            start_sample: start,
            end_sample: end,
            boundary_score,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.end_seconds - self.start_seconds
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    sample: u64,
    score: f64,
}

pub fn segment(buffer: &AudioBuffer, config: &SegmenterConfig) -> Result<Vec<ClipSpan>, SegmentError> {
    config.validate()?;
    let seconds = buffer.duration_seconds();
    if seconds < config.min_clip_s {
        return Err(SegmentError::TrackTooShort {
            seconds,
            min_clip_s: config.min_clip_s,
        });
    }
    let rate = buffer.sample_rate();
    let to_samples = |s: f64| (s * f64::from(rate)).round() as u64;
    let total = buffer.frames() as u64;
    let min_len = to_samples(config.min_clip_s);
    let max_len = to_samples(config.max_clip_s);
    let drop_under = to_samples(config.drop_trailing_under_s);

    let candidates = boundary_candidates(buffer, config)?;

    let mut spans = Vec::new();
    let mut pos = 0u64;
    while total - pos >= min_len {
        let remaining = total - pos;
        // Prefer cuts that leave at least a minimum clip behind them.
        let mut hi = (pos + max_len.min(remaining)).min(total.saturating_sub(min_len));
        if hi < pos + min_len && remaining > max_len {
            hi = pos + max_len;
        }
        let best = candidates
            .iter()
            .filter(|c| c.sample >= pos + min_len && c.sample <= hi)
            .fold(None::<Candidate>, |best, c| match best {
                Some(b) if !strictly_greater(c.score, b.score) => Some(b),
                _ => Some(*c),
            });
        match best {
            Some(c) => {
                spans.push(ClipSpan::from_samples(pos, c.sample, rate, c.score));
                pos = c.sample;
            }
            None if remaining > max_len => {
                spans.push(ClipSpan::from_samples(pos, pos + max_len, rate, 0.0));
                pos += max_len;
            }
            None => {
                spans.push(ClipSpan::from_samples(pos, total, rate, 0.0));
                pos = total;
            }
        }
    }
    let tail = total - pos;
    if tail > 0 && tail >= drop_under {
        spans.push(ClipSpan::from_samples(pos, total, rate, 0.0));
    }
    Ok(spans)
}

/// Novelty peaks above `mean + k * std` of the whole track's novelty that
/// also clear the relative-change floor. Positions are frame centres.
fn boundary_candidates(buffer: &AudioBuffer, config: &SegmenterConfig) -> Result<Vec<Candidate>, SegmentError> {
    let env = rms_energy(buffer, config.frame_s, config.hop_s)?;
    let w = ((config.smooth_s / env.hop_seconds).round() as usize).max(1);
    let means = windowed_means(&env.rms, w);
    let novelty: Vec<f64> = means.iter().map(|(l, r)| (r - l).abs()).collect();
    if novelty.is_empty() {
        return Ok(Vec::new());
    }

    let n = novelty.len() as f64;
    let mu = novelty.iter().sum::<f64>() / n;
    let sigma = (novelty.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = mu + config.threshold_k * sigma;

    let half_frame = (config.frame_s * f64::from(buffer.sample_rate()) / 2.0).round() as u64;
    let total = buffer.frames() as u64;
    Ok(peak_runs(&novelty)
        .into_iter()
        .filter(|&t| {
            let (l, r) = means[t];
            let level = l.max(r);
            novelty[t] > threshold && level > 0.0 && novelty[t] >= config.min_relative_change * level
        })
        .map(|t| Candidate {
            sample: (t as u64 * env.hop_samples as u64 + half_frame).min(total),
            score: novelty[t],
        })
        .collect())
}

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= EQUAL_TOLERANCE * a.abs().max(b.abs())
}

fn strictly_greater(a: f64, b: f64) -> bool {
    a > b && !nearly_equal(a, b)
}

/// Centres of local maxima, where runs of nearly-equal values count as a
/// single flat-topped peak.
fn peak_runs(x: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    let mut start = 0;
    while start < x.len() {
        let mut end = start;
        while end + 1 < x.len() && nearly_equal(x[end + 1], x[end]) {
            end += 1;
        }
        let rises_into = start == 0 || x[start - 1] < x[start];
        let falls_after = end + 1 == x.len() || x[end + 1] < x[end];
        if rises_into && falls_after && x[start] > 0.0 {
            peaks.push((start + end) / 2);
        }
        start = end + 1;
    }
    peaks
}
