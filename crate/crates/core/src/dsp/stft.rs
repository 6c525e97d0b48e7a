use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{require_mono, DspError};
use crate::audio::AudioBuffer;

pub const DEFAULT_FRAME_SIZE: usize = 2048;
pub const DEFAULT_HOP: usize = 512;

/// Magnitude spectrogram, `frames x (frame_size / 2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    magnitudes: Vec<Vec<f32>>,
    frame_size: usize,
    hop: usize,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn frames(&self) -> &[Vec<f32>] {
        &self.magnitudes
    }

    pub fn frame_count(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn bin_count(&self) -> usize {
        self.frame_size / 2 + 1
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn bin_frequency(&self, bin: usize) -> f64 {
        bin as f64 * f64::from(self.sample_rate) / self.frame_size as f64
    }
}

/// Reusable Hann-windowed FFT setup.
pub struct StftPlan {
    frame_size: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(frame_size: usize, hop: usize) -> Result<Self, DspError> {
        if frame_size < 2 || !frame_size.is_power_of_two() || hop == 0 || hop > frame_size {
            return Err(DspError::InvalidFrameParams { frame_size, hop });
        }
        // Periodic Hann: overlapping copies at hop = frame/4 sum to a constant.
        let window = (0..frame_size)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / frame_size as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(frame_size);
        Ok(Self {
            frame_size,
            hop,
            window,
            fft,
        })
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Number of frames for `len` samples: enough that the last frame
    /// reaches the final sample, and at least one.
    pub fn frame_count(&self, len: usize) -> usize {
        if len <= self.frame_size {
            1
        } else {
            1 + (len - self.frame_size).div_ceil(self.hop)
        }
    }

    /// Frame `t` covers samples `[t * hop, t * hop + frame_size)`, zero-padded
    /// past the end of the signal. Only the last frame can need padding.
    pub fn process(&self, samples: &[f32], sample_rate: u32) -> Spectrogram {
        let bins = self.frame_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.frame_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let magnitudes = (0..self.frame_count(samples.len()))
            .map(|t| {
                let start = t * self.hop;
                for (i, slot) in buf.iter_mut().enumerate() {
                    let x = samples.get(start + i).map_or(0.0, |&s| f64::from(s));
                    *slot = Complex::new(x * self.window[i], 0.0);
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                buf[..bins].iter().map(|c| c.norm() as f32).collect()
            })
            .collect();
        Spectrogram {
            magnitudes,
            frame_size: self.frame_size,
            hop: self.hop,
            sample_rate,
        }
    }
}

/// Hann-windowed magnitude STFT of a mono buffer.
pub fn stft(buffer: &AudioBuffer, frame_size: usize, hop: usize) -> Result<Spectrogram, DspError> {
    require_mono(buffer)?;
    let plan = StftPlan::new(frame_size, hop)?;
    Ok(plan.process(buffer.samples(), buffer.sample_rate()))
}
