//! Decoding, resampling and channel handling for PCM audio.
//!
//! Every analysis stage downstream works on mono buffers at
//! [`CANONICAL_RATE`]. [`AudioBuffer::canonical`] gets any decoded buffer
//! there.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, ErrorKind};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Working sample rate of the whole toolkit (Hz).
pub const CANONICAL_RATE: u32 = 32_000;

/// Half-width of the resampling kernel in input samples at unit cutoff.
/// The full kernel spans `2 * SINC_HALF_WIDTH` taps, widened when
/// downsampling.
const SINC_HALF_WIDTH: usize = 48;

/// Kaiser window shape parameter for the resampling kernel.
const KAISER_BETA: f64 = 8.6;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },
    #[error("corrupt stream in {path}: {reason}")]
    CorruptStream { path: PathBuf, reason: String },
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("invalid buffer: {0}")]
    InvalidBuffer(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Decoded PCM audio, one sample vector per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
    source_path: String,
}

impl AudioBuffer {
    /// Builds a buffer after checking the shape and sample invariants.
    pub fn new(
        channels: Vec<Vec<f32>>,
        sample_rate: u32,
        source_path: impl Into<String>,
    ) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(sample_rate));
        }
        if channels.is_empty() {
            return Err(AudioError::InvalidBuffer("no channels".into()));
        }
        let frames = channels[0].len();
        if channels.iter().any(|c| c.len() != frames) {
            return Err(AudioError::InvalidBuffer(
                "channels have different lengths".into(),
            ));
        }
        if let Some(bad) = channels
            .iter()
            .flatten()
            .find(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(AudioError::InvalidBuffer(format!(
                "sample {bad} outside [-1, 1]"
            )));
        }
        Ok(Self {
            channels,
            sample_rate,
            source_path: source_path.into(),
        })
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        Self::new(vec![samples], sample_rate, "")
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn frames(&self) -> usize {
        self.channels[0].len()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / f64::from(self.sample_rate)
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    pub fn channel(&self, index: usize) -> &[f32] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    /// First channel. Analysis code calls this on mono buffers.
    pub fn samples(&self) -> &[f32] {
        &self.channels[0]
    }

    pub fn is_mono(&self) -> bool {
        self.channels.len() == 1
    }

    pub fn with_source_path(mut self, path: impl Into<String>) -> Self {
        self.source_path = path.into();
        self
    }

    /// Frames `[start, end)` of every channel, clamped to the buffer.
    pub fn slice_frames(&self, start: usize, end: usize) -> AudioBuffer {
        let end = end.min(self.frames());
        let start = start.min(end);
        AudioBuffer {
            channels: self
                .channels
                .iter()
                .map(|c| c[start..end].to_vec())
                .collect(),
            sample_rate: self.sample_rate,
            source_path: self.source_path.clone(),
        }
    }

    /// Mono at [`CANONICAL_RATE`].
    pub fn canonical(&self) -> Result<AudioBuffer, AudioError> {
        resample(&downmix_mono(self), CANONICAL_RATE)
    }
}

/// Container formats this build can decode.
pub fn supported_formats() -> &'static [&'static str] {
    &["wav"]
}

/// Decodes a RIFF/WAVE file. Integer PCM is divided by `2^(bits-1)`;
/// float PCM is taken as-is. No clipping is applied.
pub fn decode_audio(path: &Path) -> Result<AudioBuffer, AudioError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => AudioError::FileNotFound(path.to_path_buf()),
        _ => AudioError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let corrupt = |reason: String| AudioError::CorruptStream {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| match e {
        hound::Error::Unsupported => AudioError::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "unsupported WAV encoding".into(),
        },
        hound::Error::FormatError(msg) if msg.contains("RIFF") || msg.contains("WAVE") => {
            // A present, non-empty file without a RIFF header is some other container.
            if std::fs::metadata(path).map(|m| m.len() >= 12).unwrap_or(false) {
                AudioError::UnsupportedFormat {
                    path: path.to_path_buf(),
                    reason: msg.to_string(),
                }
            } else {
                corrupt(msg.to_string())
            }
        }
        other => corrupt(other.to_string()),
    })?;

    let spec = reader.spec();
    let channel_count = usize::from(spec.channels);
    if channel_count == 0 || spec.sample_rate == 0 {
        return Err(corrupt("zero channels or sample rate".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| corrupt(e.to_string()))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (f64::from(v) * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(|e| corrupt(e.to_string()))?
        }
        (fmt, bits) => {
            return Err(AudioError::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("{fmt:?} PCM at {bits} bits"),
            })
        }
    };
    if interleaved.len() % channel_count != 0 {
        return Err(corrupt("partial trailing frame".into()));
    }
    if let Some(bad) = interleaved.iter().find(|s| !s.is_finite()) {
        return Err(corrupt(format!("non-finite sample {bad}")));
    }
    let frames = interleaved.len() / channel_count;
    let mut channels = vec![Vec::with_capacity(frames); channel_count];
    for frame in interleaved.chunks_exact(channel_count) {
        for (ch, &s) in channels.iter_mut().zip(frame) {
            ch.push(s);
        }
    }
    AudioBuffer::new(channels, spec.sample_rate, path.to_string_lossy()).map_err(|e| {
        corrupt(e.to_string())
    })
}

/// Writes a buffer as 32-bit float WAV. Float output keeps canonical clips
/// bit-exact through a write/decode round trip.
pub fn write_wav(buffer: &AudioBuffer, path: &Path) -> Result<(), AudioError> {
    let io_err = |e: hound::Error| AudioError::Io {
        path: path.to_path_buf(),
        source: match e {
            hound::Error::IoError(io) => io,
            other => std::io::Error::other(other.to_string()),
        },
    };
    let spec = hound::WavSpec {
        channels: buffer.channel_count() as u16,
        sample_rate: buffer.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for i in 0..buffer.frames() {
        for ch in &buffer.channels {
            writer.write_sample(ch[i]).map_err(io_err)?;
        }
    }
    writer.finalize().map_err(io_err)
}

/// Arithmetic mean of the channels. Mono input is returned unchanged.
pub fn downmix_mono(buffer: &AudioBuffer) -> AudioBuffer {
    if buffer.is_mono() {
        return buffer.clone();
    }
    let n = buffer.channel_count() as f64;
    let mixed = (0..buffer.frames())
        .map(|i| {
            let sum: f64 = buffer.channels.iter().map(|c| f64::from(c[i])).sum();
            (sum / n) as f32
        })
        .collect();
    AudioBuffer {
        channels: vec![mixed],
        sample_rate: buffer.sample_rate,
        source_path: buffer.source_path.clone(),
    }
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// Output length is `round(frames * target / source)`. Resampling to the
/// current rate returns an identical copy.
pub fn resample(buffer: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if target_rate == buffer.sample_rate {
        return Ok(buffer.clone());
    }
    let kernel = SincKernel::new(buffer.sample_rate, target_rate);
    let out_frames = ((buffer.frames() as u64 * u64::from(target_rate)
        + u64::from(buffer.sample_rate) / 2)
        / u64::from(buffer.sample_rate)) as usize;
    let channels = buffer
        .channels
        .iter()
        .map(|c| kernel.apply(c, out_frames))
        .collect();
    Ok(AudioBuffer {
        channels,
        sample_rate: target_rate,
        source_path: buffer.source_path.clone(),
    })
}

/// Polyphase sinc kernel. Rate pairs reduce to `source/g : target/g`, so
/// output sample `n` sits at fractional phase `(n * up) mod down` and the
/// taps for each phase can be tabulated once.
struct SincKernel {
    up: u64,
    down: u64,
    reach: i64,
    /// `down` rows of `2 * reach + 1` taps, for input offsets `-reach..=reach`.
    table: Vec<f64>,
}

impl SincKernel {
    fn new(source: u32, target: u32) -> Self {
        let g = gcd(u64::from(source), u64::from(target));
        let (up, down) = (u64::from(source) / g, u64::from(target) / g);
        // Lowpass at the lower Nyquist, slightly inside it.
        let cutoff = (f64::from(target) / f64::from(source)).min(1.0) * 0.97;
        let half_width = SINC_HALF_WIDTH as f64 / cutoff;
        let reach = half_width.ceil() as i64 + 1;
        let i0_beta = bessel_i0(KAISER_BETA);
        let width = (2 * reach + 1) as usize;
        let mut table = vec![0.0; width * down as usize];
        for phase in 0..down {
            let frac = phase as f64 / down as f64;
            let row = &mut table[phase as usize * width..(phase as usize + 1) * width];
            for (slot, j) in row.iter_mut().zip(-reach..=reach) {
                let t = j as f64 - frac;
                if t.abs() > half_width {
                    continue;
                }
                let ratio = t / half_width;
                let window = bessel_i0(KAISER_BETA * (1.0 - ratio * ratio).sqrt()) / i0_beta;
                *slot = cutoff * sinc(cutoff * t) * window;
            }
        }
        Self {
            up,
            down,
            reach,
            table,
        }
    }

    fn apply(&self, input: &[f32], out_frames: usize) -> Vec<f32> {
        let width = (2 * self.reach + 1) as usize;
        let len = input.len() as i64;
        (0..out_frames as u64)
            .map(|n| {
                let pos = n * self.up;
                let base = (pos / self.down) as i64;
                let phase = (pos % self.down) as usize;
                let row = &self.table[phase * width..(phase + 1) * width];
                let lo = (base - self.reach).max(0);
                let hi = (base + self.reach).min(len - 1);
                let mut acc = 0.0f64;
                for k in lo..=hi {
                    acc += f64::from(input[k as usize]) * row[(k - base + self.reach) as usize];
                }
                acc.clamp(-1.0, 1.0) as f32
            })
            .collect()
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Zeroth-order modified Bessel function of the first kind (series form).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}
