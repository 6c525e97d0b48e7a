//! Categorical tags for a clip: tempo and energy classes, key, instruments
//! and passthrough metadata from the track's sidecar file.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{classify_instruments, Adapter, AdapterError, Task};
use crate::audio::AudioBuffer;
use crate::dsp::{
    chroma, estimate_key, estimate_tempo, mean_chroma, rms_energy, ChromaVector, DspError, EnergyEnvelope,
    KeyLabel, TempoEstimate, MAX_BPM, MIN_BPM,
};

/// dBFS reported for digital silence, in place of negative infinity.
pub const SILENCE_DBFS: f64 = -120.0;

const ENERGY_FRAME_SECONDS: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("tempo {0} BPM lies outside [60, 180)")]
    OutOfRange(f64),
    #[error("feature extraction failed: {0}")]
    Dsp(#[from] DspError),
    #[error("sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TempoClass {
    Slow,
    Moderate,
    Upbeat,
    Fast,
}

impl TempoClass {
    pub const ALL: [TempoClass; 4] = [TempoClass::Slow, TempoClass::Moderate, TempoClass::Upbeat, TempoClass::Fast];

    pub fn as_str(&self) -> &'static str {
        match self {
            TempoClass::Slow => "Slow",
            TempoClass::Moderate => "Moderate",
            TempoClass::Upbeat => "Upbeat",
            TempoClass::Fast => "Fast",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EnergyClass {
    Low,
    Moderate,
    High,
}

impl EnergyClass {
    pub const ALL: [EnergyClass; 3] = [EnergyClass::Low, EnergyClass::Moderate, EnergyClass::High];

    pub fn as_str(&self) -> &'static str {
        match self {
            EnergyClass::Low => "Low",
            EnergyClass::Moderate => "Moderate",
            EnergyClass::High => "High",
        }
    }
}

impl fmt::Display for TempoClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for EnergyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Class boundaries. Tempo bounds are exclusive upper limits in BPM; energy
/// bounds are in dBFS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TagThresholds {
    pub slow_below_bpm: f64,
    pub moderate_below_bpm: f64,
    pub upbeat_below_bpm: f64,
    pub low_below_dbfs: f64,
    pub high_above_dbfs: f64,
}

impl Default for TagThresholds {
    fn default() -> Self {
        Self {
            slow_below_bpm: 90.0,
            moderate_below_bpm: 125.0,
            upbeat_below_bpm: 145.0,
            low_below_dbfs: -30.0,
            high_above_dbfs: -12.0,
        }
    }
}

impl TagThresholds {
    pub fn validate(&self) -> Result<(), String> {
        let t = [MIN_BPM, self.slow_below_bpm, self.moderate_below_bpm, self.upbeat_below_bpm, MAX_BPM];
        if !t.windows(2).all(|w| w[0] <= w[1]) {
            return Err(format!("tempo thresholds must be ordered within [60, 180]: {t:?}"));
        }
        if !(self.low_below_dbfs <= self.high_above_dbfs) {
            return Err("low_below_dbfs must not exceed high_above_dbfs".into());
        }
        Ok(())
    }
}

pub fn bucket_tempo(estimate: &TempoEstimate, thresholds: &TagThresholds) -> Result<TempoClass, TagError> {
    let bpm = estimate.bpm;
    if !(MIN_BPM..MAX_BPM).contains(&bpm) {
        return Err(TagError::OutOfRange(bpm));
    }
    Ok(if bpm < thresholds.slow_below_bpm {
        TempoClass::Slow
    } else if bpm < thresholds.moderate_below_bpm {
        TempoClass::Moderate
    } else if bpm < thresholds.upbeat_below_bpm {
        TempoClass::Upbeat
    } else {
        TempoClass::Fast
    })
}

/// 20·log10 of an RMS amplitude; `-inf` for zero.
pub fn dbfs(rms: f64) -> f64 {
    20.0 * rms.log10()
}

pub fn bucket_dbfs(db: f64, thresholds: &TagThresholds) -> EnergyClass {
    if db.is_nan() || db < thresholds.low_below_dbfs {
        EnergyClass::Low
    } else if db > thresholds.high_above_dbfs {
        EnergyClass::High
    } else {
        EnergyClass::Moderate
    }
}

pub fn bucket_energy(envelope: &EnergyEnvelope, thresholds: &TagThresholds) -> EnergyClass {
    bucket_dbfs(dbfs(envelope.mean()), thresholds)
}

/// Known instrument names, in display form.
pub const INSTRUMENT_VOCABULARY: [&str; 12] = [
    "Synthesizer",
    "Piano",
    "Ney",
    "Acoustic Guitar",
    "Bass",
    "Drums",
    "Daaf",
    "Kamancheh",
    "Tonbak",
    "Setar",
    "Santur",
    "Tar",
];

/// Alternative spellings mapped onto the vocabulary.
const INSTRUMENT_ALIASES: [(&str, &str); 10] = [
    ("daf", "Daaf"),
    ("kamancheh", "Kamancheh"),
    ("kamanche", "Kamancheh"),
    ("tombak", "Tonbak"),
    ("zarb", "Tonbak"),
    ("setār", "Setar"),
    ("santūr", "Santur"),
    ("tār", "Tar"),
    ("synth", "Synthesizer"),
    ("drum kit", "Drums"),
];

/// An instrument name. Vocabulary names and aliases are matched
/// case-insensitively and stored in display form; anything else is kept
/// verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct Instrument(String);

impl Instrument {
    pub fn new(name: &str) -> Self {
        let trimmed = name.trim();
        let folded = trimmed.to_lowercase();
        let canonical = INSTRUMENT_VOCABULARY
            .iter()
            .find(|v| v.to_lowercase() == folded)
            .copied()
            .or_else(|| INSTRUMENT_ALIASES.iter().find(|(a, _)| *a == folded).map(|(_, v)| *v));
        Instrument(canonical.map(str::to_string).unwrap_or_else(|| trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_known(&self) -> bool {
        INSTRUMENT_VOCABULARY.contains(&self.0.as_str())
    }
}

impl From<String> for Instrument {
    fn from(s: String) -> Self {
        Instrument::new(&s)
    }
}

impl From<Instrument> for String {
    fn from(i: Instrument) -> Self {
        i.0
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Per-track metadata stored next to the audio as `<basename>.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mood: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artist: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub happiness: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity: Option<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instruments: Vec<String>,
}

pub fn sidecar_path(audio: &Path) -> PathBuf {
    audio.with_extension("json")
}

/// Reads the sidecar for `audio`. A missing file is `Ok(None)`.
pub fn read_sidecar(audio: &Path) -> Result<Option<Sidecar>, TagError> {
    let path = sidecar_path(audio);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => {
            return Err(TagError::Sidecar {
                path,
                reason: e.to_string(),
            })
        }
    };
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| TagError::Sidecar {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    for (name, value) in [("happiness", sidecar.happiness), ("popularity", sidecar.popularity)] {
        if value.is_some_and(|v| v > 99) {
            return Err(TagError::Sidecar {
                path,
                reason: format!("{name} must be within 0..=99"),
            });
        }
    }
    Ok(Some(sidecar))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSet {
    pub tempo_class: TempoClass,
    pub energy_class: EnergyClass,
    #[serde(default)]
    pub key: Option<KeyLabel>,
    #[serde(default)]
    pub instruments: BTreeSet<Instrument>,
    /// False when the instrument adapter could not be reached.
    #[serde(default = "yes")]
    pub instruments_complete: bool,
    #[serde(default)]
    pub genre: Option<String>,
    #[serde(default)]
    pub mood: Option<String>,
    #[serde(default)]
    pub artist: Option<String>,
    #[serde(default)]
    pub happiness: Option<u8>,
    #[serde(default)]
    pub popularity: Option<u8>,
}

fn yes() -> bool {
    true
}

/// Continuous features kept alongside the tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFeatures {
    pub bpm: f64,
    pub tempo_confidence: f64,
    /// Floored at [`SILENCE_DBFS`].
    pub mean_rms_dbfs: f64,
    pub mean_chroma: ChromaVector,
}

#[derive(Debug, Clone)]
pub struct ClipAnalysis {
    pub tempo: TempoEstimate,
    pub envelope: EnergyEnvelope,
    pub mean_chroma: ChromaVector,
    pub key: Option<KeyLabel>,
}

impl ClipAnalysis {
    pub fn features(&self) -> ClipFeatures {
        ClipFeatures {
            bpm: self.tempo.bpm,
            tempo_confidence: self.tempo.confidence,
            mean_rms_dbfs: dbfs(self.envelope.mean()).max(SILENCE_DBFS),
            mean_chroma: self.mean_chroma,
        }
    }
}

/// Runs the signal features on a mono clip.
pub fn analyze_clip(clip: &AudioBuffer) -> Result<ClipAnalysis, TagError> {
    let tempo = estimate_tempo(clip)?;
    let envelope = rms_energy(clip, ENERGY_FRAME_SECONDS, ENERGY_FRAME_SECONDS)?;
    let mean_chroma = mean_chroma(&chroma(clip)?);
    let key = match estimate_key(&mean_chroma) {
        Ok(k) => Some(k),
        Err(DspError::SilentInput) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(ClipAnalysis {
        tempo,
        envelope,
        mean_chroma,
        key,
    })
}

/// Instrument task for a genre string.
pub fn instrument_task(genre: Option<&str>) -> Task {
    match genre {
        Some(g) if g.to_lowercase().contains("traditional") => Task::InstrumentsTraditional,
        _ => Task::InstrumentsGeneral,
    }
}

#[derive(Debug, Clone)]
pub struct TaggedClip {
    pub tags: TagSet,
    pub features: ClipFeatures,
    /// Set when instruments could not be obtained.
    pub adapter_error: Option<AdapterError>,
}

/// Tags one clip. `audio_path` is the clip file handed to the adapter;
/// `sidecar` belongs to the clip's track.
pub fn tag_clip(
    clip: &AudioBuffer,
    audio_path: &Path,
    sidecar: Option<(&Sidecar, &Path)>,
    adapter: Option<&dyn Adapter>,
    thresholds: &TagThresholds,
) -> Result<TaggedClip, TagError> {
    let analysis = analyze_clip(clip)?;
    let tempo_class = bucket_tempo(&analysis.tempo, thresholds)?;
    let energy_class = bucket_energy(&analysis.envelope, thresholds);

    let meta = sidecar.map(|(s, _)| s);
    let mut key = analysis.key;
    if let Some(text) = meta.and_then(|s| s.key.as_deref()) {
        match text.parse::<KeyLabel>() {
            Ok(k) => key = Some(k),
            Err(e) => log::warn!("ignoring sidecar key for {}: {e}", audio_path.display()),
        }
    }

    let task = instrument_task(meta.and_then(|s| s.genre.as_deref()));
    let outcome = match adapter {
        None => Err(AdapterError::Unavailable(task)),
        Some(a) if !a.supports(task) => Err(AdapterError::Unavailable(task)),
        Some(a) => classify_instruments(a, task, audio_path, sidecar.map(|(_, p)| p)),
    };
    let (instruments, adapter_error) = match outcome {
        Ok(names) => (names.iter().map(|n| Instrument::new(n)).collect(), None),
        Err(e) => {
            log::warn!("instrument tagging failed for {}: {e}", audio_path.display());
            (BTreeSet::new(), Some(e))
        }
    };

    let tags = TagSet {
        tempo_class,
        energy_class,
        key,
        instruments,
        instruments_complete: adapter_error.is_none(),
        genre: meta.and_then(|s| s.genre.clone()),
        mood: meta.and_then(|s| s.mood.clone()),
        artist: meta.and_then(|s| s.artist.clone()),
        happiness: meta.and_then(|s| s.happiness),
        popularity: meta.and_then(|s| s.popularity),
    };
    Ok(TaggedClip {
        tags,
        features: analysis.features(),
        adapter_error,
    })
}
