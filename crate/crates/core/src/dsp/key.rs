//! Krumhansl-Kessler template matching over the 24 major/minor keys.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::chroma::{ChromaVector, PITCH_CLASS_NAMES};
use super::DspError;

/// Probe-tone profile for C major, C first.
pub const KK_MAJOR: [f64; 12] = [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88];
/// Probe-tone profile for C minor, C first.
pub const KK_MINOR: [f64; 12] = [6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Major,
    Minor,
}

/// One of the 24 major/minor keys. Serialized as e.g. `"B minor"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KeyLabel {
    tonic: u8,
    mode: Mode,
}

impl KeyLabel {
    pub fn new(tonic: u8, mode: Mode) -> Self {
        assert!(tonic < 12, "tonic pitch class out of range: {tonic}");
        Self { tonic, mode }
    }

    pub fn tonic(&self) -> u8 {
        self.tonic
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// All 24 keys, major before minor within each tonic.
    pub fn all() -> impl Iterator<Item = KeyLabel> {
        (0..12u8).flat_map(|t| [KeyLabel::new(t, Mode::Major), KeyLabel::new(t, Mode::Minor)])
    }

    pub fn transpose(&self, semitones: i32) -> Self {
        KeyLabel::new((i32::from(self.tonic) + semitones).rem_euclid(12) as u8, self.mode)
    }
}

impl fmt::Display for KeyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", PITCH_CLASS_NAMES[usize::from(self.tonic)], mode)
    }
}

impl From<KeyLabel> for String {
    fn from(k: KeyLabel) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for KeyLabel {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl FromStr for KeyLabel {
    type Err = String;

    /// Accepts `"B minor"`, `"C# Major"`, `"C♯/D♭ Min"`, `"Bb min"`, `"Am"`.
    fn from_str(s: &str) -> Result<Self, String> {
        let cleaned = s.trim().replace('♯', "#").replace('♭', "b");
        let (note_part, mode_part) = match cleaned.split_once(char::is_whitespace) {
            Some((n, m)) => (n.to_string(), m.trim().to_lowercase()),
            None => {
                // Compact forms: "Am", "C#m", "F".
                match cleaned.strip_suffix('m') {
                    Some(n) if !n.is_empty() => (n.to_string(), "minor".to_string()),
                    _ => (cleaned.clone(), "major".to_string()),
                }
            }
        };
        let mode = match mode_part.as_str() {
            "major" | "maj" => Mode::Major,
            "minor" | "min" => Mode::Minor,
            other => return Err(format!("unknown mode {other:?} in key {s:?}")),
        };
        // "C#/Db" spellings: the first name decides.
        let note = note_part.split('/').next().unwrap_or_default();
        let tonic = parse_note(note).ok_or_else(|| format!("unknown tonic in key {s:?}"))?;
        Ok(KeyLabel::new(tonic, mode))
    }
}

fn parse_note(note: &str) -> Option<u8> {
    let mut chars = note.chars();
    let base: i32 = match chars.next()?.to_ascii_uppercase() {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return None,
    };
    let mut offset = 0;
    for c in chars {
        match c {
            '#' => offset += 1,
            'b' => offset -= 1,
            _ => return None,
        }
    }
    Some((base + offset).rem_euclid(12) as u8)
}

/// Key with the highest Pearson correlation against the rotated profiles.
/// Ties go to the lower tonic, then to major.
pub fn estimate_key(vector: &ChromaVector) -> Result<KeyLabel, DspError> {
    if vector.is_zero() {
        return Err(DspError::SilentInput);
    }
    let mut best: Option<(f64, KeyLabel)> = None;
    for key in KeyLabel::all() {
        let profile = match key.mode {
            Mode::Major => &KK_MAJOR,
            Mode::Minor => &KK_MINOR,
        };
        let r = rotated_correlation(&vector.0, profile, usize::from(key.tonic));
        if best.is_none_or(|(b, _)| r > b) {
            best = Some((r, key));
        }
    }
    Ok(best.map(|(_, k)| k).expect("24 candidate keys"))
}

/// Pearson correlation of `v` with `profile` rotated to start at `tonic`.
///
/// Terms are accumulated in profile order and the means/variances are
/// computed over sorted values, so rotating `v` and `tonic` together gives
/// a bitwise-identical result.
fn rotated_correlation(v: &[f64; 12], profile: &[f64; 12], tonic: usize) -> f64 {
    let mean_v = order_free_sum(v.iter().copied()) / 12.0;
    let mean_p = order_free_sum(profile.iter().copied()) / 12.0;
    let var_v = order_free_sum(v.iter().map(|x| (x - mean_v).powi(2)));
    let var_p = order_free_sum(profile.iter().map(|x| (x - mean_p).powi(2)));
    let cov: f64 = (0..12)
        .map(|j| (v[(j + tonic) % 12] - mean_v) * (profile[j] - mean_p))
        .sum();
    let denom = (var_v * var_p).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        cov / denom
    }
}

fn order_free_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sorted: Vec<f64> = values.collect();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}
