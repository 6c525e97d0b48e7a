//! Manifests, clip records, corpus statistics and stage exports.
//!
//! # Manifest format
//!
//! A manifest is UTF-8 text with one JSON object per line. Line 1 is the
//! header:
//!
//! | field | type | meaning |
//! |-------|------|---------|
//! | `schema_version` | integer | format version, currently 1 |
//! | `kind` | string | record type: `track`, `clip`, `stage1`, `stage2`, `stage3` |
//! | `canonical_rate` | integer | sample rate of every referenced audio file |
//! | `created_at` | string | RFC 3339 UTC timestamp, excluded from [`content_digest`] |
//! | `tool_version` | string | version of the writing tool |
//! | `global_seed` | integer | seed the corpus was generated with |
//!
//! Every following line is one record of the header's kind. A clip record
//! ([`ClipRecord`]) has:
//!
//! | field | type | meaning |
//! |-------|------|---------|
//! | `clip_id` | string | 32 hex digits, digest of `track_id` and the sample span |
//! | `track_id` | string | source track identifier |
//! | `clip_index` | integer | position of the clip within its track |
//! | `span` | object | `start_seconds`, `end_seconds`, `start_sample`, `end_sample`, `boundary_score` |
//! | `audio_path` | string | clip WAV file |
//! | `stem_paths` | object or null | `vocal`, `instrumental` |
//! | `tags` | object or null | tempo/energy class, key, instruments, passthrough metadata |
//! | `caption` | object or null | `text`, `source`, `prompt_hash`, `fallback` |
//! | `features` | object or null | `bpm`, `tempo_confidence`, `mean_rms_dbfs`, `mean_chroma` (12 floats) |
//! | `issues` | array | reasons the record is incomplete, empty when complete |
//!
//! Relative paths in records are relative to the manifest's directory.

mod export;
mod stats;

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::StemPaths;
use crate::caption::Caption;
use crate::segment::ClipSpan;
use crate::tags::{ClipFeatures, TagSet};

pub use export::{export_training_manifests, ExportConfig, Stage1Entry, Stage2Entry, Stage3Entry, StageManifests};
pub use stats::{compute_stats, decile_label, Distribution, Row, StatsReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: empty manifest, header missing")]
    MissingHeader { path: PathBuf },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: unknown schema version {version}")]
    SchemaVersionUnknown { path: PathBuf, version: u32 },
    #[error("{path}: expected {expected} records, header says {found}")]
    WrongKind {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("duplicate clip id {0}")]
    DuplicateClipId(String),
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A record line that failed to parse. Reading continues past it.
#[derive(Debug, Clone, PartialEq)]
pub struct MalformedRecord {
    /// 1-based line number in the file.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub kind: String,
    pub canonical_rate: u32,
    pub created_at: String,
    pub tool_version: String,
    pub global_seed: u64,
}

impl ManifestHeader {
    pub fn new(kind: &str, global_seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            canonical_rate: crate::audio::CANONICAL_RATE,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            global_seed,
        }
    }
}

/// Why a record is incomplete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Issue {
    SeparationFailed,
    TaggingFailed,
    InstrumentsMissing,
    CaptionFailed,
    CaptionFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub track_id: String,
    pub source_path: PathBuf,
    /// Canonical (mono, 32 kHz) copy of the track.
    pub audio_path: PathBuf,
    pub duration_seconds: f64,
    pub source_rate: u32,
    pub source_channels: usize,
    #[serde(default)]
    pub sidecar_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub track_id: String,
    /// Position of the clip within its track, from 0.
    pub clip_index: usize,
    pub span: ClipSpan,
    pub audio_path: PathBuf,
    #[serde(default)]
    pub stem_paths: Option<StemPaths>,
    #[serde(default)]
    pub tags: Option<TagSet>,
    #[serde(default)]
    pub caption: Option<Caption>,
    #[serde(default)]
    pub features: Option<ClipFeatures>,
    #[serde(default)]
    pub issues: BTreeSet<Issue>,
}

impl ClipRecord {
    pub fn new(track_id: &str, clip_index: usize, span: ClipSpan, audio_path: PathBuf) -> Self {
        Self {
            clip_id: clip_id(track_id, &span),
            track_id: track_id.to_string(),
            clip_index,
            span,
            audio_path,
            stem_paths: None,
            tags: None,
            caption: None,
            features: None,
            issues: BTreeSet::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Stable id of a clip: first 16 bytes of SHA-256 over the track id and the
/// sample span, hex encoded.
pub fn clip_id(track_id: &str, span: &ClipSpan) -> String {
    let mut h = Sha256::new();
    h.update(track_id.as_bytes());
    h.update([0u8]);
    h.update(span.start_sample.to_le_bytes());
    h.update(span.end_sample.to_le_bytes());
    hex::encode(&h.finalize()[..16])
}

/// A manifest read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest<R> {
    pub header: ManifestHeader,
    pub records: Vec<R>,
}

pub type CorpusManifest = Manifest<ClipRecord>;

/// Appends records to a manifest file. Intended to have a single owner.
pub struct ManifestWriter {
    path: PathBuf,
    tmp: PathBuf,
    out: BufWriter<File>,
}

impl ManifestWriter {
    /// Writes to a temporary sibling that replaces `path` on [`finish`](Self::finish).
    pub fn create(path: &Path, header: &ManifestHeader) -> Result<Self, CorpusError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        let file = File::create(&tmp).map_err(|e| CorpusError::io(&tmp, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            tmp,
            out: BufWriter::new(file),
        };
        w.line(header)?;
        Ok(w)
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<(), CorpusError> {
        let text = serde_json::to_string(value).expect("manifest values serialize");
        writeln!(self.out, "{text}").map_err(|e| CorpusError::io(&self.tmp, e))
    }

    pub fn append<R: Serialize>(&mut self, record: &R) -> Result<(), CorpusError> {
        self.line(record)
    }

    pub fn finish(mut self) -> Result<(), CorpusError> {
        self.out.flush().map_err(|e| CorpusError::io(&self.tmp, e))?;
        std::fs::rename(&self.tmp, &self.path).map_err(|e| CorpusError::io(&self.path, e))
    }
}

pub fn write_manifest<R: Serialize>(path: &Path, header: &ManifestHeader, records: &[R]) -> Result<(), CorpusError> {
    let mut w = ManifestWriter::create(path, header)?;
    for r in records {
        w.append(r)?;
    }
    w.finish()
}

/// Reads a manifest. Unparseable record lines are skipped and reported.
pub fn read_manifest<R: DeserializeOwned>(path: &Path) -> Result<(Manifest<R>, Vec<MalformedRecord>), CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        None => {
            return Err(CorpusError::MissingHeader {
                path: path.to_path_buf(),
            })
        }
        Some(l) => l.map_err(|e| CorpusError::io(path, e))?,
    };
    let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| CorpusError::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    // Check the version before the shape so newer headers get a clear error.
    if let Some(v) = raw.get("schema_version").and_then(|v| v.as_u64()) {
        if v != u64::from(SCHEMA_VERSION) {
            return Err(CorpusError::SchemaVersionUnknown {
                path: path.to_path_buf(),
                version: v as u32,
            });
        }
    }
    let header: ManifestHeader = serde_json::from_value(raw).map_err(|e| CorpusError::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<R>(&line) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(MalformedRecord {
                line: i + 2,
                message: e.to_string(),
            }),
        }
    }
    Ok((Manifest { header, records }, errors))
}

/// Like [`read_manifest`] but also checks the header kind.
pub fn read_manifest_kind<R: DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<(Manifest<R>, Vec<MalformedRecord>), CorpusError> {
    let (m, errors) = read_manifest::<R>(path)?;
    if m.header.kind != kind {
        return Err(CorpusError::WrongKind {
            path: path.to_path_buf(),
            expected: kind.to_string(),
            found: m.header.kind,
        });
    }
    Ok((m, errors))
}

/// Checks that clip ids are unique.
pub fn check_unique_ids(records: &[ClipRecord]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.clip_id.as_str()) {
            return Err(CorpusError::DuplicateClipId(r.clip_id.clone()));
        }
    }
    Ok(())
}

/// SHA-256 over a manifest file's content with `created_at` removed from the
/// header, hex encoded. Two runs with equal inputs produce equal digests.
pub fn content_digest(path: &Path) -> Result<String, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut h = Sha256::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if i == 0 {
            let mut header: serde_json::Value =
                serde_json::from_str(&line).map_err(|e| CorpusError::MalformedHeader {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
            if let Some(obj) = header.as_object_mut() {
                obj.remove("created_at");
            }
            h.update(header.to_string().as_bytes());
        } else {
            h.update(line.as_bytes());
        }
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}
