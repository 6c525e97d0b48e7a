//! Client side of the model-adapter protocol.
//!
//! Model-backed steps (source separation, instrument tagging, captioning,
//! label classification) run in child processes that speak line-delimited
//! JSON over stdio. The wire format, version 1:
//!
//! ```text
//! child  -> {"protocol":1,"tasks":["separate","caption",...]}      handshake, first line
//! parent -> {"id":"7","task":"caption","payload":{...}}             request
//! child  -> {"id":"7","ok":true,"result":{...}}                     success
//! child  -> {"id":"7","ok":false,"error":{"code":"...","message":"..."}}
//! ```
//!
//! One UTF-8 JSON object per line, no embedded newlines. Replies may come
//! back in any order and are matched by `id`. Audio always travels as a
//! file path. Any line that is not a valid frame is a hard protocol error
//! and the handle stops accepting work.
//!
//! Payloads by task:
//!
//! | task | payload | result |
//! |------|---------|--------|
//! | `separate` | `{audio_path, output_dir}` | `{vocal_path, instrumental_path}` |
//! | `instruments_traditional`, `instruments_general` | `{audio_path, sidecar_path?}` | `{instruments: [..]}` |
//! | `caption` | `{prompt: PromptSpec, prompt_text}` | `{text}` |
//! | `classify_labels` | `{audio_path}` | `{labels: {name: weight}}` |

pub mod mock;
mod process;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audio::{decode_audio, CANONICAL_RATE};

pub use mock::MockAdapter;
pub use process::{spawn_adapter, AdapterHandle};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Separate,
    InstrumentsTraditional,
    InstrumentsGeneral,
    Caption,
    ClassifyLabels,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Separate,
        Task::InstrumentsTraditional,
        Task::InstrumentsGeneral,
        Task::Caption,
        Task::ClassifyLabels,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Separate => "separate",
            Task::InstrumentsTraditional => "instruments_traditional",
            Task::InstrumentsGeneral => "instruments_general",
            Task::Caption => "caption",
            Task::ClassifyLabels => "classify_labels",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown adapter task {s:?}"))
    }
}

/// First line a child writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub tasks: Vec<String>,
}

/// Request frame. `task` stays a string on the wire so a server can answer
/// names it does not know with `unsupported_task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub id: String,
    pub task: String,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reply {
    pub id: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RemoteErrorBody>,
}

impl Reply {
    pub fn success(id: impl Into<String>, result: Value) -> Self {
        Self {
            id: id.into(),
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(id: impl Into<String>, code: &str, message: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ok: false,
            result: None,
            error: Some(RemoteErrorBody {
                code: code.to_string(),
                message: message.into(),
            }),
        }
    }
}

/// Remote error codes used by the in-tree servers.
pub mod codes {
    pub const UNSUPPORTED_TASK: &str = "unsupported_task";
    pub const BAD_PAYLOAD: &str = "bad_payload";
    pub const INFERENCE_FAILED: &str = "inference_failed";
    pub const MODEL_LOAD_FAILED: &str = "model_load_failed";
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("failed to spawn adapter {command:?}: {reason}")]
    SpawnFailure { command: String, reason: String },
    #[error("adapter sent no handshake within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("malformed handshake line: {0}")]
    HandshakeParse(String),
    #[error("adapter speaks protocol {got}, expected {expected}")]
    ProtocolVersionMismatch { expected: u32, got: u32 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("task {task} timed out after {timeout:?}{diagnostic}")]
    Timeout {
        task: String,
        timeout: Duration,
        diagnostic: String,
    },
    #[error("adapter process exited: {0}")]
    ChildExited(String),
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("adapter does not offer task {0}")]
    UnsupportedTask(Task),
    #[error("adapter handle has been shut down")]
    Shutdown,
    #[error("no adapter configured for task {0}")]
    Unavailable(Task),
    #[error("malformed result for task {task}: {reason}")]
    BadResult { task: Task, reason: String },
    #[error("stem file missing: {0}")]
    StemMissing(PathBuf),
    #[error("stem {path} is invalid: {reason}")]
    StemInvalid { path: PathBuf, reason: String },
}

/// Per-task reply deadlines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTimeouts {
    pub handshake_s: f64,
    pub separate_s: f64,
    pub instruments_s: f64,
    pub caption_s: f64,
    pub classify_labels_s: f64,
}

impl Default for AdapterTimeouts {
    fn default() -> Self {
        Self {
            handshake_s: 10.0,
            separate_s: 120.0,
            instruments_s: 60.0,
            caption_s: 60.0,
            classify_labels_s: 60.0,
        }
    }
}

impl AdapterTimeouts {
    pub fn for_task(&self, task: Task) -> Duration {
        let s = match task {
            Task::Separate => self.separate_s,
            Task::InstrumentsTraditional | Task::InstrumentsGeneral => self.instruments_s,
            Task::Caption => self.caption_s,
            Task::ClassifyLabels => self.classify_labels_s,
        };
        Duration::from_secs_f64(s)
    }

    pub fn handshake(&self) -> Duration {
        Duration::from_secs_f64(self.handshake_s)
    }
}

/// Anything that can answer adapter requests: a child process or the
/// in-process mock. Implementations are shared across worker threads.
pub trait Adapter: Send + Sync {
    fn tasks(&self) -> Vec<Task>;

    fn call(&self, task: Task, payload: Value) -> Result<Value, AdapterError>;

    fn supports(&self, task: Task) -> bool {
        self.tasks().contains(&task)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemPaths {
    pub vocal: PathBuf,
    pub instrumental: PathBuf,
}

/// Runs `separate` and checks both stems: present, canonical rate, and the
/// input's duration within one frame.
pub fn separate_stems(adapter: &dyn Adapter, clip: &Path, output_dir: &Path) -> Result<StemPaths, AdapterError> {
    let result = adapter.call(
        Task::Separate,
        serde_json::json!({ "audio_path": clip, "output_dir": output_dir }),
    )?;
    #[derive(Deserialize)]
    struct SeparateResult {
        vocal_path: PathBuf,
        instrumental_path: PathBuf,
    }
    let parsed: SeparateResult = serde_json::from_value(result).map_err(|e| AdapterError::BadResult {
        task: Task::Separate,
        reason: e.to_string(),
    })?;
    let input_frames = decode_audio(clip)
        .map_err(|e| AdapterError::StemInvalid {
            path: clip.to_path_buf(),
            reason: e.to_string(),
        })?
        .frames();
    for path in [&parsed.vocal_path, &parsed.instrumental_path] {
        if !path.is_file() {
            return Err(AdapterError::StemMissing(path.clone()));
        }
        let stem = decode_audio(path).map_err(|e| AdapterError::StemInvalid {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if stem.sample_rate() != CANONICAL_RATE || !stem.is_mono() {
            return Err(AdapterError::StemInvalid {
                path: path.clone(),
                reason: format!("{} Hz, {} channels", stem.sample_rate(), stem.channel_count()),
            });
        }
        if stem.frames().abs_diff(input_frames) > 1 {
            return Err(AdapterError::StemInvalid {
                path: path.clone(),
                reason: format!("{} frames, input has {input_frames}", stem.frames()),
            });
        }
    }
    Ok(StemPaths {
        vocal: parsed.vocal_path,
        instrumental: parsed.instrumental_path,
    })
}

/// Instrument names from `instruments_traditional` / `instruments_general`.
pub fn classify_instruments(
    adapter: &dyn Adapter,
    task: Task,
    audio_path: &Path,
    sidecar_path: Option<&Path>,
) -> Result<Vec<String>, AdapterError> {
    let result = adapter.call(
        task,
        serde_json::json!({ "audio_path": audio_path, "sidecar_path": sidecar_path }),
    )?;
    #[derive(Deserialize)]
    struct InstrumentsResult {
        instruments: Vec<String>,
    }
    serde_json::from_value::<InstrumentsResult>(result)
        .map(|r| r.instruments)
        .map_err(|e| AdapterError::BadResult {
            task,
            reason: e.to_string(),
        })
}

/// Label distribution from `classify_labels`.
pub fn classify_labels(adapter: &dyn Adapter, audio_path: &Path) -> Result<BTreeMap<String, f64>, AdapterError> {
    let result = adapter.call(Task::ClassifyLabels, serde_json::json!({ "audio_path": audio_path }))?;
    #[derive(Deserialize)]
    struct LabelsResult {
        labels: BTreeMap<String, f64>,
    }
    serde_json::from_value::<LabelsResult>(result)
        .map(|r| r.labels)
        .map_err(|e| AdapterError::BadResult {
            task: Task::ClassifyLabels,
            reason: e.to_string(),
        })
}
