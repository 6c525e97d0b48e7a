//! Deterministic stand-in for every adapter task.
//!
//! Semantics:
//! - `separate`: the instrumental stem is a byte copy of the input file, the
//!   vocal stem is silence of the same length and rate.
//! - `instruments_*`: echoes the `instruments` list of the sidecar JSON, or
//!   `[]` without one.
//! - `caption`: prompt token texts joined by `", "`, followed by
//!   `"; " + artist_context` when present.
//! - `classify_labels`: mean chroma of the clip, normalized to sum 1 and keyed
//!   by pitch-class name. Silence yields a uniform distribution.
//!
//! [`MockAdapter`] runs in process; [`serve`] speaks the wire protocol and
//! can be told to misbehave for conformance tests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{codes, Adapter, AdapterError, Handshake, Reply, Request, Task, PROTOCOL_VERSION};
use crate::audio::{decode_audio, write_wav, AudioBuffer};
use crate::dsp::{chroma, mean_chroma, PITCH_CLASS_NAMES};

type TaskResult = Result<Value, (String, String)>;

fn bad_payload(message: impl Into<String>) -> (String, String) {
    (codes::BAD_PAYLOAD.to_string(), message.into())
}

fn inference_failed(message: impl Into<String>) -> (String, String) {
    (codes::INFERENCE_FAILED.to_string(), message.into())
}

/// Answers one request with the mock semantics.
pub fn handle_task(task: &str, payload: &Value) -> TaskResult {
    let task: Task = task
        .parse()
        .map_err(|e: String| (codes::UNSUPPORTED_TASK.to_string(), e))?;
    match task {
        Task::Separate => separate(payload),
        Task::InstrumentsTraditional | Task::InstrumentsGeneral => instruments(payload),
        Task::Caption => caption(payload),
        Task::ClassifyLabels => classify_labels(payload),
    }
}

fn audio_path(payload: &Value) -> Result<PathBuf, (String, String)> {
    payload
        .get("audio_path")
        .and_then(Value::as_str)
        .map(PathBuf::from)
        .ok_or_else(|| bad_payload("missing string field audio_path"))
}

fn separate(payload: &Value) -> TaskResult {
    let input = audio_path(payload)?;
    let output_dir = payload
        .get("output_dir")
        .and_then(Value::as_str)
        .map(PathBuf::from)
        .ok_or_else(|| bad_payload("missing string field output_dir"))?;
    let audio = decode_audio(&input).map_err(|e| inference_failed(e.to_string()))?;
    std::fs::create_dir_all(&output_dir).map_err(|e| inference_failed(e.to_string()))?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("clip")
        .to_string();
    let vocal_path = output_dir.join(format!("{stem}.vocal.wav"));
    let instrumental_path = output_dir.join(format!("{stem}.instrumental.wav"));
    std::fs::copy(&input, &instrumental_path).map_err(|e| inference_failed(e.to_string()))?;
    let channels = vec![vec![0.0f32; audio.frames()]; audio.channel_count()];
    let silence = AudioBuffer::new(channels, audio.sample_rate(), "").map_err(|e| inference_failed(e.to_string()))?;
    write_wav(&silence, &vocal_path).map_err(|e| inference_failed(e.to_string()))?;
    Ok(json!({ "vocal_path": vocal_path, "instrumental_path": instrumental_path }))
}

fn instruments(payload: &Value) -> TaskResult {
    audio_path(payload)?;
    let sidecar = match payload.get("sidecar_path") {
        None | Some(Value::Null) => return Ok(json!({ "instruments": [] })),
        Some(Value::String(p)) => PathBuf::from(p),
        Some(_) => return Err(bad_payload("sidecar_path must be a string or null")),
    };
    #[derive(Deserialize)]
    struct Sidecar {
        #[serde(default)]
        instruments: Vec<String>,
    }
    let instruments = match std::fs::read_to_string(&sidecar) {
        Ok(text) => serde_json::from_str::<Sidecar>(&text)
            .map_err(|e| bad_payload(format!("sidecar {}: {e}", sidecar.display())))?
            .instruments,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(inference_failed(e.to_string())),
    };
    Ok(json!({ "instruments": instruments }))
}

fn caption(payload: &Value) -> TaskResult {
    let prompt = payload.get("prompt").ok_or_else(|| bad_payload("missing field prompt"))?;
    let tokens = prompt
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| bad_payload("prompt.tokens must be an array"))?;
    let texts = tokens
        .iter()
        .map(|t| t.get("text").and_then(Value::as_str))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad_payload("every token needs a text field"))?;
    let mut text = texts.join(", ");
    if let Some(artist) = prompt.get("artist_context").and_then(Value::as_str) {
        text.push_str("; ");
        text.push_str(artist);
    }
    Ok(json!({ "text": text }))
}

fn classify_labels(payload: &Value) -> TaskResult {
    let path = audio_path(payload)?;
    let audio = decode_audio(&path).map_err(|e| inference_failed(e.to_string()))?;
    let mono = crate::audio::downmix_mono(&audio);
    let matrix = chroma(&mono).map_err(|e| inference_failed(e.to_string()))?;
    let mean = mean_chroma(&matrix);
    let total: f64 = mean.0.iter().sum();
    let labels: BTreeMap<&str, f64> = PITCH_CLASS_NAMES
        .iter()
        .zip(mean.0)
        .map(|(name, v)| (*name, if total > 0.0 { v / total } else { 1.0 / 12.0 }))
        .collect();
    Ok(json!({ "labels": labels }))
}

/// In-process mock. Faults can be injected per task.
#[derive(Debug, Clone)]
pub struct MockAdapter {
    tasks: Vec<Task>,
    failing: HashSet<Task>,
    empty_captions: bool,
}

impl Default for MockAdapter {
    fn default() -> Self {
        Self::new()
    }
}

impl MockAdapter {
    pub fn new() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            failing: HashSet::new(),
            empty_captions: false,
        }
    }

    pub fn with_tasks(tasks: &[Task]) -> Self {
        Self {
            tasks: tasks.to_vec(),
            ..Self::new()
        }
    }

    /// Every call to `task` fails with `inference_failed`.
    pub fn failing(mut self, task: Task) -> Self {
        self.failing.insert(task);
        self
    }

    /// Caption replies carry empty text.
    pub fn with_empty_captions(mut self) -> Self {
        self.empty_captions = true;
        self
    }
}

impl Adapter for MockAdapter {
    fn tasks(&self) -> Vec<Task> {
        self.tasks.clone()
    }

    fn call(&self, task: Task, payload: Value) -> Result<Value, AdapterError> {
        if !self.tasks.contains(&task) {
            return Err(AdapterError::UnsupportedTask(task));
        }
        if self.failing.contains(&task) {
            return Err(AdapterError::Remote {
                code: codes::INFERENCE_FAILED.into(),
                message: "injected failure".into(),
            });
        }
        if task == Task::Caption && self.empty_captions {
            return Ok(json!({ "text": "" }));
        }
        handle_task(task.as_str(), &payload).map_err(|(code, message)| AdapterError::Remote { code, message })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandshakeMode {
    Normal,
    Garbage,
    Silent,
}

/// Behaviour switches for [`serve`].
#[derive(Debug, Clone, PartialEq)]
pub struct ServeOptions {
    pub protocol: u32,
    pub tasks: Vec<String>,
    pub handshake: HandshakeMode,
    /// Sleep before answering requests for a task.
    pub delays: HashMap<String, Duration>,
    /// Exit without replying when a request for one of these tasks arrives.
    pub crash_on: HashSet<String>,
    /// Reply with a mangled id.
    pub wrong_id: bool,
    /// Buffer this many requests, then answer them last-first.
    pub reverse_batch: usize,
    /// Emit a non-JSON line after this many replies.
    pub garbage_after: Option<usize>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            protocol: PROTOCOL_VERSION,
            tasks: Task::ALL.iter().map(|t| t.as_str().to_string()).collect(),
            handshake: HandshakeMode::Normal,
            delays: HashMap::new(),
            crash_on: HashSet::new(),
            wrong_id: false,
            reverse_batch: 1,
            garbage_after: None,
        }
    }
}

impl ServeOptions {
    pub const USAGE: &'static str = "options: --protocol N  --tasks a,b,c  --garbage-handshake  --no-handshake  \
         --delay TASK=MS  --crash-on TASK  --wrong-id  --reverse-batch N  --garbage-after N";

    pub fn from_args<I, S>(args: I) -> Result<Self, String>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut opts = Self::default();
        let args: Vec<String> = args.into_iter().map(|s| s.as_ref().to_string()).collect();
        let mut it = args.iter();
        let value = |it: &mut std::slice::Iter<String>, flag: &str| {
            it.next().cloned().ok_or_else(|| format!("{flag} needs a value"))
        };
        let number = |s: String, flag: &str| s.parse::<u64>().map_err(|e| format!("{flag}: {e}"));
        while let Some(arg) = it.next() {
            match arg.as_str() {
                "--protocol" => opts.protocol = number(value(&mut it, arg)?, arg)? as u32,
                "--tasks" => {
                    opts.tasks = value(&mut it, arg)?
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(str::to_string)
                        .collect()
                }
                "--garbage-handshake" => opts.handshake = HandshakeMode::Garbage,
                "--no-handshake" => opts.handshake = HandshakeMode::Silent,
                "--delay" => {
                    let spec = value(&mut it, arg)?;
                    let (task, ms) = spec.split_once('=').ok_or("--delay expects TASK=MS")?;
                    opts.delays
                        .insert(task.to_string(), Duration::from_millis(number(ms.to_string(), arg)?));
                }
                "--crash-on" => {
                    opts.crash_on.insert(value(&mut it, arg)?);
                }
                "--wrong-id" => opts.wrong_id = true,
                "--reverse-batch" => opts.reverse_batch = number(value(&mut it, arg)?, arg)?.max(1) as usize,
                "--garbage-after" => opts.garbage_after = Some(number(value(&mut it, arg)?, arg)? as usize),
                other => return Err(format!("unknown argument {other:?}; {}", Self::USAGE)),
            }
        }
        Ok(opts)
    }
}

/// How [`serve`] stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeExit {
    /// Input reached end of file.
    Eof,
    /// A `crash_on` task arrived; the caller should exit abnormally.
    Crash,
}

/// Runs the mock server until `input` closes.
pub fn serve(input: impl BufRead, mut output: impl Write, options: &ServeOptions) -> std::io::Result<ServeExit> {
    match options.handshake {
        HandshakeMode::Normal => {
            let hs = Handshake {
                protocol: options.protocol,
                tasks: options.tasks.clone(),
            };
            writeln!(output, "{}", serde_json::to_string(&hs).expect("handshake serializes"))?;
        }
        HandshakeMode::Garbage => writeln!(output, "hello, this is not json")?,
        HandshakeMode::Silent => {}
    }
    output.flush()?;

    let mut batch: Vec<Reply> = Vec::new();
    let mut replies_sent = 0usize;
    let mut emit = |batch: &mut Vec<Reply>, output: &mut dyn Write| -> std::io::Result<()> {
        while let Some(reply) = batch.pop() {
            writeln!(output, "{}", serde_json::to_string(&reply).expect("reply serializes"))?;
            replies_sent += 1;
            if options.garbage_after == Some(replies_sent) {
                writeln!(output, "<<garbage>>")?;
            }
        }
        output.flush()
    };

    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Request>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_str).map(str::to_string))
                    .unwrap_or_default();
                Reply::failure(id, codes::BAD_PAYLOAD, format!("malformed request: {e}"))
            }
            Ok(req) => {
                if options.crash_on.contains(&req.task) {
                    return Ok(ServeExit::Crash);
                }
                if let Some(delay) = options.delays.get(&req.task) {
                    thread::sleep(*delay);
                }
                let id = if options.wrong_id {
                    format!("{}-mismatch", req.id)
                } else {
                    req.id.clone()
                };
                if !options.tasks.contains(&req.task) {
                    Reply::failure(id, codes::UNSUPPORTED_TASK, format!("task {:?} not offered", req.task))
                } else {
                    match handle_task(&req.task, &req.payload) {
                        Ok(result) => Reply::success(id, result),
                        Err((code, message)) => Reply::failure(id, &code, message),
                    }
                }
            }
        };
        // Replies are popped from the end, so insert at the front to keep
        // arrival order unless reversing.
        if options.reverse_batch > 1 {
            batch.push(reply);
            if batch.len() >= options.reverse_batch {
                emit(&mut batch, &mut output)?;
            }
        } else {
            batch.insert(0, reply);
            emit(&mut batch, &mut output)?;
        }
    }
    batch.reverse();
    emit(&mut batch, &mut output)?;
    Ok(ServeExit::Eof)
}

/// Path of a sidecar next to `audio`, if the file exists.
pub fn sidecar_for(audio: &Path) -> Option<PathBuf> {
    let path = audio.with_extension("json");
    path.is_file().then_some(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn run(input: &str, options: &ServeOptions) -> (ServeExit, Vec<String>) {
        let mut out = Vec::new();
        let exit = serve(Cursor::new(input.to_string()), &mut out, options).unwrap();
        let text = String::from_utf8(out).unwrap();
        (exit, text.lines().map(str::to_string).collect())
    }

    #[test]
    fn handshake_lists_all_tasks() {
        let (_, lines) = run("", &ServeOptions::default());
        let hs: Handshake = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(hs.protocol, 1);
        assert_eq!(hs.tasks.len(), 5);
    }

    #[test]
    fn caption_echo() {
        let req = json!({"id": "1", "task": "caption", "payload": {
            "prompt": {"tokens": [{"slot": "tempo", "text": "moderate tempo"}, {"slot": "energy", "text": "high energy"}],
                       "artist_context": "a singer from Shiraz"},
            "prompt_text": "ignored"}});
        let (_, lines) = run(&format!("{req}\n"), &ServeOptions::default());
        let reply: Reply = serde_json::from_str(&lines[1]).unwrap();
        assert!(reply.ok);
        assert_eq!(
            reply.result.unwrap()["text"],
            "moderate tempo, high energy; a singer from Shiraz"
        );
    }

    #[test]
    fn unknown_task_and_bad_payload() {
        let input = "{\"id\":\"a\",\"task\":\"transcribe\",\"payload\":{}}\n{\"id\":\"b\",\"task\":\"caption\",\"payload\":{}}\n";
        let (_, lines) = run(input, &ServeOptions::default());
        let a: Reply = serde_json::from_str(&lines[1]).unwrap();
        let b: Reply = serde_json::from_str(&lines[2]).unwrap();
        assert_eq!(a.error.unwrap().code, codes::UNSUPPORTED_TASK);
        assert_eq!(b.error.unwrap().code, codes::BAD_PAYLOAD);
    }

    #[test]
    fn reverse_batch_reorders() {
        let mut opts = ServeOptions::default();
        opts.reverse_batch = 3;
        let input: String = (1..=3)
            .map(|i| format!("{{\"id\":\"{i}\",\"task\":\"nope\",\"payload\":null}}\n"))
            .collect();
        let (_, lines) = run(&input, &opts);
        let ids: Vec<String> = lines[1..]
            .iter()
            .map(|l| serde_json::from_str::<Reply>(l).unwrap().id)
            .collect();
        assert_eq!(ids, ["3", "2", "1"]);
    }

    #[test]
    fn partial_batch_flushes_in_order_at_eof() {
        let mut opts = ServeOptions::default();
        opts.reverse_batch = 5;
        let input = "{\"id\":\"1\",\"task\":\"x\",\"payload\":null}\n{\"id\":\"2\",\"task\":\"x\",\"payload\":null}\n";
        let (_, lines) = run(input, &opts);
        let ids: Vec<String> = lines[1..]
            .iter()
            .map(|l| serde_json::from_str::<Reply>(l).unwrap().id)
            .collect();
        assert_eq!(ids, ["1", "2"]);
    }

    #[test]
    fn crash_stops_without_reply() {
        let mut opts = ServeOptions::default();
        opts.crash_on.insert("caption".into());
        let (exit, lines) = run("{\"id\":\"1\",\"task\":\"caption\",\"payload\":{}}\n", &opts);
        assert_eq!(exit, ServeExit::Crash);
        assert_eq!(lines.len(), 1);
    }

    #[test]
    fn option_parsing() {
        let opts = ServeOptions::from_args([
            "--protocol",
            "2",
            "--tasks",
            "caption,separate",
            "--delay",
            "caption=250",
            "--wrong-id",
            "--reverse-batch",
            "4",
        ])
        .unwrap();
        assert_eq!(opts.protocol, 2);
        assert_eq!(opts.tasks, ["caption", "separate"]);
        assert_eq!(opts.delays["caption"], Duration::from_millis(250));
        assert!(opts.wrong_id);
        assert_eq!(opts.reverse_batch, 4);
        assert!(ServeOptions::from_args(["--bogus"]).is_err());
        assert!(ServeOptions::from_args(["--delay", "caption"]).is_err());
    }

    #[test]
    fn in_process_separate_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let clip = dir.path().join("clip.wav");
        let samples: Vec<f32> = (0..32_000)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 32_000.0).sin())
            .collect();
        write_wav(&AudioBuffer::mono(samples, 32_000).unwrap(), &clip).unwrap();
        let mock = MockAdapter::new();
        let stems = super::super::separate_stems(&mock, &clip, &dir.path().join("stems")).unwrap();
        assert_eq!(std::fs::read(&clip).unwrap(), std::fs::read(&stems.instrumental).unwrap());
        let vocal = decode_audio(&stems.vocal).unwrap();
        assert!(vocal.samples().iter().all(|&s| s == 0.0));
        assert_eq!(vocal.frames(), 32_000);

        let labels = super::super::classify_labels(&mock, &clip).unwrap();
        let sum: f64 = labels.values().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let top = labels.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(top, "A");
    }

    #[test]
    fn in_process_faults() {
        let mock = MockAdapter::new().failing(Task::Caption);
        assert!(matches!(
            mock.call(Task::Caption, json!({})),
            Err(AdapterError::Remote { .. })
        ));
        let limited = MockAdapter::with_tasks(&[Task::Caption]);
        assert_eq!(
            limited.call(Task::Separate, json!({})),
            Err(AdapterError::UnsupportedTask(Task::Separate))
        );
    }
}
