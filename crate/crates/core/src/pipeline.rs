//! Staged corpus pipeline over an output directory.
//!
//! | stage | reads | writes |
//! |-------|-------|--------|
//! | ingest | input directory | `tracks.jsonl`, `tracks/` |
//! | segment | `tracks.jsonl` | `segments.jsonl`, `clips/` |
//! | separate | `segments.jsonl` | `separated.jsonl`, `stems/` |
//! | tag | `separated.jsonl` or `segments.jsonl` | `tagged.jsonl` |
//! | caption | `tagged.jsonl` | `captioned.jsonl` |
//! | stats | newest clip manifest | `stats.json`, `stats.txt` |
//! | export-stages | newest clip manifest | `stage1.jsonl`, `stage2.jsonl`, `stage3.jsonl` |
//! | eval | pairs file or two manifests | `eval.json`, `eval.txt` |
//!
//! Work is spread over a fixed-width thread pool; results are collected in
//! input order, and every random choice is seeded per clip, so outputs do not
//! depend on the worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::adapter::{
    separate_stems, spawn_adapter, Adapter, AdapterError, AdapterTimeouts, MockAdapter, StemPaths, Task,
};
use crate::audio::{decode_audio, supported_formats, write_wav, AudioBuffer, CANONICAL_RATE};
use crate::caption::{
    build_prompt, clip_seed, generate_caption, render_template_caption, CaptionConfig, CaptionError, Template,
};
use crate::corpus::{
    compute_stats, export_training_manifests, read_manifest, read_manifest_kind, write_manifest, ClipRecord,
    CorpusError, ExportConfig, Issue, ManifestHeader, StatsReport, TrackRecord,
};
use crate::eval::{
    conditioning_sweep, corpus_kld_records, label_distribution_kld, manifest_chroma_similarity, read_pairs,
    CellStats, Condition, EvalError, KldConfig, KldReport, MetricsReport, SweepOptions,
};
use crate::segment::{segment, SegmentError, SegmenterConfig};
use crate::tags::{read_sidecar, sidecar_path, tag_clip, TagThresholds};

/// Adapter command that runs the mock in process.
pub const BUILTIN_MOCK: &str = "builtin:mock";

pub const TRACKS_MANIFEST: &str = "tracks.jsonl";
pub const SEGMENTS_MANIFEST: &str = "segments.jsonl";
pub const SEPARATED_MANIFEST: &str = "separated.jsonl";
pub const TAGGED_MANIFEST: &str = "tagged.jsonl";
pub const CAPTIONED_MANIFEST: &str = "captioned.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("adapter error: {0}")]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing input {0}; run the earlier stage first")]
    MissingInput(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Task name (or `*` for every task) to command line. The command
    /// `builtin:mock` uses the in-process mock.
    pub commands: BTreeMap<String, String>,
    pub timeouts: AdapterTimeouts,
    /// Use the template caption when the caption adapter fails.
    pub fallback: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            commands: BTreeMap::new(),
            timeouts: AdapterTimeouts::default(),
            fallback: true,
        }
    }
}

impl AdapterConfig {
    pub fn command_for(&self, task: Task) -> Option<&str> {
        self.commands
            .get(task.as_str())
            .or_else(|| self.commands.get("*"))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub top_instruments: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { top_instruments: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pairs file for the conditioning sweep.
    pub pairs: Option<PathBuf>,
    /// Clip manifests to compare when no pairs file is given.
    pub generated_manifest: Option<PathBuf>,
    pub reference_manifest: Option<PathBuf>,
    pub exclude_prefix: bool,
    pub kld: bool,
    pub kld_config: KldConfig,
    /// Also report the label-distribution KLD through `classify_labels`.
    pub label_kld: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pairs: None,
            generated_manifest: None,
            reference_manifest: None,
            exclude_prefix: true,
            kld: true,
            kld_config: KldConfig::default(),
            label_kld: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub global_seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub segmenter: SegmenterConfig,
    pub tagger: TagThresholds,
    pub captioner: CaptionConfig,
    pub adapters: AdapterConfig,
    pub export: ExportConfig,
    pub stats: StatsConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_dir: None,
            output_dir: None,
            global_seed: 0,
            workers: 0,
            segmenter: SegmenterConfig::default(),
            tagger: TagThresholds::default(),
            captioner: CaptionConfig::default(),
            adapters: AdapterConfig::default(),
            export: ExportConfig::default(),
            stats: StatsConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub input_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub global_seed: Option<u64>,
    pub workers: Option<usize>,
    /// `TASK=COMMAND LINE` entries.
    pub adapter_cmds: Vec<String>,
    pub no_adapter_fallback: bool,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let config: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(config)
    }

    /// Reads `path` if given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, PipelineError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), PipelineError> {
        if let Some(v) = &o.input_dir {
            self.input_dir = Some(v.clone());
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = Some(v.clone());
        }
        if let Some(v) = o.global_seed {
            self.global_seed = v;
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        for entry in &o.adapter_cmds {
            let (task, cmd) = entry
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("--adapter-cmd expects TASK=COMMAND, got {entry:?}")))?;
            self.adapters.commands.insert(task.trim().to_string(), cmd.trim().to_string());
        }
        if o.no_adapter_fallback {
            self.adapters.fallback = false;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.segmenter
            .validate()
            .map_err(|e| PipelineError::Config(format!("segmenter: {e}")))?;
        self.tagger
            .validate()
            .map_err(|e| PipelineError::Config(format!("tagger: {e}")))?;
        self.captioner
            .validate()
            .map_err(|e| PipelineError::Config(format!("captioner: {e}")))?;
        for (task, cmd) in &self.adapters.commands {
            if task != "*" && task.parse::<Task>().is_err() {
                return bad(format!("adapters.commands: unknown task {task:?}"));
            }
            if cmd != BUILTIN_MOCK && shlex::split(cmd).is_none_or(|v| v.is_empty()) {
                return bad(format!("adapters.commands.{task}: cannot parse command line {cmd:?}"));
            }
        }
        let t = &self.adapters.timeouts;
        for (name, v) in [
            ("handshake_s", t.handshake_s),
            ("separate_s", t.separate_s),
            ("instruments_s", t.instruments_s),
            ("caption_s", t.caption_s),
            ("classify_labels_s", t.classify_labels_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("adapters.timeouts.{name} must be positive"));
            }
        }
        if self.eval.kld_config.bins == 0 || !(self.eval.kld_config.alpha > 0.0) {
            return bad("eval.kld_config needs bins > 0 and alpha > 0".into());
        }
        if self.stats.top_instruments == 0 {
            return bad("stats.top_instruments must be at least 1".into());
        }
        Ok(())
    }
}

/// Adapters for the tasks a run needs, one connection per distinct command.
#[derive(Default)]
pub struct AdapterSet {
    by_task: BTreeMap<Task, Arc<dyn Adapter>>,
}

impl AdapterSet {
    pub fn connect(config: &AdapterConfig, tasks: &[Task]) -> Result<Self, AdapterError> {
        let mut by_command: BTreeMap<String, Arc<dyn Adapter>> = BTreeMap::new();
        let mut by_task = BTreeMap::new();
        for &task in tasks {
            let Some(cmd) = config.command_for(task) else { continue };
            let adapter = match by_command.get(cmd) {
                Some(a) => Arc::clone(a),
                None => {
                    let a = open_adapter(cmd, &config.timeouts)?;
                    by_command.insert(cmd.to_string(), Arc::clone(&a));
                    a
                }
            };
            if adapter.supports(task) {
                by_task.insert(task, adapter);
            } else {
                log::warn!("adapter {cmd:?} does not offer task {task}");
            }
        }
        Ok(Self { by_task })
    }

    pub fn has(&self, task: Task) -> bool {
        self.by_task.contains_key(&task)
    }
}

impl Adapter for AdapterSet {
    fn tasks(&self) -> Vec<Task> {
        self.by_task.keys().copied().collect()
    }

    fn call(&self, task: Task, payload: Value) -> Result<Value, AdapterError> {
        match self.by_task.get(&task) {
            Some(a) => a.call(task, payload),
            None => Err(AdapterError::Unavailable(task)),
        }
    }
}

/// Opens one adapter from a command line.
pub fn open_adapter(cmd: &str, timeouts: &AdapterTimeouts) -> Result<Arc<dyn Adapter>, AdapterError> {
    if cmd == BUILTIN_MOCK {
        return Ok(Arc::new(MockAdapter::new()));
    }
    let argv = shlex::split(cmd).ok_or_else(|| AdapterError::SpawnFailure {
        command: cmd.to_string(),
        reason: "unbalanced quotes".into(),
    })?;
    Ok(Arc::new(spawn_adapter(&argv, timeouts.clone())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Segment,
    Separate,
    Tag,
    Caption,
    Stats,
    ExportStages,
    Eval,
}

/// Summary of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub output: PathBuf,
    pub records: usize,
    /// Records or inputs that completed with an issue or failed outright.
    pub flagged: usize,
    pub notes: Vec<String>,
}

impl StageReport {
    pub fn exit_code(&self) -> i32 {
        if self.flagged > 0 {
            1
        } else {
            0
        }
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    output: PathBuf,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let output = config
            .output_dir
            .clone()
            .ok_or_else(|| PipelineError::Config("output_dir is required (--output)".into()))?;
        std::fs::create_dir_all(&output).map_err(io_err(&output))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
        Ok(Self { config, output, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn output_dir(&self) -> &Path {
        &self.output
    }

    fn path(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }

    fn abs(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output.join(p)
        }
    }

    fn rel(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.output).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    }

    fn header(&self, kind: &str) -> ManifestHeader {
        ManifestHeader::new(kind, self.config.global_seed)
    }

    fn require(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::MissingInput(p))
        }
    }

    fn read_clips(&self, name: &str) -> Result<(Vec<ClipRecord>, usize), PipelineError> {
        let path = self.require(name)?;
        let (m, errors) = read_manifest_kind::<ClipRecord>(&path, "clip")?;
        for e in &errors {
            log::error!("{}:{}: {}", path.display(), e.line, e.message);
        }
        Ok((m.records, errors.len()))
    }

    /// The most processed clip manifest present.
    pub fn latest_clip_manifest(&self) -> Result<PathBuf, PipelineError> {
        [CAPTIONED_MANIFEST, TAGGED_MANIFEST, SEPARATED_MANIFEST, SEGMENTS_MANIFEST]
            .iter()
            .map(|n| self.path(n))
            .find(|p| p.is_file())
            .ok_or_else(|| PipelineError::MissingInput(self.path(SEGMENTS_MANIFEST)))
    }

    fn connect(&self, tasks: &[Task]) -> Result<AdapterSet, PipelineError> {
        Ok(AdapterSet::connect(&self.config.adapters, tasks)?)
    }

    pub fn ingest(&self) -> Result<StageReport, PipelineError> {
        let input = self
            .config
            .input_dir
            .clone()
            .ok_or_else(|| PipelineError::Config("input_dir is required (--input)".into()))?;
        if !input.is_dir() {
            return Err(PipelineError::MissingInput(input));
        }
        let formats = supported_formats();
        let mut files = Vec::new();
        for entry in walkdir::WalkDir::new(&input).sort_by_file_name() {
            let entry = entry.map_err(|e| PipelineError::Io {
                path: input.clone(),
                source: e.into(),
            })?;
            let ext = entry.path().extension().and_then(|e| e.to_str()).map(str::to_lowercase);
            if entry.file_type().is_file() && ext.is_some_and(|e| formats.contains(&e.as_str())) {
                files.push(entry.into_path());
            }
        }
        let results: Vec<Result<TrackRecord, String>> = self.pool.install(|| {
            files
                .par_iter()
                .map(|src| self.ingest_one(&input, src).map_err(|e| format!("{}: {e}", src.display())))
                .collect()
        });
        let mut records = Vec::new();
        let mut notes = Vec::new();
        for r in results {
            match r {
                Ok(t) => records.push(t),
                Err(e) => {
                    log::error!("ingest failed for {e}");
                    notes.push(e);
                }
            }
        }
        let out = self.path(TRACKS_MANIFEST);
        write_manifest(&out, &self.header("track"), &records)?;
        Ok(StageReport {
            stage: Stage::Ingest,
            output: out,
            records: records.len(),
            flagged: notes.len(),
            notes,
        })
    }

    fn ingest_one(&self, input: &Path, src: &Path) -> Result<TrackRecord, PipelineError> {
        let rel = src.strip_prefix(input).unwrap_or(src).with_extension("");
        let track_id = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let audio = decode_audio(src).map_err(|e| PipelineError::Config(e.to_string()))?;
        let canonical = if audio.is_mono() && audio.sample_rate() == CANONICAL_RATE {
            audio.clone()
        } else {
            audio.canonical().map_err(|e| PipelineError::Config(e.to_string()))?
        };
        let dest = self.path("tracks").join(format!("{track_id}.wav"));
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        write_wav(&canonical, &dest).map_err(|e| PipelineError::Config(e.to_string()))?;
        let sidecar_src = sidecar_path(src);
        let sidecar = if sidecar_src.is_file() {
            // Validate now so broken sidecars surface at ingest.
            read_sidecar(src).map_err(|e| PipelineError::Config(e.to_string()))?;
            let dest_sidecar = sidecar_path(&dest);
            std::fs::copy(&sidecar_src, &dest_sidecar).map_err(io_err(&dest_sidecar))?;
            Some(self.rel(&dest_sidecar))
        } else {
            None
        };
        Ok(TrackRecord {
            track_id,
            source_path: src.strip_prefix(input).unwrap_or(src).to_path_buf(),
            audio_path: self.rel(&dest),
            duration_seconds: canonical.duration_seconds(),
            source_rate: audio.sample_rate(),
            source_channels: audio.channel_count(),
            sidecar_path: sidecar,
        })
    }

    fn read_tracks(&self) -> Result<Vec<TrackRecord>, PipelineError> {
        let path = self.require(TRACKS_MANIFEST)?;
        let (m, errors) = read_manifest_kind::<TrackRecord>(&path, "track")?;
        for e in &errors {
            log::error!("{}:{}: {}", path.display(), e.line, e.message);
        }
        Ok(m.records)
    }

    pub fn segment(&self) -> Result<StageReport, PipelineError> {
        let tracks = self.read_tracks()?;
        let clips_dir = self.path("clips");
        std::fs::create_dir_all(&clips_dir).map_err(io_err(&clips_dir))?;
        let results: Vec<Result<Vec<ClipRecord>, (bool, String)>> = self.pool.install(|| {
            tracks
                .par_iter()
                .map(|t| self.segment_track(t, &clips_dir))
                .collect()
        });
        let mut records = Vec::new();
        let mut notes = Vec::new();
        let mut flagged = 0;
        for r in results {
            match r {
                Ok(clips) => records.extend(clips),
                Err((failure, note)) => {
                    if failure {
                        flagged += 1;
                        log::error!("{note}");
                    } else {
                        log::info!("{note}");
                    }
                    notes.push(note);
                }
            }
        }
        let out = self.path(SEGMENTS_MANIFEST);
        write_manifest(&out, &self.header("clip"), &records)?;
        Ok(StageReport {
            stage: Stage::Segment,
            output: out,
            records: records.len(),
            flagged,
            notes,
        })
    }

    /// Errors carry whether they count as failures (short tracks do not).
    fn segment_track(&self, track: &TrackRecord, clips_dir: &Path) -> Result<Vec<ClipRecord>, (bool, String)> {
        let fail = |e: String| (true, format!("track {}: {e}", track.track_id));
        let audio = decode_audio(&self.abs(&track.audio_path)).map_err(|e| fail(e.to_string()))?;
        let spans = match segment(&audio, &self.config.segmenter) {
            Ok(s) => s,
            Err(SegmentError::TrackTooShort { .. }) => {
                return Err((false, format!("track {}: too short, skipped", track.track_id)))
            }
            Err(e) => return Err(fail(e.to_string())),
        };
        spans
            .into_iter()
            .enumerate()
            .map(|(i, span)| {
                let clip = audio.slice_frames(span.start_sample as usize, span.end_sample as usize);
                let id = crate::corpus::clip_id(&track.track_id, &span);
                let path = clips_dir.join(format!("{id}.wav"));
                write_wav(&clip, &path).map_err(|e| fail(e.to_string()))?;
                Ok(ClipRecord::new(&track.track_id, i, span, self.rel(&path)))
            })
            .collect()
    }

    pub fn separate(&self) -> Result<StageReport, PipelineError> {
        let (mut records, malformed) = self.read_clips(SEGMENTS_MANIFEST)?;
        let adapters = self.connect(&[Task::Separate])?;
        if !adapters.has(Task::Separate) {
            return Err(PipelineError::Config("no adapter configured for task separate".into()));
        }
        let stems_dir = self.path("stems");
        let results: Vec<Result<StemPaths, AdapterError>> = self.pool.install(|| {
            records
                .par_iter()
                .map(|r| separate_stems(&adapters, &self.abs(&r.audio_path), &stems_dir))
                .collect()
        });
        let mut flagged = malformed;
        for (r, res) in records.iter_mut().zip(results) {
            match res {
                Ok(stems) => {
                    r.stem_paths = Some(StemPaths {
                        vocal: self.rel(&stems.vocal),
                        instrumental: self.rel(&stems.instrumental),
                    });
                }
                Err(e) => {
                    log::warn!("separation failed for clip {}: {e}", r.clip_id);
                    r.issues.insert(Issue::SeparationFailed);
                    flagged += 1;
                }
            }
        }
        let out = self.path(SEPARATED_MANIFEST);
        write_manifest(&out, &self.header("clip"), &records)?;
        Ok(StageReport {
            stage: Stage::Separate,
            output: out,
            records: records.len(),
            flagged,
            notes: Vec::new(),
        })
    }

    pub fn tag(&self) -> Result<StageReport, PipelineError> {
        let source = if self.path(SEPARATED_MANIFEST).is_file() {
            SEPARATED_MANIFEST
        } else {
            SEGMENTS_MANIFEST
        };
        let (mut records, malformed) = self.read_clips(source)?;
        let tracks: BTreeMap<String, TrackRecord> = self
            .read_tracks()?
            .into_iter()
            .map(|t| (t.track_id.clone(), t))
            .collect();
        let adapters = self.connect(&[Task::InstrumentsTraditional, Task::InstrumentsGeneral])?;
        let thresholds = &self.config.tagger;
        self.pool.install(|| {
            records.par_iter_mut().for_each(|r| {
                let sidecar = tracks.get(&r.track_id).and_then(|t| {
                    let track_audio = self.abs(&t.audio_path);
                    match read_sidecar(&track_audio) {
                        Ok(s) => s.map(|s| (s, sidecar_path(&track_audio))),
                        Err(e) => {
                            log::warn!("{e}");
                            None
                        }
                    }
                });
                let clip_path = self.abs(&r.audio_path);
                let tagged = decode_audio(&clip_path)
                    .map_err(|e| e.to_string())
                    .and_then(|clip| {
                        tag_clip(
                            &clip,
                            &clip_path,
                            sidecar.as_ref().map(|(s, p)| (s, p.as_path())),
                            Some(&adapters),
                            thresholds,
                        )
                        .map_err(|e| e.to_string())
                    });
                match tagged {
                    Ok(t) => {
                        // An unconfigured adapter leaves instruments_complete false
                        // without flagging the clip.
                        if t.adapter_error.as_ref().is_some_and(|e| !matches!(e, AdapterError::Unavailable(_))) {
                            r.issues.insert(Issue::InstrumentsMissing);
                        }
                        r.tags = Some(t.tags);
                        r.features = Some(t.features);
                    }
                    Err(e) => {
                        log::warn!("tagging failed for clip {}: {e}", r.clip_id);
                        r.issues.insert(Issue::TaggingFailed);
                    }
                }
            })
        });
        let flagged = malformed
            + records
                .iter()
                .filter(|r| r.issues.contains(&Issue::TaggingFailed) || r.issues.contains(&Issue::InstrumentsMissing))
                .count();
        let out = self.path(TAGGED_MANIFEST);
        write_manifest(&out, &self.header("clip"), &records)?;
        Ok(StageReport {
            stage: Stage::Tag,
            output: out,
            records: records.len(),
            flagged,
            notes: Vec::new(),
        })
    }

    pub fn caption(&self) -> Result<StageReport, PipelineError> {
        let (mut records, malformed) = self.read_clips(TAGGED_MANIFEST)?;
        let template: Template = self.config.captioner.load_template()?;
        let adapters = self.connect(&[Task::Caption])?;
        let use_adapter = adapters.has(Task::Caption);
        let cfg = &self.config.captioner;
        let fallback = self.config.adapters.fallback;
        let seed = self.config.global_seed;
        self.pool.install(|| {
            records.par_iter_mut().for_each(|r| {
                let Some(tags) = &r.tags else { return };
                let spec = build_prompt(tags, tags.artist.as_deref(), clip_seed(&r.track_id, r.clip_index, seed), cfg);
                if !use_adapter {
                    r.caption = Some(render_template_caption(&spec, &template));
                    return;
                }
                match generate_caption(&spec, Some(&adapters), &template, fallback) {
                    Ok(c) => {
                        if c.fallback {
                            r.issues.insert(Issue::CaptionFallback);
                        }
                        r.caption = Some(c);
                    }
                    Err(e) => {
                        log::warn!("caption failed for clip {}: {e}", r.clip_id);
                        r.issues.insert(Issue::CaptionFailed);
                    }
                }
            })
        });
        let flagged = malformed
            + records
                .iter()
                .filter(|r| r.issues.contains(&Issue::CaptionFallback) || r.issues.contains(&Issue::CaptionFailed))
                .count();
        let out = self.path(CAPTIONED_MANIFEST);
        write_manifest(&out, &self.header("clip"), &records)?;
        Ok(StageReport {
            stage: Stage::Caption,
            output: out,
            records: records.len(),
            flagged,
            notes: Vec::new(),
        })
    }

    pub fn stats(&self) -> Result<(StageReport, StatsReport), PipelineError> {
        let source = self.latest_clip_manifest()?;
        let (m, errors) = read_manifest_kind::<ClipRecord>(&source, "clip")?;
        let report = compute_stats(&m.records, self.config.stats.top_instruments);
        let json = self.path("stats.json");
        let text = self.path("stats.txt");
        std::fs::write(&json, serde_json::to_string_pretty(&report).expect("stats serialize") + "\n")
            .map_err(io_err(&json))?;
        std::fs::write(&text, report.to_table()).map_err(io_err(&text))?;
        Ok((
            StageReport {
                stage: Stage::Stats,
                output: json,
                records: m.records.len(),
                flagged: errors.len(),
                notes: vec![format!("source: {}", source.display())],
            },
            report,
        ))
    }

    pub fn export_stages(&self) -> Result<StageReport, PipelineError> {
        let source = self.latest_clip_manifest()?;
        let (m, errors) = read_manifest_kind::<ClipRecord>(&source, "clip")?;
        let stages = export_training_manifests(&m.records, &self.config.export);
        write_manifest(&self.path("stage1.jsonl"), &self.header("stage1"), &stages.stage1)?;
        write_manifest(&self.path("stage2.jsonl"), &self.header("stage2"), &stages.stage2)?;
        write_manifest(&self.path("stage3.jsonl"), &self.header("stage3"), &stages.stage3)?;
        Ok(StageReport {
            stage: Stage::ExportStages,
            output: self.path("stage1.jsonl"),
            records: stages.stage1.len(),
            flagged: errors.len(),
            notes: vec![format!(
                "stage1 {} clips, stage2 {} clips, stage3 {} pairs",
                stages.stage1.len(),
                stages.stage2.len(),
                stages.stage3.len()
            )],
        })
    }

    pub fn eval(&self) -> Result<(StageReport, EvalOutcome), PipelineError> {
        let cfg = &self.config.eval;
        let outcome = if let Some(pairs_path) = &cfg.pairs {
            let pairs = read_pairs(pairs_path)?;
            let options = SweepOptions {
                exclude_prefix: cfg.exclude_prefix,
                kld: cfg.kld,
                kld_config: cfg.kld_config.clone(),
            };
            let mut report = self.pool.install(|| conditioning_sweep(&pairs, &options))?;
            if cfg.label_kld {
                let adapters = self.connect(&[Task::ClassifyLabels])?;
                if adapters.has(Task::ClassifyLabels) {
                    let text: Vec<_> = pairs.iter().filter(|p| p.condition == Condition::Text).collect();
                    let gen: Vec<PathBuf> = text.iter().map(|p| p.generated.clone()).collect();
                    let refs: Vec<PathBuf> = text.iter().map(|p| p.reference.clone()).collect();
                    report.label_kld = Some(label_distribution_kld(&adapters, &gen, &refs, cfg.kld_config.alpha)?);
                } else {
                    log::warn!("label KLD requested but no classify_labels adapter is configured");
                }
            }
            EvalOutcome::Sweep(report)
        } else {
            let (Some(g), Some(r)) = (&cfg.generated_manifest, &cfg.reference_manifest) else {
                return Err(PipelineError::Config(
                    "eval needs a pairs file or both generated and reference manifests".into(),
                ));
            };
            let (gm, _) = read_manifest::<ClipRecord>(g)?;
            let (rm, _) = read_manifest::<ClipRecord>(r)?;
            EvalOutcome::Manifests(ManifestEval {
                kld: corpus_kld_records(&gm.records, &rm.records, &cfg.kld_config)?,
                chroma_similarity: manifest_chroma_similarity(&gm.records, &rm.records)?,
            })
        };
        let json = self.path("eval.json");
        let text = self.path("eval.txt");
        std::fs::write(&json, serde_json::to_string_pretty(&outcome).expect("report serializes") + "\n")
            .map_err(io_err(&json))?;
        std::fs::write(&text, outcome.to_table()).map_err(io_err(&text))?;
        let silent = match &outcome {
            EvalOutcome::Sweep(r) => r.silent_pairs,
            EvalOutcome::Manifests(_) => 0,
        };
        Ok((
            StageReport {
                stage: Stage::Eval,
                output: json,
                records: match &outcome {
                    EvalOutcome::Sweep(r) => r.subsets.iter().map(|s| s.n_pairs).sum(),
                    EvalOutcome::Manifests(m) => m.kld.n_generated,
                },
                flagged: 0,
                notes: if silent > 0 {
                    vec![format!("{silent} pair(s) with a silent clip")]
                } else {
                    Vec::new()
                },
            },
            outcome,
        ))
    }

    /// Ingest through export. Separation runs only when an adapter is
    /// configured for it.
    pub fn run_all(&self) -> Result<Vec<StageReport>, PipelineError> {
        let mut reports = vec![self.ingest()?, self.segment()?];
        if self.config.adapters.command_for(Task::Separate).is_some() {
            reports.push(self.separate()?);
        } else {
            let stale = self.path(SEPARATED_MANIFEST);
            if stale.is_file() {
                std::fs::remove_file(&stale).map_err(io_err(&stale))?;
            }
            log::info!("no separation adapter configured; skipping separate");
        }
        reports.push(self.tag()?);
        reports.push(self.caption()?);
        reports.push(self.stats()?.0);
        reports.push(self.export_stages()?);
        Ok(reports)
    }
}

/// Comparison of two clip manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEval {
    pub kld: KldReport,
    /// Records paired by position.
    pub chroma_similarity: CellStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalOutcome {
    Sweep(MetricsReport),
    Manifests(ManifestEval),
}

impl EvalOutcome {
    pub fn to_table(&self) -> String {
        match self {
            EvalOutcome::Sweep(r) => r.to_table(),
            EvalOutcome::Manifests(m) => {
                let mut out = format!(
                    "KLD (reference || generated): {:.6}\nchroma similarity: {:.6} ± {:.6} (n={})\n\nper dimension:\n",
                    m.kld.kld, m.chroma_similarity.mean, m.chroma_similarity.std, m.chroma_similarity.n
                );
                for d in &m.kld.per_dimension {
                    out.push_str(&format!("  {:<16} {:.6}\n", d.dimension, d.kld));
                }
                out
            }
        }
    }
}

/// Spawns every configured adapter and returns its advertised tasks.
pub fn adapters_check(config: &AdapterConfig) -> Vec<(String, Result<Vec<String>, AdapterError>)> {
    let mut commands: Vec<&String> = config.commands.values().collect();
    commands.sort();
    commands.dedup();
    commands
        .into_iter()
        .map(|cmd| {
            let result = if cmd == BUILTIN_MOCK {
                Ok(Task::ALL.iter().map(|t| t.as_str().to_string()).collect())
            } else {
                shlex::split(cmd)
                    .ok_or_else(|| AdapterError::SpawnFailure {
                        command: cmd.clone(),
                        reason: "unbalanced quotes".into(),
                    })
                    .and_then(|argv| spawn_adapter(&argv, config.timeouts.clone()))
                    .map(|h| {
                        let tasks = h.handshake().tasks.clone();
                        h.shutdown();
                        tasks
                    })
            };
            (cmd.clone(), result)
        })
        .collect()
}

/// Writes a mono buffer at the canonical rate; used by fixtures and tests.
pub fn write_canonical(samples: Vec<f32>, path: &Path) -> Result<(), PipelineError> {
    let buf = AudioBuffer::mono(samples, CANONICAL_RATE).map_err(|e| PipelineError::Config(e.to_string()))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_wav(&buf, path).map_err(|e| PipelineError::Config(e.to_string()))
}
