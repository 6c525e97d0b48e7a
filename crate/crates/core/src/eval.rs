//! Generated-versus-reference metrics: feature-distribution KL divergence and
//! mean-chroma cosine similarity, plus the prefix-conditioning sweep.
//!
//! KL divergence is computed per feature dimension over fixed-range
//! histograms and averaged:
//!
//! ```text
//! features  = [12 mean-chroma bins, bpm, mean_rms_dbfs]
//! ranges    = chroma [0, 1], bpm [60, 180), dBFS [-60, 0]; outliers clamp to edge bins
//! P_d, Q_d  = normalized histograms of reference and generated, B bins
//! smoothing = (h + alpha) / (1 + B * alpha)
//! KL_d      = sum_b P_d[b] * ln(P_d[b] / Q_d[b])
//! kld       = mean_d KL_d                           (direction: reference || generated)
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{classify_labels, Adapter, AdapterError};
use crate::audio::{decode_audio, downmix_mono, AudioBuffer, AudioError, CANONICAL_RATE};
use crate::corpus::ClipRecord;
use crate::dsp::{chroma, mean_chroma, ChromaVector, DspError, PITCH_CLASS_NAMES};
use crate::tags::{analyze_clip, ClipFeatures, TagError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prefix of {prefix} s is not shorter than the {duration:.3} s generated clip")]
    PrefixLongerThanClip { prefix: f64, duration: f64 },
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("clip {0} has no features")]
    FeatureMissing(String),
    #[error("pair {index}: {reason}")]
    InvalidPair { index: usize, reason: String },
    #[error("{path}: {source}")]
    Audio {
        path: PathBuf,
        #[source]
        source: AudioError,
    },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("feature extraction for {path}: {source}")]
    Features {
        path: PathBuf,
        #[source]
        source: TagError,
    },
    #[error("{path}: {message}")]
    PairsFile { path: PathBuf, message: String },
    #[error("label classification: {0}")]
    Adapter(#[from] AdapterError),
}

// ---------------------------------------------------------------------------
// Chroma similarity

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub similarity: f64,
    /// Either side had no voiced frames.
    pub silent: bool,
}

/// Cosine of two chroma vectors, 0 with the silent flag if either is zero.
pub fn vector_similarity(a: &ChromaVector, b: &ChromaVector) -> PairSimilarity {
    if a.is_zero() || b.is_zero() {
        return PairSimilarity {
            similarity: 0.0,
            silent: true,
        };
    }
    PairSimilarity {
        similarity: a.cosine(b).clamp(0.0, 1.0),
        silent: false,
    }
}

/// Mean-chroma cosine similarity. The first `exclude_prefix_seconds` of the
/// generated clip are dropped before analysis.
pub fn chroma_pair_similarity(
    generated: &AudioBuffer,
    reference: &AudioBuffer,
    exclude_prefix_seconds: f64,
) -> Result<PairSimilarity, EvalError> {
    let duration = generated.duration_seconds();
    if exclude_prefix_seconds > 0.0 && exclude_prefix_seconds >= duration {
        return Err(EvalError::PrefixLongerThanClip {
            prefix: exclude_prefix_seconds,
            duration,
        });
    }
    let skip = (exclude_prefix_seconds.max(0.0) * f64::from(generated.sample_rate())).round() as usize;
    let generated = generated.slice_frames(skip.min(generated.frames()), generated.frames());
    let g = mean_chroma(&chroma(&generated)?);
    let r = mean_chroma(&chroma(reference)?);
    Ok(vector_similarity(&g, &r))
}

// ---------------------------------------------------------------------------
// Feature-distribution KLD

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KldConfig {
    pub bins: usize,
    pub alpha: f64,
}

impl Default for KldConfig {
    fn default() -> Self {
        Self { bins: 32, alpha: 1e-6 }
    }
}

pub const FEATURE_DIMENSIONS: usize = 14;

/// Histogram range of each feature dimension.
pub fn dimension_range(d: usize) -> (f64, f64) {
    match d {
        0..=11 => (0.0, 1.0),
        12 => (60.0, 180.0),
        13 => (-60.0, 0.0),
        _ => panic!("feature dimension {d} out of range"),
    }
}

pub fn dimension_name(d: usize) -> String {
    match d {
        0..=11 => format!("chroma_{}", PITCH_CLASS_NAMES[d]),
        12 => "bpm".into(),
        13 => "mean_rms_dbfs".into(),
        _ => panic!("feature dimension {d} out of range"),
    }
}

pub fn feature_vector(f: &ClipFeatures) -> [f64; FEATURE_DIMENSIONS] {
    let mut v = [0.0; FEATURE_DIMENSIONS];
    v[..12].copy_from_slice(&f.mean_chroma.0);
    v[12] = f.bpm;
    v[13] = f.mean_rms_dbfs;
    v
}

fn bin_index(x: f64, (lo, hi): (f64, f64), bins: usize) -> usize {
    let t = ((x - lo) / (hi - lo) * bins as f64).floor();
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

/// Normalized, smoothed histogram of one dimension.
pub fn smoothed_histogram(values: &[f64], range: (f64, f64), config: &KldConfig) -> Vec<f64> {
    let mut counts = vec![0u64; config.bins];
    for &x in values {
        counts[bin_index(x, range, config.bins)] += 1;
    }
    let n = values.len() as f64;
    let norm = 1.0 + config.bins as f64 * config.alpha;
    counts
        .iter()
        .map(|&c| (c as f64 / n + config.alpha) / norm)
        .collect()
}

/// KL(p || q) in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionKld {
    pub dimension: String,
    pub kld: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KldReport {
    pub kld: f64,
    pub per_dimension: Vec<DimensionKld>,
    pub n_generated: usize,
    pub n_reference: usize,
}

impl KldReport {
    /// Dimension contributing the most divergence.
    pub fn dominant_dimension(&self) -> &str {
        &self
            .per_dimension
            .iter()
            .max_by(|a, b| a.kld.total_cmp(&b.kld))
            .expect("14 dimensions")
            .dimension
    }
}

/// KL(reference || generated) averaged over the 14 feature dimensions.
pub fn corpus_kld(
    generated: &[ClipFeatures],
    reference: &[ClipFeatures],
    config: &KldConfig,
) -> Result<KldReport, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyCorpus("reference"));
    }
    if generated.is_empty() {
        return Err(EvalError::EmptyCorpus("generated"));
    }
    let gen: Vec<_> = generated.iter().map(feature_vector).collect();
    let refs: Vec<_> = reference.iter().map(feature_vector).collect();
    let per_dimension: Vec<DimensionKld> = (0..FEATURE_DIMENSIONS)
        .map(|d| {
            let range = dimension_range(d);
            let p = smoothed_histogram(&refs.iter().map(|v| v[d]).collect::<Vec<_>>(), range, config);
            let q = smoothed_histogram(&gen.iter().map(|v| v[d]).collect::<Vec<_>>(), range, config);
            DimensionKld {
                dimension: dimension_name(d),
                kld: kl_divergence(&p, &q),
            }
        })
        .collect();
    let kld = per_dimension.iter().map(|d| d.kld).sum::<f64>() / FEATURE_DIMENSIONS as f64;
    Ok(KldReport {
        kld,
        per_dimension,
        n_generated: generated.len(),
        n_reference: reference.len(),
    })
}

fn record_features(records: &[ClipRecord]) -> Result<Vec<ClipFeatures>, EvalError> {
    records
        .iter()
        .map(|r| r.features.clone().ok_or_else(|| EvalError::FeatureMissing(r.clip_id.clone())))
        .collect()
}

/// [`corpus_kld`] over manifest records.
pub fn corpus_kld_records(
    generated: &[ClipRecord],
    reference: &[ClipRecord],
    config: &KldConfig,
) -> Result<KldReport, EvalError> {
    corpus_kld(&record_features(generated)?, &record_features(reference)?, config)
}

/// Mean similarity of records paired by position.
pub fn manifest_chroma_similarity(generated: &[ClipRecord], reference: &[ClipRecord]) -> Result<CellStats, EvalError> {
    if generated.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyCorpus(if generated.is_empty() { "generated" } else { "reference" }));
    }
    let g = record_features(generated)?;
    let r = record_features(reference)?;
    let sims: Vec<f64> = g
        .iter()
        .zip(&r)
        .map(|(a, b)| vector_similarity(&a.mean_chroma, &b.mean_chroma).similarity)
        .collect();
    Ok(CellStats::from_values(&sims))
}

// ---------------------------------------------------------------------------
// Label-distribution KLD

/// KL(reference || generated) between the mean `classify_labels`
/// distributions of two sets of clips.
pub fn label_distribution_kld(
    adapter: &dyn Adapter,
    generated: &[PathBuf],
    reference: &[PathBuf],
    alpha: f64,
) -> Result<f64, EvalError> {
    let mean_dist = |paths: &[PathBuf], which: &'static str| -> Result<BTreeMap<String, f64>, EvalError> {
        if paths.is_empty() {
            return Err(EvalError::EmptyCorpus(which));
        }
        let dists: Vec<BTreeMap<String, f64>> = paths
            .iter()
            .map(|p| classify_labels(adapter, p))
            .collect::<Result<_, _>>()?;
        let mut acc = BTreeMap::new();
        for d in &dists {
            for (k, v) in d {
                *acc.entry(k.clone()).or_insert(0.0) += v / dists.len() as f64;
            }
        }
        Ok(acc)
    };
    let p = mean_dist(reference, "reference")?;
    let q = mean_dist(generated, "generated")?;
    let labels: std::collections::BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let smooth = |m: &BTreeMap<String, f64>| -> Vec<f64> {
        let raw: Vec<f64> = labels.iter().map(|l| m.get(*l).copied().unwrap_or(0.0).max(0.0)).collect();
        let total: f64 = raw.iter().sum();
        let norm = 1.0 + raw.len() as f64 * alpha;
        raw.iter()
            .map(|v| (if total > 0.0 { v / total } else { 0.0 } + alpha) / norm)
            .collect()
    };
    Ok(kl_divergence(&smooth(&p), &smooth(&q)))
}

// ---------------------------------------------------------------------------
// Conditioning sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    MultiInstrument,
    SoloInstrument,
    Pop,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::MultiInstrument, Subset::SoloInstrument, Subset::Pop];

    pub fn as_str(&self) -> &'static str {
        match self {
            Subset::MultiInstrument => "multi_instrument",
            Subset::SoloInstrument => "solo_instrument",
            Subset::Pop => "pop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "text+1s")]
    Text1s,
    #[serde(rename = "text+3s")]
    Text3s,
    #[serde(rename = "text+5s")]
    Text5s,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Text, Condition::Text1s, Condition::Text3s, Condition::Text5s];

    pub fn prefix_seconds(&self) -> f64 {
        match self {
            Condition::Text => 0.0,
            Condition::Text1s => 1.0,
            Condition::Text3s => 3.0,
            Condition::Text5s => 5.0,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Text => "text",
            Condition::Text1s => "text+1s",
            Condition::Text3s => "text+3s",
            Condition::Text5s => "text+5s",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPair {
    pub generated: PathBuf,
    pub reference: PathBuf,
    pub subset: Subset,
    pub condition: Condition,
    pub prefix_seconds: f64,
}

impl EvalPair {
    fn check(&self, index: usize) -> Result<(), EvalError> {
        if self.prefix_seconds != self.condition.prefix_seconds() {
            return Err(EvalError::InvalidPair {
                index,
                reason: format!(
                    "prefix_seconds {} does not match condition {}",
                    self.prefix_seconds, self.condition
                ),
            });
        }
        Ok(())
    }
}

/// Reads a pairs file: one [`EvalPair`] per line. Relative paths are
/// resolved against the file's directory.
pub fn read_pairs(path: &Path) -> Result<Vec<EvalPair>, EvalError> {
    let err = |message: String| EvalError::PairsFile {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut pair: EvalPair = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
        for p in [&mut pair.generated, &mut pair.reference] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl CellStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// Drop the conditioning prefix from generated clips before comparing.
    pub exclude_prefix: bool,
    /// Compute per-subset KLD over the text-only pairs.
    pub kld: bool,
    pub kld_config: KldConfig,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            exclude_prefix: true,
            kld: true,
            kld_config: KldConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub subset: Subset,
    pub condition: Condition,
    /// Absent when no pairs fall in the cell.
    pub chroma_similarity: Option<CellStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub subset: Subset,
    pub n_pairs: usize,
    pub kld: Option<f64>,
    pub chroma_similarity: Option<CellStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub exclude_prefix: bool,
    pub grid: Vec<GridCell>,
    pub subsets: Vec<SubsetReport>,
    pub empty_cells: Vec<String>,
    pub silent_pairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_kld: Option<f64>,
}

/// Decodes a file into canonical mono.
pub fn load_canonical(path: &Path) -> Result<AudioBuffer, EvalError> {
    let wrap = |source| EvalError::Audio {
        path: path.to_path_buf(),
        source,
    };
    let audio = decode_audio(path).map_err(wrap)?;
    if audio.is_mono() && audio.sample_rate() == CANONICAL_RATE {
        return Ok(audio);
    }
    downmix_mono(&audio).canonical().map_err(wrap)
}

fn clip_features(path: &Path) -> Result<ClipFeatures, EvalError> {
    let audio = load_canonical(path)?;
    analyze_clip(&audio)
        .map(|a| a.features())
        .map_err(|source| EvalError::Features {
            path: path.to_path_buf(),
            source,
        })
}

/// Fills the condition x subset similarity grid and the per-subset summary.
pub fn conditioning_sweep(pairs: &[EvalPair], options: &SweepOptions) -> Result<MetricsReport, EvalError> {
    for (i, p) in pairs.iter().enumerate() {
        p.check(i)?;
    }
    let sims: Vec<PairSimilarity> = pairs
        .par_iter()
        .map(|p| {
            let g = load_canonical(&p.generated)?;
            let r = load_canonical(&p.reference)?;
            let exclude = if options.exclude_prefix { p.prefix_seconds } else { 0.0 };
            chroma_pair_similarity(&g, &r, exclude)
        })
        .collect::<Result<_, _>>()?;

    let mut grid = Vec::new();
    let mut empty_cells = Vec::new();
    for subset in Subset::ALL {
        for condition in Condition::ALL {
            let values: Vec<f64> = pairs
                .iter()
                .zip(&sims)
                .filter(|(p, _)| p.subset == subset && p.condition == condition)
                .map(|(_, s)| s.similarity)
                .collect();
            if values.is_empty() {
                empty_cells.push(format!("{subset}/{condition}"));
            }
            grid.push(GridCell {
                subset,
                condition,
                chroma_similarity: (!values.is_empty()).then(|| CellStats::from_values(&values)),
            });
        }
    }

    let mut subsets = Vec::new();
    for subset in Subset::ALL {
        let text_pairs: Vec<&EvalPair> = pairs
            .iter()
            .filter(|p| p.subset == subset && p.condition == Condition::Text)
            .collect();
        let n_pairs = pairs.iter().filter(|p| p.subset == subset).count();
        let chroma_similarity = grid
            .iter()
            .find(|c| c.subset == subset && c.condition == Condition::Text)
            .and_then(|c| c.chroma_similarity);
        let kld = if options.kld && !text_pairs.is_empty() {
            let gen: Vec<ClipFeatures> = text_pairs
                .par_iter()
                .map(|p| clip_features(&p.generated))
                .collect::<Result<_, _>>()?;
            let refs: Vec<ClipFeatures> = text_pairs
                .par_iter()
                .map(|p| clip_features(&p.reference))
                .collect::<Result<_, _>>()?;
            Some(corpus_kld(&gen, &refs, &options.kld_config)?.kld)
        } else {
            None
        };
        subsets.push(SubsetReport {
            subset,
            n_pairs,
            kld,
            chroma_similarity,
        });
    }

    Ok(MetricsReport {
        exclude_prefix: options.exclude_prefix,
        grid,
        subsets,
        empty_cells,
        silent_pairs: sims.iter().filter(|s| s.silent).count(),
        label_kld: None,
    })
}

impl MetricsReport {
    pub fn cell(&self, subset: Subset, condition: Condition) -> Option<CellStats> {
        self.grid
            .iter()
            .find(|c| c.subset == subset && c.condition == condition)
            .and_then(|c| c.chroma_similarity)
    }

    /// Two tables: per-subset KLD and similarity, then the condition grid.
    pub fn to_table(&self) -> String {
        let fmt_cell = |c: Option<CellStats>| match c {
            Some(s) => format!("{:.4} ± {:.4} (n={})", s.mean, s.std, s.n),
            None => "-".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Prefix exclusion: {}",
            if self.exclude_prefix { "on" } else { "off" }
        );
        let _ = writeln!(out, "\n{:<18} {:>10}  {:<28} {:>7}", "subset", "KLD", "chroma similarity", "pairs");
        for s in &self.subsets {
            let kld = s.kld.map_or("-".to_string(), |k| format!("{k:.4}"));
            let _ = writeln!(
                out,
                "{:<18} {:>10}  {:<28} {:>7}",
                s.subset.as_str(),
                kld,
                fmt_cell(s.chroma_similarity),
                s.n_pairs
            );
        }
        let _ = write!(out, "\n{:<10}", "condition");
        for s in Subset::ALL {
            let _ = write!(out, " {:<28}", s.as_str());
        }
        out.push('\n');
        for c in Condition::ALL {
            let _ = write!(out, "{:<10}", c.as_str());
            for s in Subset::ALL {
                let _ = write!(out, " {:<28}", fmt_cell(self.cell(s, c)));
            }
            out.push('\n');
        }
        if let Some(l) = self.label_kld {
            let _ = writeln!(out, "\nLabel-distribution KLD: {l:.4}");
        }
        if self.silent_pairs > 0 {
            let _ = writeln!(out, "\n{} pair(s) involved a silent clip (similarity 0)", self.silent_pairs);
        }
        out
    }
}
