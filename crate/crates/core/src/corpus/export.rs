use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::ClipRecord;
use crate::tags::Instrument;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// Instruments that qualify a single-instrument clip for stage 2.
    pub solo_vocabulary: Vec<String>,
    /// When non-empty, stage 2 is exactly these clip ids instead of the
    /// tag-based selection.
    pub stage2_allowlist: Vec<String>,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            solo_vocabulary: ["tar", "setar", "santur", "kamancheh", "daf", "ney", "tonbak"]
                .map(String::from)
                .to_vec(),
            stage2_allowlist: Vec::new(),
        }
    }
}

/// Audio-only entry for self-supervised adaptation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Entry {
    pub clip_id: String,
    pub audio_path: PathBuf,
}

/// Solo-instrument entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Entry {
    pub clip_id: String,
    pub audio_path: PathBuf,
    #[serde(default)]
    pub instrument: Option<String>,
}

/// Text-audio pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage3Entry {
    pub clip_id: String,
    pub audio_path: PathBuf,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageManifests {
    pub stage1: Vec<Stage1Entry>,
    pub stage2: Vec<Stage2Entry>,
    pub stage3: Vec<Stage3Entry>,
}

pub fn export_training_manifests(records: &[ClipRecord], config: &ExportConfig) -> StageManifests {
    let vocab: BTreeSet<Instrument> = config.solo_vocabulary.iter().map(|s| Instrument::new(s)).collect();
    let allow: BTreeSet<&str> = config.stage2_allowlist.iter().map(String::as_str).collect();

    let stage1 = records
        .iter()
        .map(|r| Stage1Entry {
            clip_id: r.clip_id.clone(),
            audio_path: r.audio_path.clone(),
        })
        .collect();

    let solo_instrument = |r: &ClipRecord| -> Option<String> {
        let tags = r.tags.as_ref()?;
        match tags.instruments.iter().collect::<Vec<_>>().as_slice() {
            [only] if vocab.contains(*only) => Some(only.as_str().to_string()),
            _ => None,
        }
    };
    let stage2: Vec<Stage2Entry> = if allow.is_empty() {
        records
            .iter()
            .filter_map(|r| {
                solo_instrument(r).map(|i| Stage2Entry {
                    clip_id: r.clip_id.clone(),
                    audio_path: r.audio_path.clone(),
                    instrument: Some(i),
                })
            })
            .collect()
    } else {
        let known: BTreeSet<&str> = records.iter().map(|r| r.clip_id.as_str()).collect();
        for id in allow.difference(&known) {
            log::warn!("stage 2 allowlist id {id} is not in the manifest");
        }
        records
            .iter()
            .filter(|r| allow.contains(r.clip_id.as_str()))
            .map(|r| Stage2Entry {
                clip_id: r.clip_id.clone(),
                audio_path: r.audio_path.clone(),
                instrument: solo_instrument(r),
            })
            .collect()
    };

    let stage3: Vec<Stage3Entry> = records
        .iter()
        .filter_map(|r| {
            let c = r.caption.as_ref().filter(|c| !c.fallback)?;
            Some(Stage3Entry {
                clip_id: r.clip_id.clone(),
                audio_path: r.audio_path.clone(),
                caption: c.text.clone(),
            })
        })
        .collect();

    for (name, len) in [("stage 2", stage2.len()), ("stage 3", stage3.len())] {
        if len == 0 {
            log::warn!("{name} export is empty");
        }
    }
    StageManifests { stage1, stage2, stage3 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::record;
    use proptest::prelude::*;

    fn with_instruments(i: usize, names: &[&str]) -> ClipRecord {
        let mut r = record(i);
        r.tags.as_mut().unwrap().instruments = names.iter().map(|n| Instrument::new(n)).collect();
        r
    }

    #[test]
    fn solo_rule() {
        let records = vec![
            with_instruments(0, &["Santur"]),
            with_instruments(1, &["Santur", "Piano"]),
            with_instruments(2, &["Piano"]),
            with_instruments(3, &["Daaf"]),
        ];
        let out = export_training_manifests(&records, &ExportConfig::default());
        let ids: Vec<&str> = out.stage2.iter().map(|e| e.clip_id.as_str()).collect();
        assert_eq!(ids, [records[0].clip_id.as_str(), records[3].clip_id.as_str()]);
        assert_eq!(out.stage2[1].instrument.as_deref(), Some("Daaf"));
        assert_eq!(out.stage1.len(), 4);
    }

    #[test]
    fn fallback_captions_excluded() {
        let records: Vec<ClipRecord> = (0..8).map(record).collect();
        let out = export_training_manifests(&records, &ExportConfig::default());
        // record(i) marks captions with i % 4 == 0 as fallback.
        let ids: Vec<&str> = out.stage3.iter().map(|e| e.clip_id.as_str()).collect();
        let expected: Vec<&str> = records
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 4 != 0)
            .map(|(_, r)| r.clip_id.as_str())
            .collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn allowlist_replaces_tag_selection() {
        let records = vec![with_instruments(0, &["Santur"]), with_instruments(1, &["Piano", "Tar"])];
        let cfg = ExportConfig {
            stage2_allowlist: vec![records[1].clip_id.clone(), "missing".into()],
            ..Default::default()
        };
        let out = export_training_manifests(&records, &cfg);
        assert_eq!(out.stage2.len(), 1);
        assert_eq!(out.stage2[0].clip_id, records[1].clip_id);
    }

    proptest! {
        #[test]
        fn stage1_contains_other_stages(n in 0usize..40, mask in any::<u64>()) {
            let pool = ["Santur", "Piano", "Tar", "Oud", "Ney"];
            let records: Vec<ClipRecord> = (0..n)
                .map(|i| {
                    let picks: Vec<&str> = pool.iter().enumerate()
                        .filter(|(j, _)| (mask >> ((i * 5 + j) % 64)) & 1 == 1)
                        .map(|(_, p)| *p)
                        .collect();
                    with_instruments(i, &picks)
                })
                .collect();
            let out = export_training_manifests(&records, &ExportConfig::default());
            let s1: BTreeSet<&str> = out.stage1.iter().map(|e| e.clip_id.as_str()).collect();
            prop_assert_eq!(s1.len(), n);
            prop_assert!(out.stage2.iter().all(|e| s1.contains(e.clip_id.as_str())));
            prop_assert!(out.stage3.iter().all(|e| s1.contains(e.clip_id.as_str())));
        }
    }
}
