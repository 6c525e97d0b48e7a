use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ClipRecord;
use crate::dsp::KeyLabel;
use crate::tags::{EnergyClass, TempoClass};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Distribution {
    pub name: String,
    /// Number of clips that carry the field.
    pub records_with_field: u64,
    pub rows: Vec<Row>,
}

impl Distribution {
    fn new(name: &str, records_with_field: u64, rows: Vec<Row>) -> Self {
        Self {
            name: name.to_string(),
            records_with_field,
            rows,
        }
    }

    pub fn count(&self, label: &str) -> Option<u64> {
        self.rows.iter().find(|r| r.label == label).map(|r| r.count)
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.count).sum()
    }
}

/// Corpus statistics. All counts are per clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub unit: String,
    pub total_clips: u64,
    /// Distinct track ids.
    pub total_tracks: u64,
    pub key: Distribution,
    pub tempo: Distribution,
    pub energy: Distribution,
    pub genre: Distribution,
    /// Top instruments by number of clips listing them; a clip may count
    /// toward several rows.
    pub instruments: Distribution,
    pub happiness: Distribution,
    pub popularity: Distribution,
}

/// `"0–9"`, `"10–19"`, ..., `"90–99"`.
pub fn decile_label(value: u8) -> String {
    let lo = (value.min(99) / 10) * 10;
    format!("{lo}\u{2013}{}", lo + 9)
}

fn decile_rows(values: impl Iterator<Item = u8>) -> (u64, Vec<Row>) {
    let mut counts = [0u64; 10];
    let mut n = 0;
    for v in values {
        counts[usize::from(v.min(99) / 10)] += 1;
        n += 1;
    }
    let rows = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| Row {
            label: decile_label((i * 10) as u8),
            count,
        })
        .collect();
    (n, rows)
}

/// Rows sorted by count descending, then label.
fn ranked(counts: BTreeMap<String, u64>, top: Option<usize>) -> Vec<Row> {
    let mut rows: Vec<Row> = counts.into_iter().map(|(label, count)| Row { label, count }).collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
    if let Some(n) = top {
        rows.truncate(n);
    }
    rows
}

pub fn compute_stats(records: &[ClipRecord], top_instruments: usize) -> StatsReport {
    let tags: Vec<_> = records.iter().filter_map(|r| r.tags.as_ref()).collect();
    let tagged = tags.len() as u64;

    let mut key_counts: BTreeMap<KeyLabel, u64> = KeyLabel::all().map(|k| (k, 0)).collect();
    let mut keyed = 0;
    for k in tags.iter().filter_map(|t| t.key) {
        *key_counts.get_mut(&k).expect("all keys present") += 1;
        keyed += 1;
    }
    let key_rows = KeyLabel::all()
        .map(|k| Row {
            label: k.to_string(),
            count: key_counts[&k],
        })
        .collect();

    let tempo_rows = TempoClass::ALL
        .iter()
        .map(|c| Row {
            label: c.as_str().to_string(),
            count: tags.iter().filter(|t| t.tempo_class == *c).count() as u64,
        })
        .collect();
    let energy_rows = EnergyClass::ALL
        .iter()
        .map(|c| Row {
            label: c.as_str().to_string(),
            count: tags.iter().filter(|t| t.energy_class == *c).count() as u64,
        })
        .collect();

    let mut genres = BTreeMap::new();
    let mut with_genre = 0;
    for g in tags.iter().filter_map(|t| t.genre.as_ref()) {
        *genres.entry(g.clone()).or_insert(0) += 1;
        with_genre += 1;
    }

    let mut instruments = BTreeMap::new();
    let mut with_instruments = 0;
    for t in &tags {
        if !t.instruments.is_empty() {
            with_instruments += 1;
        }
        for i in &t.instruments {
            *instruments.entry(i.as_str().to_string()).or_insert(0) += 1;
        }
    }

    let (n_happy, happy_rows) = decile_rows(tags.iter().filter_map(|t| t.happiness));
    let (n_pop, pop_rows) = decile_rows(tags.iter().filter_map(|t| t.popularity));

    let tracks: std::collections::BTreeSet<&str> = records.iter().map(|r| r.track_id.as_str()).collect();

    StatsReport {
        unit: "clips".into(),
        total_clips: records.len() as u64,
        total_tracks: tracks.len() as u64,
        key: Distribution::new("Key Distribution", keyed, key_rows),
        tempo: Distribution::new("Tempo Distribution", tagged, tempo_rows),
        energy: Distribution::new("Energy Distribution", tagged, energy_rows),
        genre: Distribution::new("Genre Distribution", with_genre, ranked(genres, None)),
        instruments: Distribution::new(
            "Top Instruments",
            with_instruments,
            ranked(instruments, Some(top_instruments)),
        ),
        happiness: Distribution::new("Happiness Distribution", n_happy, happy_rows),
        popularity: Distribution::new("Popularity Distribution", n_pop, pop_rows),
    }
}

impl StatsReport {
    pub fn distributions(&self) -> [&Distribution; 7] {
        [
            &self.key,
            &self.tempo,
            &self.energy,
            &self.instruments,
            &self.genre,
            &self.happiness,
            &self.popularity,
        ]
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Corpus statistics: {} clips from {} tracks (all counts are per clip)",
            self.total_clips, self.total_tracks
        );
        let width = self
            .distributions()
            .iter()
            .flat_map(|d| d.rows.iter().map(|r| r.label.chars().count()))
            .max()
            .unwrap_or(0)
            .max(8);
        for d in self.distributions() {
            let _ = writeln!(out, "\n{} ({} clips with this field)", d.name, d.records_with_field);
            for r in &d.rows {
                let pct = if d.records_with_field > 0 {
                    100.0 * r.count as f64 / d.records_with_field as f64
                } else {
                    0.0
                };
                let pad = width - r.label.chars().count();
                let _ = writeln!(out, "  {}{}  {:>8}  {:>6.2}%", r.label, " ".repeat(pad), r.count, pct);
            }
        }
        out
    }
}
