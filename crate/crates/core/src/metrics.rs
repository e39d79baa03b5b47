//! Rhythm-aware tonality metrics over sliding spans of a 16th-note onset grid.
//!
//! * CMM (conjunct melodic motion): mean absolute interval between
//!   consecutive onsets. Stepwise motion scores 1.
//! * LM (limited macroharmony): distinct pitches per span, scored 5/d below
//!   five, 1 for five to eight, d/8 above eight.
//! * CENTR (centricity): share of a span's onsets taken by its most frequent
//!   pitch.
//!
//! Each metric is averaged over the spans that have enough onsets to score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::Melody;

pub const DEFAULT_SPAN: usize = 32;
pub const DEFAULT_STEP: usize = 4;

/// Distinct-pitch range that scores a perfect LM.
pub const LM_MIN_PITCHES: usize = 5;
pub const LM_MAX_PITCHES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("melody is empty")]
    EmptyMelody,
    #[error("need at least 2 onsets, melody has {0}")]
    TooFewOnsets(usize),
    #[error("span size and step must satisfy 1 <= step <= size, got size {n}, step {m}")]
    BadSpan { n: usize, m: usize },
    #[error("no evaluable melodies ({skipped} skipped)")]
    NothingToEvaluate { skipped: usize },
    #[error("need at least one triple")]
    NoTriples,
}

/// Resolution-16 onset array: `pitch + 1` where a note starts, 0 elsewhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OnsetGrid {
    cells: Vec<u8>,
}

impl OnsetGrid {
    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn onset_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }
}

pub fn to_onset_grid(melody: &Melody) -> Result<OnsetGrid, MetricError> {
    if melody.is_empty() {
        return Err(MetricError::EmptyMelody);
    }
    let mut cells = vec![0u8; melody.total_duration()];
    let mut at = 0;
    for note in &melody.notes {
        cells[at] = note.pitch + 1;
        at += note.duration as usize;
    }
    Ok(OnsetGrid { cells })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CmmMode {
    /// Mean over spans, falling back to the whole melody when no span has two onsets.
    #[default]
    PerSpan,
    /// Mean over every consecutive pair of the melody.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanConfig {
    /// Span size in cells.
    pub n: usize,
    /// Step between span starts in cells.
    pub m: usize,
    #[serde(default)]
    pub cmm_mode: CmmMode,
}

impl Default for SpanConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_SPAN,
            m: DEFAULT_STEP,
            cmm_mode: CmmMode::PerSpan,
        }
    }
}

impl SpanConfig {
    pub fn new(n: usize, m: usize) -> Result<Self, MetricError> {
        let cfg = Self {
            n,
            m,
            cmm_mode: CmmMode::PerSpan,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.n == 0 || self.m == 0 || self.m > self.n {
            return Err(MetricError::BadSpan {
                n: self.n,
                m: self.m,
            });
        }
        Ok(())
    }
}

/// Number of spans in a song of `song_len` cells.
pub fn span_count(song_len: usize, cfg: &SpanConfig) -> usize {
    if song_len <= cfg.n {
        1
    } else {
        (song_len - cfg.n) / cfg.m + 1
    }
}

/// Sliding windows over the grid. Window `i` starts at `i * m` and is `n`
/// cells long, except the last, which runs to the end of the grid so that
/// every cell lies in some window.
pub fn spans<'a>(grid: &'a OnsetGrid, cfg: &SpanConfig) -> Vec<&'a [u8]> {
    let len = grid.len();
    let count = span_count(len, cfg);
    (0..count)
        .map(|i| {
            let start = i * cfg.m;
            let end = if i + 1 == count { len } else { start + cfg.n };
            &grid.cells[start..end]
        })
        .collect()
}

fn onset_pitches(window: &[u8]) -> impl Iterator<Item = i32> + '_ {
    window.iter().filter(|&&c| c != 0).map(|&c| c as i32 - 1)
}

fn mean_abs_interval(window: &[u8]) -> Option<f64> {
    let pitches: Vec<i32> = onset_pitches(window).collect();
    if pitches.len() < 2 {
        return None;
    }
    let total: i32 = pitches.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    Some(total as f64 / (pitches.len() - 1) as f64)
}

/// Shifted by the first value, so identical inputs give that value exactly.
fn mean(values: &[f64]) -> Option<f64> {
    let &first = values.first()?;
    Some(first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64)
}

pub fn cmm(grid: &OnsetGrid, cfg: &SpanConfig) -> Result<f64, MetricError> {
    let onsets = grid.onset_count();
    if onsets < 2 {
        return Err(MetricError::TooFewOnsets(onsets));
    }
    let global = mean_abs_interval(&grid.cells).expect("two onsets");
    if cfg.cmm_mode == CmmMode::Global {
        return Ok(global);
    }
    let per_span: Vec<f64> = spans(grid, cfg)
        .into_iter()
        .filter_map(mean_abs_interval)
        .collect();
    Ok(mean(&per_span).unwrap_or(global))
}

/// Score of a span with `distinct` different pitches.
pub fn lm_span_score(distinct: usize) -> f64 {
    if distinct < LM_MIN_PITCHES {
        LM_MIN_PITCHES as f64 / distinct as f64
    } else if distinct <= LM_MAX_PITCHES {
        1.0
    } else {
        distinct as f64 / LM_MAX_PITCHES as f64
    }
}

fn pitch_histogram(window: &[u8]) -> [u32; 128] {
    let mut hist = [0u32; 128];
    for p in onset_pitches(window) {
        hist[p as usize] += 1;
    }
    hist
}

pub fn lm(grid: &OnsetGrid, cfg: &SpanConfig) -> Result<f64, MetricError> {
    let scores: Vec<f64> = spans(grid, cfg)
        .into_iter()
        .map(|w| pitch_histogram(w).iter().filter(|&&c| c > 0).count())
        .filter(|&d| d > 0)
        .map(lm_span_score)
        .collect();
    mean(&scores).ok_or(MetricError::TooFewOnsets(0))
}

/// Modal pitch of a window (lowest on ties) and its share of the onsets.
pub fn modal_share(window: &[u8]) -> Option<(u8, f64)> {
    let hist = pitch_histogram(window);
    let total: u32 = hist.iter().sum();
    if total == 0 {
        return None;
    }
    let (pitch, &count) = hist
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|&(_, c)| c)
        .expect("128 bins");
    Some((pitch as u8, count as f64 / total as f64))
}

pub fn centr(grid: &OnsetGrid, cfg: &SpanConfig) -> Result<f64, MetricError> {
    let shares: Vec<f64> = spans(grid, cfg)
        .into_iter()
        .filter_map(modal_share)
        .map(|(_, share)| share)
        .collect();
    mean(&shares).ok_or(MetricError::TooFewOnsets(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub cmm: f64,
    pub lm: f64,
    pub centr: f64,
}

impl MetricTriple {
    pub fn new(cmm: f64, lm: f64, centr: f64) -> Self {
        Self { cmm, lm, centr }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.cmm, self.lm, self.centr]
    }

    pub fn distance(&self, other: &MetricTriple) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn evaluate(melody: &Melody, cfg: &SpanConfig) -> Result<MetricTriple, MetricError> {
    cfg.validate()?;
    if melody.len() < 2 {
        return Err(MetricError::TooFewOnsets(melody.len()));
    }
    let grid = to_onset_grid(melody)?;
    Ok(MetricTriple {
        cmm: cmm(&grid, cfg)?,
        lm: lm(&grid, cfg)?,
        centr: centr(&grid, cfg)?,
    })
}

/// Mean and population standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        let mean = mean(values)?;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        Some(Summary {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub cmm: Summary,
    pub lm: Summary,
    pub centr: Summary,
}

impl MetricStats {
    pub fn from_triples(triples: &[MetricTriple]) -> Result<Self, MetricError> {
        let column = |f: fn(&MetricTriple) -> f64| {
            Summary::of(&triples.iter().map(f).collect::<Vec<_>>()).ok_or(MetricError::NoTriples)
        };
        Ok(Self {
            cmm: column(|t| t.cmm)?,
            lm: column(|t| t.lm)?,
            centr: column(|t| t.centr)?,
        })
    }

    pub fn means(&self) -> MetricTriple {
        MetricTriple::new(self.cmm.mean, self.lm.mean, self.centr.mean)
    }
}

/// Per-melody scores plus their summary, in the JSON report layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_melody: Vec<MelodyScore>,
    pub stats: MetricStats,
    pub skipped: usize,
    pub config: SpanConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelodyScore {
    pub name: String,
    #[serde(flatten)]
    pub triple: MetricTriple,
}

/// Scores each melody in order; melodies that cannot be scored are skipped
/// and counted.
pub fn corpus_report<'a>(
    melodies: impl IntoIterator<Item = (&'a str, &'a Melody)>,
    cfg: &SpanConfig,
) -> Result<MetricReport, MetricError> {
    cfg.validate()?;
    let mut per_melody = Vec::new();
    let mut skipped = 0;
    for (name, m) in melodies {
        match evaluate(m, cfg) {
            Ok(triple) => per_melody.push(MelodyScore {
                name: name.to_string(),
                triple,
            }),
            Err(e) => {
                log::debug!("skipping {name}: {e}");
                skipped += 1;
            }
        }
    }
    if per_melody.is_empty() {
        return Err(MetricError::NothingToEvaluate { skipped });
    }
    let triples: Vec<MetricTriple> = per_melody.iter().map(|s| s.triple).collect();
    Ok(MetricReport {
        stats: MetricStats::from_triples(&triples)?,
        per_melody,
        skipped,
        config: *cfg,
    })
}

pub fn corpus_stats(melodies: &[Melody], cfg: &SpanConfig) -> Result<MetricStats, MetricError> {
    corpus_report(melodies.iter().map(|m| ("", m)), cfg).map(|r| r.stats)
}
