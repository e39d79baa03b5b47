//! Seeded sampling from trained models, batch generation, representative
//! song selection and model comparison tables.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    absolute_tokens, decode_intervals, interval_tokens, Token, TokenKind, TokenVocab, Variant,
};
use crate::metrics::{evaluate, MetricError, MetricStats, MetricTriple, SpanConfig, Summary};
use crate::midi::{Melody, NoteEvent};
use crate::nn::{predict_step, CellType, ModelParams, ModelState, NnError, Scalar};

/// D4 half note, E4 quarter, F4 quarter.
pub const DEFAULT_SEED: [(u8, u16); 3] = [(62, 8), (64, 4), (65, 4)];

/// At or below this temperature sampling becomes argmax.
pub const ARGMAX_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("seed token {0} is not in the model vocabulary")]
    SeedTokenMissing(Token),
    #[error("seed melody is empty")]
    EmptySeed,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("model expects {model} tokens but the vocabulary has {vocab}")]
    VocabMismatch { model: usize, vocab: usize },
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("nothing to choose from")]
    Empty,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed_melody: Melody,
    pub notes_to_generate: usize,
    pub temperature: f64,
    pub rng_seed: u64,
    pub songs: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed_melody: Melody::from_pairs(&DEFAULT_SEED),
            notes_to_generate: 30,
            temperature: 1.0,
            rng_seed: 0,
            songs: 100,
        }
    }
}

impl SamplerConfig {
    pub fn is_argmax(&self) -> bool {
        self.temperature <= ARGMAX_TEMPERATURE
    }
}

/// Generator for song `index`: stream `index` of the ChaCha8 sequence keyed
/// by `rng_seed`.
pub fn song_rng(rng_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(index as u64);
    rng
}

fn seed_indices(vocab: &TokenVocab, seed: &Melody) -> Result<Vec<usize>, GenerateError> {
    if seed.is_empty() {
        return Err(GenerateError::EmptySeed);
    }
    let tokens = match vocab.kind() {
        Some(TokenKind::Interval) => interval_tokens(seed),
        Some(TokenKind::Absolute) => absolute_tokens(seed),
        None => return Err(GenerateError::EmptyVocab),
    };
    tokens
        .into_iter()
        .map(|t| {
            vocab
                .index_of(&t)
                .map(|i| i as usize)
                .ok_or(GenerateError::SeedTokenMissing(t))
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

/// Softmax of `logits / temperature`.
pub fn distribution(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut p: Vec<f64> = logits
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

/// Seed followed by `notes_to_generate` sampled notes, drawing from `rng`.
pub fn sample_with<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    vocab: &TokenVocab,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Melody, GenerateError> {
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(GenerateError::BadTemperature(cfg.temperature));
    }
    if params.config.vocab != vocab.len() {
        return Err(GenerateError::VocabMismatch {
            model: params.config.vocab,
            vocab: vocab.len(),
        });
    }
    let seed = seed_indices(vocab, &cfg.seed_melody)?;
    let mut state = ModelState::zeros(&params.config, 1);
    let mut logits = None;
    for &t in &seed {
        logits = Some(predict_step(params, &mut state, &[t])?);
    }

    let mut generated = Vec::with_capacity(cfg.notes_to_generate);
    for step in 0..cfg.notes_to_generate {
        let row: Vec<f64> = logits
            .as_ref()
            .expect("seed is nonempty")
            .row(0)
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        let next = if cfg.is_argmax() {
            argmax(&row)
        } else {
            let p = distribution(&row, cfg.temperature);
            match WeightedIndex::new(&p) {
                Ok(dist) => dist.sample(rng),
                // non-finite logits: fall back to the deterministic choice
                Err(_) => argmax(&row),
            }
        };
        generated.push(next);
        if step + 1 < cfg.notes_to_generate {
            logits = Some(predict_step(params, &mut state, &[next])?);
        }
    }

    let tokens: Vec<Token> = generated
        .iter()
        .map(|&i| vocab.token_of(i as u32).expect("sampled index in vocab"))
        .collect();
    let mut notes = cfg.seed_melody.notes.clone();
    match vocab.kind() {
        Some(TokenKind::Interval) => {
            let mut all = interval_tokens(&cfg.seed_melody);
            all.extend(tokens);
            let decoded = decode_intervals(&all, cfg.seed_melody.notes[0].pitch);
            notes.extend_from_slice(&decoded.melody.notes[cfg.seed_melody.len()..]);
        }
        _ => notes.extend(
            tokens
                .iter()
                .map(|t| NoteEvent::new(t.value as u8, t.duration as u16)),
        ),
    }
    Ok(Melody::new(notes))
}

/// One melody from stream 0 of `cfg.rng_seed`.
pub fn sample<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &TokenVocab,
    cfg: &SamplerConfig,
) -> Result<Melody, GenerateError> {
    sample_with(params, vocab, cfg, &mut song_rng(cfg.rng_seed, 0))
}

/// `cfg.songs` melodies, song `i` drawn from stream `i`.
pub fn generate_corpus<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &TokenVocab,
    cfg: &SamplerConfig,
) -> Result<Vec<Melody>, GenerateError> {
    (0..cfg.songs)
        .map(|i| sample_with(params, vocab, cfg, &mut song_rng(cfg.rng_seed, i)))
        .collect()
}

/// Index of the triple nearest (Euclidean, raw values) to the mean triple;
/// lowest index on ties.
pub fn representative(triples: &[MetricTriple]) -> Result<usize, GenerateError> {
    if triples.is_empty() {
        return Err(GenerateError::Empty);
    }
    let mean = MetricStats::from_triples(triples)?.means();
    let mut best = (0, f64::INFINITY);
    for (i, t) in triples.iter().enumerate() {
        let d = t.distance(&mean);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub label: String,
    pub variant: Variant,
    pub cell: CellType,
    pub hidden: usize,
    pub sampler: SamplerConfig,
    pub span: SpanConfig,
    pub per_song: Vec<MetricTriple>,
    pub stats: MetricStats,
    pub representative: usize,
    pub representative_triple: MetricTriple,
}

impl GenerationReport {
    /// Scores `melodies` and picks the representative.
    pub fn build(
        label: impl Into<String>,
        variant: Variant,
        cell: CellType,
        hidden: usize,
        sampler: &SamplerConfig,
        span: &SpanConfig,
        melodies: &[Melody],
    ) -> Result<Self, GenerateError> {
        let per_song = melodies
            .iter()
            .map(|m| evaluate(m, span))
            .collect::<Result<Vec<_>, _>>()?;
        let stats = MetricStats::from_triples(&per_song)?;
        let representative = representative(&per_song)?;
        Ok(Self {
            label: label.into(),
            variant,
            cell,
            hidden,
            sampler: sampler.clone(),
            span: *span,
            representative_triple: per_song[representative],
            per_song,
            stats,
            representative,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub variant: Variant,
    pub cell: CellType,
    pub cmm: Summary,
    pub lm: Summary,
    pub centr: Summary,
    pub best_cmm: bool,
    pub best_lm: bool,
    pub best_centr: bool,
}

/// Stats to print under the model rows for orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub stats: MetricStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub references: Vec<ReferenceRow>,
}

fn flags(values: &[f64], score: impl Fn(f64) -> f64) -> Vec<bool> {
    let best = values
        .iter()
        .map(|&v| score(v))
        .fold(f64::INFINITY, f64::min);
    values.iter().map(|&v| score(v) == best).collect()
}

/// One row per report. Flags the best mean per metric: closest to 1 for
/// CMM and LM, largest for CENTR. Tied rows are all flagged.
pub fn compare_models(reports: &[GenerationReport]) -> Result<Comparison, GenerateError> {
    if reports.is_empty() {
        return Err(GenerateError::Empty);
    }
    let col = |f: fn(&MetricStats) -> f64| reports.iter().map(|r| f(&r.stats)).collect::<Vec<_>>();
    let cmm = flags(&col(|s| s.cmm.mean), |v| (v - 1.0).abs());
    let lm = flags(&col(|s| s.lm.mean), |v| (v - 1.0).abs());
    let centr = flags(&col(|s| s.centr.mean), |v| -v);
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| ComparisonRow {
            label: r.label.clone(),
            variant: r.variant,
            cell: r.cell,
            cmm: r.stats.cmm,
            lm: r.stats.lm,
            centr: r.stats.centr,
            best_cmm: cmm[i],
            best_lm: lm[i],
            best_centr: centr[i],
        })
        .collect();
    Ok(Comparison {
        rows,
        references: Vec::new(),
    })
}

fn cell(s: &Summary, flagged: bool) -> String {
    format!(
        "{:.2} ± {:.2}{}",
        s.mean,
        s.std,
        if flagged { " *" } else { "  " }
    )
}

impl Comparison {
    pub fn with_reference(mut self, label: impl Into<String>, stats: MetricStats) -> Self {
        self.references.push(ReferenceRow {
            label: label.into(),
            stats,
        });
        self
    }

    /// Aligned text table; `*` marks the best mean per metric.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<[String; 4]> =
            vec![["model".into(), "CMM".into(), "LM".into(), "CENTR".into()]];
        for r in &self.rows {
            lines.push([
                r.label.clone(),
                cell(&r.cmm, r.best_cmm),
                cell(&r.lm, r.best_lm),
                cell(&r.centr, r.best_centr),
            ]);
        }
        for r in &self.references {
            lines.push([
                r.label.clone(),
                cell(&r.stats.cmm, false),
                cell(&r.stats.lm, false),
                cell(&r.stats.centr, false),
            ]);
        }
        let widths: Vec<usize> = (0..4)
            .map(|c| {
                lines
                    .iter()
                    .map(|l| l[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let _ = write!(out, "{:<w$}", l[0], w = widths[0]);
            for c in 1..4 {
                let _ = write!(out, "  {:>w$}", l[c], w = widths[c]);
            }
            out.push('\n');
            if i == 0 || (i == self.rows.len() && !self.references.is_empty()) {
                let total = widths.iter().sum::<usize>() + 6;
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }
}
