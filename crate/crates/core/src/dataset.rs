//! Corpus cleaning and the three training encodings: control (absolute
//! tokens), db12 (all twelve upward transpositions) and interval (pitch
//! deltas).

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{extract_melody, Melody, NoteEvent};

/// Minimum note count for a melody to survive [`clean`].
pub const MIN_NOTES: usize = 12;
/// Longest note duration (a whole note) allowed by [`clean`].
pub const MAX_DURATION: u16 = 16;

pub const DATASET_MAGIC: &[u8; 4] = b"MMTD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("melody {index} has a note outside 1..=16 sixteenths: {note}")]
    Unclean { index: usize, note: NoteEvent },
    #[error("validation fraction must lie in (0, 0.5), got {0}")]
    BadFraction(f64),
    #[error("need at least 2 songs to split, have {0}")]
    TooFewSongs(usize),
    #[error("bad dataset magic {found:?}, expected \"MMTD\"")]
    BadMagic { found: String },
    #[error("unsupported dataset version {found} (this build reads {expected})")]
    Version { found: u16, expected: u16 },
    #[error("corrupt dataset file: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Control,
    Interval,
    Db12,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Control, Variant::Interval, Variant::Db12];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Control => "control",
            Variant::Interval => "interval",
            Variant::Db12 => "db12",
        }
    }

    fn code(self) -> u8 {
        match self {
            Variant::Control => 0,
            Variant::Interval => 1,
            Variant::Db12 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn token_kind(self) -> TokenKind {
        match self {
            Variant::Interval => TokenKind::Interval,
            _ => TokenKind::Absolute,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown dataset variant {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Absolute,
    Interval,
}

/// A (pitch, duration) or (delta, duration) symbol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    /// MIDI pitch for absolute tokens, semitone delta for interval tokens.
    pub value: i16,
    pub duration: u8,
}

impl Token {
    pub fn absolute(pitch: u8, duration: u8) -> Self {
        Self {
            kind: TokenKind::Absolute,
            value: pitch as i16,
            duration,
        }
    }

    pub fn interval(delta: i16, duration: u8) -> Self {
        Self {
            kind: TokenKind::Interval,
            value: delta,
            duration,
        }
    }

    fn is_valid(&self) -> bool {
        let value_ok = match self.kind {
            TokenKind::Absolute => (0..=127).contains(&self.value),
            TokenKind::Interval => (-127..=127).contains(&self.value),
        };
        value_ok && (1..=MAX_DURATION as u8).contains(&self.duration)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TokenKind::Absolute => write!(f, "({}, {})", self.value, self.duration),
            TokenKind::Interval => write!(f, "({:+}, {})", self.value, self.duration),
        }
    }
}

/// Bijection between tokens and dense indices, ordered by (value, duration).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<Token>,
    index: HashMap<Token, u32>,
}

impl TokenVocab {
    pub fn from_tokens(tokens: impl IntoIterator<Item = Token>) -> Self {
        let tokens: Vec<Token> = tokens
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (*t, i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &Token) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, index: u32) -> Option<Token> {
        self.tokens.get(index as usize).copied()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Kind shared by all tokens; `None` for an empty vocabulary.
    pub fn kind(&self) -> Option<TokenKind> {
        self.tokens.first().map(|t| t.kind)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub melodies: Vec<Melody>,
    pub names: Vec<String>,
}

impl Corpus {
    pub fn push(&mut self, name: impl Into<String>, melody: Melody) {
        self.names.push(name.into());
        self.melodies.push(melody);
    }

    pub fn len(&self) -> usize {
        self.melodies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.melodies.is_empty()
    }

    /// Loads every `*.mid` / `*.midi` file directly inside `dir`, in file-name
    /// order. Unreadable files are skipped with a warning.
    pub fn load_dir(dir: &Path) -> Result<Corpus, DatasetError> {
        let io_err = |source| DatasetError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
                        e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi")
                    })
            })
            .collect();
        paths.sort();

        let mut corpus = Corpus::default();
        for path in paths {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let bytes = match std::fs::read(&path) {
                Ok(b) => b,
                Err(e) => {
                    log::warn!("skipping {name}: {e}");
                    continue;
                }
            };
            match extract_melody(&bytes) {
                Ok(m) => corpus.push(name, m),
                Err(e) => log::warn!("skipping {name}: {e}"),
            }
        }
        Ok(corpus)
    }
}

/// Keeps melodies with at least [`MIN_NOTES`] notes and no note longer than a
/// whole note, in their original order.
pub fn clean(corpus: &Corpus) -> Corpus {
    let mut out = Corpus::default();
    for (name, m) in corpus.names.iter().zip(&corpus.melodies) {
        if m.len() >= MIN_NOTES && m.notes.iter().all(|n| n.duration <= MAX_DURATION) {
            out.push(name.clone(), m.clone());
        }
    }
    out
}

/// A tokenized training stream. `y` is `x` shifted left by one, with the
/// last target wrapping to `x[0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub variant: Variant,
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    pub vocab: TokenVocab,
    /// Start offset of each song in `x`.
    pub song_boundaries: Vec<usize>,
}

fn shift_targets(x: &[u32]) -> Vec<u32> {
    let mut y = Vec::with_capacity(x.len());
    y.extend_from_slice(x.get(1..).unwrap_or(&[]));
    if let Some(&first) = x.first() {
        y.push(first);
    }
    y
}

impl EncodedDataset {
    fn from_songs(variant: Variant, songs: Vec<Vec<Token>>) -> Self {
        let vocab = TokenVocab::from_tokens(songs.iter().flatten().copied());
        let mut x = Vec::with_capacity(songs.iter().map(Vec::len).sum());
        let mut song_boundaries = Vec::with_capacity(songs.len());
        for song in &songs {
            song_boundaries.push(x.len());
            x.extend(
                song.iter()
                    .map(|t| vocab.index_of(t).expect("token in vocab")),
            );
        }
        Self::from_parts(variant, vocab, x, song_boundaries)
    }

    fn from_parts(
        variant: Variant,
        vocab: TokenVocab,
        x: Vec<u32>,
        song_boundaries: Vec<usize>,
    ) -> Self {
        let y = shift_targets(&x);
        Self {
            variant,
            x,
            y,
            vocab,
            song_boundaries,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn song_count(&self) -> usize {
        self.song_boundaries.len()
    }

    /// Index slices of each song, in order.
    pub fn songs(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.song_boundaries
            .iter()
            .enumerate()
            .map(move |(i, &start)| {
                let end = self
                    .song_boundaries
                    .get(i + 1)
                    .copied()
                    .unwrap_or(self.x.len());
                &self.x[start..end]
            })
    }

    /// Tokens of song `i`.
    pub fn song_tokens(&self, i: usize) -> Vec<Token> {
        self.songs()
            .nth(i)
            .map(|s| {
                s.iter()
                    .map(|&ix| self.vocab.token_of(ix).expect("index in vocab"))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn slice_songs(&self, from: usize, to: usize) -> Self {
        let start = self.song_boundaries[from];
        let end = self
            .song_boundaries
            .get(to)
            .copied()
            .unwrap_or(self.x.len());
        let bounds = self.song_boundaries[from..to]
            .iter()
            .map(|b| b - start)
            .collect();
        Self::from_parts(
            self.variant,
            self.vocab.clone(),
            self.x[start..end].to_vec(),
            bounds,
        )
    }
}

fn checked_duration(index: usize, note: &NoteEvent) -> Result<u8, DatasetError> {
    if (1..=MAX_DURATION).contains(&note.duration) {
        Ok(note.duration as u8)
    } else {
        Err(DatasetError::Unclean { index, note: *note })
    }
}

pub fn absolute_tokens(melody: &Melody) -> Vec<Token> {
    melody
        .notes
        .iter()
        .map(|n| Token::absolute(n.pitch, n.duration.min(u8::MAX as u16) as u8))
        .collect()
}

/// `[(p1,d1), (p2,d2), ...]` to `[(0,d1), (p2-p1,d2), ...]`.
pub fn interval_tokens(melody: &Melody) -> Vec<Token> {
    let mut prev: Option<u8> = None;
    melody
        .notes
        .iter()
        .map(|n| {
            let delta = prev.map_or(0, |p| n.pitch as i16 - p as i16);
            prev = Some(n.pitch);
            Token::interval(delta, n.duration.min(u8::MAX as u16) as u8)
        })
        .collect()
}

fn validate(corpus: &Corpus) -> Result<(), DatasetError> {
    if corpus.is_empty() {
        return Err(DatasetError::EmptyCorpus);
    }
    for (i, m) in corpus.melodies.iter().enumerate() {
        for n in &m.notes {
            checked_duration(i, n)?;
        }
    }
    Ok(())
}

pub fn build_control(corpus: &Corpus) -> Result<EncodedDataset, DatasetError> {
    validate(corpus)?;
    let songs = corpus.melodies.iter().map(absolute_tokens).collect();
    Ok(EncodedDataset::from_songs(Variant::Control, songs))
}

/// Each song followed by its +1..+11 semitone transpositions. Copies that
/// leave the MIDI range are dropped.
pub fn build_db12(corpus: &Corpus) -> Result<EncodedDataset, DatasetError> {
    validate(corpus)?;
    let mut songs = Vec::with_capacity(corpus.len() * 12);
    for (name, m) in corpus.names.iter().zip(&corpus.melodies) {
        for shift in 0..12 {
            match m.transpose(shift) {
                Some(t) => songs.push(absolute_tokens(&t)),
                None => log::warn!("{name}: transposition +{shift} exceeds pitch 127, dropped"),
            }
        }
    }
    Ok(EncodedDataset::from_songs(Variant::Db12, songs))
}

pub fn build_intervals(corpus: &Corpus) -> Result<EncodedDataset, DatasetError> {
    validate(corpus)?;
    let songs = corpus.melodies.iter().map(interval_tokens).collect();
    Ok(EncodedDataset::from_songs(Variant::Interval, songs))
}

pub fn build(variant: Variant, corpus: &Corpus) -> Result<EncodedDataset, DatasetError> {
    match variant {
        Variant::Control => build_control(corpus),
        Variant::Interval => build_intervals(corpus),
        Variant::Db12 => build_db12(corpus),
    }
}

/// Result of [`decode_intervals`].
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalDecode {
    pub melody: Melody,
    /// Notes whose pitch had to be clamped into 0..=127.
    pub clamped: usize,
}

/// Rebuilds absolute pitches from interval tokens. The first token's delta is
/// replaced by `start_pitch`.
pub fn decode_intervals(tokens: &[Token], start_pitch: u8) -> IntervalDecode {
    let mut pitch = start_pitch as i32;
    let mut clamped = 0;
    let notes = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i > 0 {
                pitch += t.value as i32;
            }
            let p = pitch.clamp(0, 127);
            if p != pitch {
                clamped += 1;
            }
            NoteEvent::new(p as u8, t.duration as u16)
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} decoded pitches clamped into the MIDI range");
    }
    IntervalDecode {
        melody: Melody::new(notes),
        clamped,
    }
}

/// Splits at the interior song boundary nearest to `(1 - val_fraction) * len`.
pub fn split_train_val(
    ds: &EncodedDataset,
    val_fraction: f64,
) -> Result<(EncodedDataset, EncodedDataset), DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(DatasetError::BadFraction(val_fraction));
    }
    if ds.song_count() < 2 {
        return Err(DatasetError::TooFewSongs(ds.song_count()));
    }
    let target = (1.0 - val_fraction) * ds.len() as f64;
    let cut = (1..ds.song_count())
        .min_by(|&a, &b| {
            let da = (ds.song_boundaries[a] as f64 - target).abs();
            let db = (ds.song_boundaries[b] as f64 - target).abs();
            da.total_cmp(&db)
        })
        .expect("at least one interior boundary");
    Ok((ds.slice_songs(0, cut), ds.slice_songs(cut, ds.song_count())))
}

/// 64-bit FNV-1a.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl EncodedDataset {
    /// Binary layout, little-endian: magic, version u16, variant u8, V u32,
    /// V × (kind u8, value i16, duration u8), |X| u64, X as u32, song count
    /// u64, song start offsets as u64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            32 + self.vocab.len() * 4 + self.x.len() * 4 + self.song_count() * 8,
        );
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.push(self.variant.code());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in self.vocab.tokens() {
            out.push(match t.kind {
                TokenKind::Absolute => 0,
                TokenKind::Interval => 1,
            });
            out.extend_from_slice(&t.value.to_le_bytes());
            out.push(t.duration);
        }
        out.extend_from_slice(&(self.x.len() as u64).to_le_bytes());
        for &ix in &self.x {
            out.extend_from_slice(&ix.to_le_bytes());
        }
        out.extend_from_slice(&(self.song_count() as u64).to_le_bytes());
        for &b in &self.song_boundaries {
            out.extend_from_slice(&(b as u64).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = LeReader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != DATASET_MAGIC {
            return Err(DatasetError::BadMagic {
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(DatasetError::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let variant_code = r.u8()?;
        let variant = Variant::from_code(variant_code)
            .ok_or_else(|| DatasetError::Corrupt(format!("unknown variant code {variant_code}")))?;
        let v = r.u32()? as usize;
        r.expect_remaining(v.checked_mul(4), "vocabulary")?;
        let mut tokens = Vec::with_capacity(v);
        for _ in 0..v {
            let kind = match r.u8()? {
                0 => TokenKind::Absolute,
                1 => TokenKind::Interval,
                k => return Err(DatasetError::Corrupt(format!("unknown token kind {k}"))),
            };
            let value = r.u16()? as i16;
            let duration = r.u8()?;
            let t = Token {
                kind,
                value,
                duration,
            };
            if !t.is_valid() || kind != variant.token_kind() {
                return Err(DatasetError::Corrupt(format!(
                    "invalid vocabulary entry {t}"
                )));
            }
            tokens.push(t);
        }
        if tokens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DatasetError::Corrupt(
                "vocabulary not strictly ordered".into(),
            ));
        }
        let vocab = TokenVocab::from_tokens(tokens);

        let n = r.u64()? as usize;
        r.expect_remaining(n.checked_mul(4), "token stream")?;
        let mut x = Vec::with_capacity(n);
        for _ in 0..n {
            let ix = r.u32()?;
            if ix as usize >= v {
                return Err(DatasetError::Corrupt(format!(
                    "token index {ix} >= vocabulary size {v}"
                )));
            }
            x.push(ix);
        }
        let songs = r.u64()? as usize;
        r.expect_remaining(songs.checked_mul(8), "song boundaries")?;
        let mut bounds = Vec::with_capacity(songs);
        for _ in 0..songs {
            bounds.push(r.u64()? as usize);
        }
        let ordered = bounds.first().is_none_or(|&b| b == 0)
            && bounds.windows(2).all(|w| w[0] < w[1])
            && bounds.last().is_none_or(|&b| b < n);
        if !ordered || (n > 0 && bounds.is_empty()) {
            return Err(DatasetError::Corrupt("song boundaries out of order".into()));
        }
        if r.pos != bytes.len() {
            return Err(DatasetError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self::from_parts(variant, vocab, x, bounds))
    }

    /// Inspection mirror of the binary file.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "magic": "MMTD",
            "version": DATASET_VERSION,
            "variant": self.variant,
            "vocab": self.vocab.tokens().iter()
                .map(|t| serde_json::json!([t.kind, t.value, t.duration]))
                .collect::<Vec<_>>(),
            "x": self.x,
            "song_boundaries": self.song_boundaries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Writes the JSON mirror next to `path`, with a `.json` extension.
    pub fn save_json_mirror(&self, path: &Path) -> Result<(), DatasetError> {
        let json_path = path.with_extension("json");
        let text = serde_json::to_string(&self.to_json()).expect("dataset serializes");
        std::fs::write(&json_path, text).map_err(|source| DatasetError::Io {
            path: json_path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.to_bytes())
    }
}

struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> LeReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.bytes.len() - self.pos < n {
            return Err(DatasetError::Corrupt(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn expect_remaining(&self, need: Option<usize>, what: &str) -> Result<(), DatasetError> {
        match need {
            Some(n) if self.bytes.len() - self.pos >= n => Ok(()),
            _ => Err(DatasetError::Corrupt(format!(
                "{what} length exceeds file size"
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
