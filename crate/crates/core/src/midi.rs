//! Standard MIDI File reading and writing, and quantization of note lists
//! onto the 16th-note grid.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ticks per quarter note used by [`write_midi`].
pub const WRITE_PPQ: u16 = 480;
/// Microseconds per quarter note used by [`write_midi`] (120 BPM).
pub const WRITE_TEMPO_US: u32 = 500_000;

/// Longest gap-absorbed note before a melody is split.
pub const MAX_ABSORBED_DURATION: u32 = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported MIDI format 2 (independent sequences)")]
    UnsupportedFormat2,
    #[error("unsupported MIDI format {0}")]
    UnknownFormat(u16),
    #[error("unsupported SMPTE time division 0x{0:04x}")]
    SmpteDivision(u16),
    #[error("ticks per quarter must be at least 24, got {0}")]
    PpqTooSmall(u16),
    #[error("cannot write an empty melody")]
    EmptyMelody,
    #[error("no track with note events")]
    NoNotes,
}

/// A note as read from the file, before quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawNote {
    pub onset_ticks: u64,
    pub duration_ticks: u64,
    pub pitch: u8,
    pub track_index: usize,
}

/// One melodic note: MIDI pitch and duration in 16th-note units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoteEvent {
    pub pitch: u8,
    pub duration: u16,
}

impl NoteEvent {
    pub fn new(pitch: u8, duration: u16) -> Self {
        debug_assert!(pitch <= 127 && duration >= 1);
        Self { pitch, duration }
    }
}

impl fmt::Display for NoteEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.pitch, self.duration)
    }
}

// (p, d) pairs on the wire, matching the dataset representation.
impl Serialize for NoteEvent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (self.pitch, self.duration).serialize(s)
    }
}

impl<'de> Deserialize<'de> for NoteEvent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (pitch, duration) = <(u8, u16)>::deserialize(d)?;
        if pitch > 127 || duration == 0 {
            return Err(serde::de::Error::custom(format!(
                "invalid note ({pitch}, {duration})"
            )));
        }
        Ok(Self { pitch, duration })
    }
}

/// A monophonic melody: notes played back to back.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Melody {
    pub notes: Vec<NoteEvent>,
}

impl Melody {
    pub fn new(notes: Vec<NoteEvent>) -> Self {
        Self { notes }
    }

    /// Builds a melody from `(pitch, duration)` pairs.
    pub fn from_pairs(pairs: &[(u8, u16)]) -> Self {
        Self::new(pairs.iter().map(|&(p, d)| NoteEvent::new(p, d)).collect())
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Total length in 16th-note cells.
    pub fn total_duration(&self) -> usize {
        self.notes.iter().map(|n| n.duration as usize).sum()
    }

    pub fn max_pitch(&self) -> Option<u8> {
        self.notes.iter().map(|n| n.pitch).max()
    }

    /// Shifts every pitch by `semitones`; `None` if any pitch leaves 0..=127.
    pub fn transpose(&self, semitones: i32) -> Option<Melody> {
        self.notes
            .iter()
            .map(|n| {
                let p = n.pitch as i32 + semitones;
                (0..=127)
                    .contains(&p)
                    .then(|| NoteEvent::new(p as u8, n.duration))
            })
            .collect::<Option<Vec<_>>>()
            .map(Melody::new)
    }
}

/// Everything [`parse_midi`] extracts from a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedMidi {
    pub format: u16,
    pub ticks_per_quarter: u16,
    /// Sorted by onset, ties by descending pitch.
    pub notes: Vec<RawNote>,
    /// Tracks dropped by [`parse_midi_lenient`].
    pub skipped_tracks: Vec<usize>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn malformed(&self, reason: impl Into<String>) -> MidiError {
        MidiError::Malformed {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        if self.pos >= self.end {
            return Err(self.malformed("unexpected end of data"));
        }
        let b = self.bytes[self.pos];
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.end - self.pos < n {
            return Err(self.malformed(format!("need {n} bytes, {} remain", self.end - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16_be(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32_be(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::Malformed {
            offset: start,
            reason: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

fn parse_track(
    bytes: &[u8],
    start: usize,
    end: usize,
    track: usize,
) -> Result<Vec<RawNote>, MidiError> {
    let mut r = Reader {
        bytes,
        pos: start,
        end,
    };
    let mut now: u64 = 0;
    let mut running: Option<u8> = None;
    let mut open: HashMap<(u8, u8), VecDeque<u64>> = HashMap::new();
    let mut notes = Vec::new();

    while r.pos < r.end {
        now += r.vlq()? as u64;
        let status_at = r.pos;
        let first = r.u8()?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => {
                    return Err(MidiError::Malformed {
                        offset: status_at,
                        reason: format!("data byte 0x{first:02x} without running status"),
                    })
                }
            }
        };
        match status {
            0xff => {
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                r.take(len)?;
                if kind == 0x2f {
                    break;
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let arity = if kind == 0xc0 || kind == 0xd0 { 1 } else { 2 };
                let mut data = [0u8; 2];
                for (i, slot) in data.iter_mut().take(arity).enumerate() {
                    let b = match (i, first_data) {
                        (0, Some(b)) => b,
                        _ => r.u8()?,
                    };
                    if b & 0x80 != 0 {
                        return Err(MidiError::Malformed {
                            offset: r.pos - 1,
                            reason: format!("status byte 0x{b:02x} inside channel message"),
                        });
                    }
                    *slot = b;
                }
                let [pitch, velocity] = data;
                let is_on = kind == 0x90 && velocity > 0;
                let is_off = kind == 0x80 || (kind == 0x90 && velocity == 0);
                if is_on {
                    open.entry((channel, pitch)).or_default().push_back(now);
                } else if is_off {
                    if let Some(onset) = open.get_mut(&(channel, pitch)).and_then(|q| q.pop_front())
                    {
                        if now > onset {
                            notes.push(RawNote {
                                onset_ticks: onset,
                                duration_ticks: now - onset,
                                pitch,
                                track_index: track,
                            });
                        }
                    }
                }
            }
            other => {
                return Err(MidiError::Malformed {
                    offset: status_at,
                    reason: format!("unsupported status byte 0x{other:02x}"),
                })
            }
        }
    }

    // notes still sounding at the end of the track end there
    for ((_, pitch), onsets) in open {
        for onset in onsets {
            if now > onset {
                notes.push(RawNote {
                    onset_ticks: onset,
                    duration_ticks: now - onset,
                    pitch,
                    track_index: track,
                });
            }
        }
    }
    Ok(notes)
}

fn parse_impl(bytes: &[u8], lenient: bool) -> Result<ParsedMidi, MidiError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        end: bytes.len(),
    };
    if r.take(4).map_err(|_| MidiError::Malformed {
        offset: 0,
        reason: "file shorter than a header chunk".into(),
    })? != b"MThd"
    {
        return Err(MidiError::Malformed {
            offset: 0,
            reason: "missing MThd header".into(),
        });
    }
    let header_len = r.u32_be()? as usize;
    if header_len < 6 {
        return Err(MidiError::Malformed {
            offset: 4,
            reason: format!("header length {header_len} < 6"),
        });
    }
    let header_body = r.pos;
    let format = r.u16_be()?;
    let _declared_tracks = r.u16_be()?;
    let division = r.u16_be()?;
    match format {
        0 | 1 => {}
        2 => return Err(MidiError::UnsupportedFormat2),
        f => return Err(MidiError::UnknownFormat(f)),
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision(division));
    }
    r.pos = header_body;
    r.take(header_len)?;

    let mut notes = Vec::new();
    let mut skipped = Vec::new();
    let mut track = 0usize;
    while r.pos < r.end {
        let chunk_at = r.pos;
        let id = r.take(4)?;
        let len = r.u32_be()? as usize;
        if r.end - r.pos < len {
            return Err(MidiError::Malformed {
                offset: chunk_at + 4,
                reason: format!(
                    "chunk length {len} exceeds the {} bytes remaining",
                    r.end - r.pos
                ),
            });
        }
        let body = r.pos;
        r.pos += len;
        if id != b"MTrk" {
            continue;
        }
        match parse_track(bytes, body, body + len, track) {
            Ok(mut n) => notes.append(&mut n),
            Err(e) if lenient => {
                log::warn!("skipping track {track}: {e}");
                skipped.push(track);
            }
            Err(e) => return Err(e),
        }
        track += 1;
    }

    notes.sort_by(|a, b| {
        a.onset_ticks
            .cmp(&b.onset_ticks)
            .then(b.pitch.cmp(&a.pitch))
            .then(a.track_index.cmp(&b.track_index))
    });
    Ok(ParsedMidi {
        format,
        ticks_per_quarter: division,
        notes,
        skipped_tracks: skipped,
    })
}

/// Parses a format 0 or 1 Standard MIDI File. Any malformed track is an error.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi, MidiError> {
    parse_impl(bytes, false)
}

/// Like [`parse_midi`], but a track with a malformed event is skipped with a
/// warning. Header and chunk framing errors are still fatal.
pub fn parse_midi_lenient(bytes: &[u8]) -> Result<ParsedMidi, MidiError> {
    parse_impl(bytes, true)
}

fn ticks_to_units(ticks: u64, ppq: u64) -> u64 {
    // round(ticks * 4 / ppq), halves up
    (8 * ticks + ppq) / (2 * ppq)
}

/// Snaps notes onto the 16th-note grid and forces monophony.
///
/// Simultaneous onsets keep the highest pitch, overlaps truncate the earlier
/// note, and gaps extend the earlier note as long as it stays within
/// [`MAX_ABSORBED_DURATION`]. A longer gap splits the melody; only the
/// segment with the most notes (earliest on ties) is returned.
pub fn quantize(raw: &[RawNote], ppq: u16) -> Result<Melody, MidiError> {
    if ppq < 24 {
        return Err(MidiError::PpqTooSmall(ppq));
    }
    let ppq = ppq as u64;
    let mut grid: Vec<(u64, u64, u8)> = raw
        .iter()
        .map(|n| {
            (
                ticks_to_units(n.onset_ticks, ppq),
                ticks_to_units(n.duration_ticks, ppq).max(1),
                n.pitch,
            )
        })
        .collect();
    grid.sort_by(|a, b| a.0.cmp(&b.0).then(b.2.cmp(&a.2)));
    grid.dedup_by_key(|n| n.0);

    let mut segments: Vec<Vec<NoteEvent>> = vec![Vec::new()];
    for (i, &(onset, dur, pitch)) in grid.iter().enumerate() {
        let mut split_after = false;
        let dur = match grid.get(i + 1) {
            Some(&(next, _, _)) => {
                let room = next - onset;
                if dur >= room || room <= MAX_ABSORBED_DURATION as u64 {
                    room
                } else {
                    split_after = true;
                    dur
                }
            }
            None => dur,
        };
        let dur = u16::try_from(dur).unwrap_or(u16::MAX);
        segments
            .last_mut()
            .expect("at least one segment")
            .push(NoteEvent::new(pitch, dur));
        if split_after {
            segments.push(Vec::new());
        }
    }

    let mut best = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.len() > segments[best].len() {
            best = i;
        }
    }
    if segments.len() > 1 {
        log::info!(
            "melody split into {} segments at long rests; keeping segment {best} ({} notes)",
            segments.len(),
            segments[best].len()
        );
    }
    Ok(Melody::new(segments.swap_remove(best)))
}

/// Reads a file and quantizes the first track that contains notes.
pub fn extract_melody(bytes: &[u8]) -> Result<Melody, MidiError> {
    let parsed = parse_midi_lenient(bytes)?;
    let track = parsed
        .notes
        .iter()
        .map(|n| n.track_index)
        .min()
        .ok_or(MidiError::NoNotes)?;
    let tracks_with_notes = {
        let mut t: Vec<usize> = parsed.notes.iter().map(|n| n.track_index).collect();
        t.sort_unstable();
        t.dedup();
        t.len()
    };
    if tracks_with_notes > 1 {
        log::debug!("{tracks_with_notes} tracks carry notes; using track {track}");
    }
    let notes: Vec<RawNote> = parsed
        .notes
        .into_iter()
        .filter(|n| n.track_index == track)
        .collect();
    quantize(&notes, parsed.ticks_per_quarter)
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Encodes a melody as a format-0 file at 480 PPQ and 120 BPM, notes back to back.
pub fn write_midi(melody: &Melody) -> Result<Vec<u8>, MidiError> {
    if melody.is_empty() {
        return Err(MidiError::EmptyMelody);
    }
    let unit = (WRITE_PPQ / 4) as u32;
    let mut track = Vec::with_capacity(16 + melody.len() * 10);
    push_vlq(&mut track, 0);
    let tempo = WRITE_TEMPO_US.to_be_bytes();
    track.extend_from_slice(&[0xff, 0x51, 0x03, tempo[1], tempo[2], tempo[3]]);
    for note in &melody.notes {
        push_vlq(&mut track, 0);
        track.extend_from_slice(&[0x90, note.pitch, 0x50]);
        push_vlq(&mut track, note.duration as u32 * unit);
        track.extend_from_slice(&[0x80, note.pitch, 0x40]);
    }
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(22 + track.len());
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_PPQ.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}
