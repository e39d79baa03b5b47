use std::fs;
use std::path::PathBuf;

use melgen::midi::{extract_melody, parse_midi, quantize, write_midi, MidiError};
use melgen::{Melody, NoteEvent, RawNote};
use proptest::prelude::*;

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn melody() -> impl Strategy<Value = Melody> {
    prop::collection::vec((0u8..=127, 1u16..=16), 1..60)
        .prop_map(|pairs| Melody::from_pairs(&pairs))
}

#[test]
fn reference_dump_matches_parser() {
    let bytes = fs::read(repo("corpus/001.mid")).unwrap();
    let parsed = parse_midi(&bytes).unwrap();
    let dump: Vec<(u64, u64, u8)> =
        serde_json::from_str(&fs::read_to_string(repo("fixtures/reference/001.json")).unwrap())
            .unwrap();
    let got: Vec<(u64, u64, u8)> = parsed
        .notes
        .iter()
        .map(|n| (n.onset_ticks, n.duration_ticks, n.pitch))
        .collect();
    assert_eq!(got, dump);

    let raw: Vec<RawNote> = dump
        .iter()
        .map(|&(onset_ticks, duration_ticks, pitch)| RawNote {
            onset_ticks,
            duration_ticks,
            pitch,
            track_index: 0,
        })
        .collect();
    let from_dump = quantize(&raw, parsed.ticks_per_quarter).unwrap();
    assert_eq!(extract_melody(&bytes).unwrap(), from_dump);
}

#[test]
fn corpus_melodies_are_monophonic_sequences() {
    let mut files = 0;
    for entry in fs::read_dir(repo("corpus")).unwrap() {
        let path = entry.unwrap().path();
        let bytes = fs::read(&path).unwrap();
        let parsed = parse_midi(&bytes).unwrap();
        let melody = extract_melody(&bytes).unwrap();
        files += 1;

        assert!(!melody.is_empty(), "{}", path.display());
        assert!(melody
            .notes
            .iter()
            .all(|n| n.duration >= 1 && n.pitch <= 127));
        // at most one note per onset survives, so the melody never has more
        // notes than distinct onsets in the file
        let mut onsets: Vec<u64> = parsed.notes.iter().map(|n| n.onset_ticks).collect();
        onsets.dedup();
        assert!(melody.len() <= onsets.len(), "{}", path.display());
        // writing and re-reading what we extracted is lossless
        assert_eq!(
            extract_melody(&write_midi(&melody).unwrap()).unwrap(),
            melody
        );
    }
    assert!(files > 0);
}

#[test]
fn simultaneous_onsets_keep_highest_pitch() {
    let raw = |onset_ticks, pitch| RawNote {
        onset_ticks,
        duration_ticks: 480,
        pitch,
        track_index: 0,
    };
    let m = quantize(&[raw(0, 67), raw(0, 60), raw(0, 72), raw(480, 64)], 480).unwrap();
    assert_eq!(m.notes, vec![NoteEvent::new(72, 4), NoteEvent::new(64, 4)]);
}

#[test]
fn malformed_files_are_errors() {
    assert!(extract_melody(b"").is_err());
    assert!(extract_melody(b"RIFF\0\0\0\x06\0\0\0\x01\x01\xe0").is_err());
    let good = write_midi(&Melody::from_pairs(&[(60, 4), (62, 4)])).unwrap();
    for cut in [10, 20, good.len() - 3] {
        let err = extract_melody(&good[..cut]);
        assert!(err.is_err(), "truncated at {cut} parsed");
    }
    assert_eq!(write_midi(&Melody::default()), Err(MidiError::EmptyMelody));
    assert!(matches!(
        extract_melody(b"MThd\0\0\0\x06\0\x02\0\x01\x01\xe0"),
        Err(MidiError::UnsupportedFormat2)
    ));
}

proptest! {
    #[test]
    fn write_then_read_roundtrips(m in melody()) {
        let bytes = write_midi(&m).unwrap();
        prop_assert_eq!(extract_melody(&bytes).unwrap(), m);
    }

    #[test]
    fn extraction_is_idempotent(m in melody()) {
        let once = extract_melody(&write_midi(&m).unwrap()).unwrap();
        let twice = extract_melody(&write_midi(&once).unwrap()).unwrap();
        prop_assert_eq!(once, twice);
    }
}
