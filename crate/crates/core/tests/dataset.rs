use std::path::PathBuf;

use melgen::dataset::{build, clean, decode_intervals, split_train_val, MAX_DURATION};
use melgen::train::{make_batches, validation_batches};
use melgen::{Corpus, EncodedDataset, Variant};

fn corpus() -> Corpus {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus");
    clean(&Corpus::load_dir(&dir).unwrap())
}

const VARIANTS: [Variant; 3] = [Variant::Control, Variant::Interval, Variant::Db12];

#[test]
fn targets_are_inputs_shifted_by_one() {
    let corpus = corpus();
    for v in VARIANTS {
        let ds = build(v, &corpus).unwrap();
        assert_eq!(ds.x.len(), ds.y.len());
        assert_eq!(ds.x[1..], ds.y[..ds.y.len() - 1], "{v}");
        assert_eq!(ds.y.last(), ds.x.first());
        assert!(ds.x.iter().all(|&t| (t as usize) < ds.vocab.len()));
    }
}

#[test]
fn transposed_set_stays_in_range() {
    let corpus = corpus();
    let control = build(Variant::Control, &corpus).unwrap();
    let db12 = build(Variant::Db12, &corpus).unwrap();
    assert_eq!(db12.song_count(), 12 * control.song_count());
    for i in 0..db12.song_count() {
        for t in db12.song_tokens(i) {
            assert!((0..=127).contains(&t.value));
            assert!((1..=MAX_DURATION as u8).contains(&t.duration));
        }
    }
}

#[test]
fn interval_tokens_decode_to_the_source() {
    let corpus = corpus();
    let ds = build(Variant::Interval, &corpus).unwrap();
    assert_eq!(ds.song_count(), corpus.len());
    for (i, m) in corpus.melodies.iter().enumerate() {
        let tokens = ds.song_tokens(i);
        assert_eq!(tokens[0].value, 0);
        let decoded = decode_intervals(&tokens, m.notes[0].pitch);
        assert_eq!(decoded.clamped, 0);
        assert_eq!(&decoded.melody, m);
    }
}

#[test]
fn saved_datasets_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus();
    for v in VARIANTS {
        let ds = build(v, &corpus).unwrap();
        let path = dir.path().join(format!("{v}.mmtd"));
        ds.save(&path).unwrap();
        let back = EncodedDataset::load(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.fingerprint(), ds.fingerprint());
    }
}

#[test]
fn no_training_step_reads_validation_tokens() {
    let corpus = corpus();
    for v in VARIANTS {
        let ds = build(v, &corpus).unwrap();
        let (train, val) = split_train_val(&ds, 0.1).unwrap();
        let cut = train.len();
        assert_eq!(cut + val.len(), ds.len());
        assert!(
            ds.song_boundaries.contains(&cut),
            "{v}: split inside a song"
        );
        assert_eq!(train.x[..], ds.x[..cut]);
        assert_eq!(val.x[..], ds.x[cut..]);
        assert_eq!(train.vocab, val.vocab);

        for (batch, seq) in [(16, 50), (4, 25)] {
            let b = make_batches(&train.x, &train.y, batch, seq).unwrap();
            let offsets = b.consumed_offsets(train.len());
            assert!(offsets.iter().all(|&o| o < cut));
            // inputs in every step are exactly the training tokens at those offsets
            let mut from_steps = Vec::new();
            for lane in 0..b.lanes() {
                for step in 0..b.steps() {
                    let (bx, _) = b.block(step);
                    from_steps.extend(bx.row(lane).iter().map(|&t| t as u32));
                }
            }
            let expected: Vec<u32> = offsets.iter().map(|&o| train.x[o]).collect();
            assert_eq!(from_steps, expected);

            let vb = validation_batches(&val.x, &val.y, batch, seq).unwrap();
            assert!(vb
                .consumed_offsets(val.len())
                .iter()
                .all(|&o| o < val.len()));
        }
    }
}

#[test]
fn split_rejects_bad_fractions() {
    let ds = build(Variant::Control, &corpus()).unwrap();
    for f in [0.0, -0.1, 0.5, f64::NAN] {
        assert!(split_train_val(&ds, f).is_err(), "{f}");
    }
}
