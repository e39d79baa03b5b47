//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use melgen::dataset::{
    self, build, clean, decode_intervals, fingerprint, interval_tokens, Corpus, EncodedDataset,
    Variant,
};
use melgen::generate::{
    compare_models, generate_corpus, representative, sample, GenerationReport, SamplerConfig,
    ARGMAX_TEMPERATURE,
};
use melgen::metrics::{evaluate, span_count, MetricStats, MetricTriple, SpanConfig, Summary};
use melgen::midi::{extract_melody, parse_midi, quantize, write_midi, Melody, NoteEvent};
use melgen::nn::{grad_check, CellType, ModelConfig};
use melgen::train::{Checkpoint, LearningCurve, TrainConfig, Trainer};

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_melody(
    rng: &mut ChaCha8Rng,
    len: usize,
    pitches: std::ops::RangeInclusive<u8>,
) -> Melody {
    Melody::new(
        (0..len)
            .map(|_| NoteEvent::new(rng.random_range(pitches.clone()), rng.random_range(1..=16)))
            .collect(),
    )
}

fn brute_span_count(len: usize, n: usize, m: usize) -> usize {
    let mut count = 0;
    let mut start = 0;
    while start + n <= len {
        count += 1;
        start += m;
    }
    count.max(1)
}

fn span_oracle() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    let default = SpanConfig::default();
    for len in 1..=200 {
        ensure!(
            span_count(len, &default) == brute_span_count(len, 32, 4),
            "length {len}: {} vs {}",
            span_count(len, &default),
            brute_span_count(len, 32, 4)
        );
        checked += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let n = rng.random_range(1..=64);
        let m = rng.random_range(1..=n);
        let cfg = SpanConfig::new(n, m).map_err(err)?;
        for len in 1..=200 {
            ensure!(
                span_count(len, &cfg) == brute_span_count(len, n, m),
                "n={n} m={m} length {len}"
            );
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "{checked} (length, n, m) cases exact in {elapsed:.2?}"
    ))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for cell in [CellType::Lstm, CellType::Gru] {
        for layers in [1, 2] {
            let cfg = ModelConfig {
                cell,
                hidden: 16,
                layers,
                embedding: 8,
                vocab: 12,
                seed: 11,
            };
            let report = grad_check(&cfg, 1e-5).map_err(err)?;
            ensure!(
                report.passed,
                "{cell} x{layers}: max relative error {:.3e}",
                report.max_rel_error
            );
            worst = worst.max(report.max_rel_error);
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "max relative error {worst:.2e} < 1e-5 over LSTM/GRU x 1-2 layers in {elapsed:.2?}"
    ))
}

/// Number of copies of the toy song in the memorization set: two windows of
/// 100 per lane at batch 64.
const TOY_COPIES: usize = 64;

fn toy_melody() -> Result<Melody, String> {
    let bytes = fs::read(repo("fixtures/toy.mid")).map_err(err)?;
    let melody = extract_melody(&bytes).map_err(err)?;
    let listed: Vec<(u8, u16)> =
        serde_json::from_str(&fs::read_to_string(repo("fixtures/toy.json")).map_err(err)?)
            .map_err(err)?;
    ensure!(
        melody == Melody::from_pairs(&listed),
        "toy.mid does not match toy.json"
    );
    Ok(melody)
}

fn memorization() -> Outcome {
    let start = Instant::now();
    let toy = toy_melody()?;
    let mut corpus = Corpus::default();
    for i in 0..TOY_COPIES {
        corpus.push(format!("toy{i}"), toy.clone());
    }
    let ds = build(Variant::Control, &corpus).map_err(err)?;
    ensure!(
        ds.vocab.len() == 200,
        "toy vocabulary has {} tokens",
        ds.vocab.len()
    );
    let mut cfg = TrainConfig::new(ModelConfig::new(CellType::Lstm, 64, ds.vocab.len()));
    cfg.epochs = 300;
    let mut trainer = Trainer::<f32>::new(cfg, ds.fingerprint()).map_err(err)?;
    let batches =
        melgen::train::make_batches(&ds.x, &ds.y, cfg.batch_size, cfg.seq_len).map_err(err)?;
    let mut reached = None;
    let mut last = f64::NAN;
    for epoch in 1..=cfg.epochs {
        last = trainer.run_epoch(&batches).map_err(err)?;
        if last < 0.15 {
            reached = Some(epoch);
            break;
        }
    }
    let Some(epoch) = reached else {
        return Err(format!("train loss {last:.4} after 300 epochs"));
    };
    let sampler = SamplerConfig {
        seed_melody: Melody::new(toy.notes[..3].to_vec()),
        notes_to_generate: 30,
        temperature: ARGMAX_TEMPERATURE,
        rng_seed: 0,
        songs: 1,
    };
    let generated = sample(&trainer.params, &ds.vocab, &sampler).map_err(err)?;
    let wrong = generated
        .notes
        .iter()
        .zip(&toy.notes[..33])
        .filter(|(a, b)| a != b)
        .count();
    ensure!(
        generated.notes[..] == toy.notes[..33],
        "{wrong} of 33 notes differ from the training song"
    );
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    Ok(format!(
        "train loss {last:.4} at epoch {epoch}; argmax continuation reproduces 30/30 notes; {elapsed:.1?}"
    ))
}

#[derive(Deserialize)]
struct MetricFixture {
    name: String,
    notes: Vec<(u8, u16)>,
    n: usize,
    m: usize,
    expected: MetricTriple,
}

fn metric_oracles() -> Outcome {
    let text = fs::read_to_string(repo("fixtures/metric_fixtures.json")).map_err(err)?;
    let fixtures: Vec<MetricFixture> = serde_json::from_str(&text).map_err(err)?;
    ensure!(
        fixtures.len() == 10,
        "expected 10 fixtures, found {}",
        fixtures.len()
    );
    let mut worst: f64 = 0.0;
    for f in &fixtures {
        let cfg = SpanConfig::new(f.n, f.m).map_err(err)?;
        let got = evaluate(&Melody::from_pairs(&f.notes), &cfg).map_err(err)?;
        for (a, b) in got.as_array().iter().zip(f.expected.as_array()) {
            let d = (a - b).abs();
            worst = worst.max(d);
            ensure!(
                d <= 1e-9,
                "{}: got {got:?}, expected {:?}",
                f.name,
                f.expected
            );
        }
    }
    let cfg = SpanConfig::default();
    let constant = evaluate(&Melody::from_pairs(&[(60, 4); 12]), &cfg).map_err(err)?;
    ensure!(
        constant == MetricTriple::new(0.0, 5.0, 1.0),
        "constant pitch gives {constant:?}"
    );
    let scale: Vec<(u8, u16)> = (60..72).map(|p| (p, 4)).collect();
    let chromatic = evaluate(&Melody::from_pairs(&scale), &cfg).map_err(err)?;
    ensure!(
        chromatic.cmm == 1.0,
        "chromatic scale CMM {}",
        chromatic.cmm
    );
    Ok(format!(
        "10 fixtures within {worst:.1e}; constant (0, 5, 1) and chromatic CMM 1 exact"
    ))
}

fn transposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = SpanConfig::default();
    for i in 0..50 {
        let len = rng.random_range(2..=60);
        let m = random_melody(&mut rng, len, 30..=100);
        let base = evaluate(&m, &cfg).map_err(err)?;
        let lo = -(m.notes.iter().map(|n| n.pitch).min().unwrap() as i32);
        let hi = 127 - m.max_pitch().unwrap() as i32;
        for _ in 0..5 {
            let k = rng.random_range(lo..=hi);
            let moved = m
                .transpose(k)
                .ok_or(format!("melody {i}: shift {k} out of range"))?;
            let t = evaluate(&moved, &cfg).map_err(err)?;
            let same = t
                .as_array()
                .iter()
                .zip(base.as_array())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "melody {i} shifted by {k}: {t:?} vs {base:?}");
        }
    }
    Ok("250 transposed copies score bitwise identically".into())
}

fn bundled_corpus() -> Result<Corpus, String> {
    let corpus = Corpus::load_dir(&repo("corpus")).map_err(err)?;
    ensure!(!corpus.is_empty(), "bundled corpus is empty");
    Ok(clean(&corpus))
}

fn dataset_properties() -> Outcome {
    let corpus = bundled_corpus()?;
    let max_pitch = corpus
        .melodies
        .iter()
        .filter_map(Melody::max_pitch)
        .max()
        .unwrap_or(0);
    ensure!(max_pitch <= 115, "corpus max pitch {max_pitch}");
    let mut counts = Vec::new();
    for variant in Variant::ALL {
        let ds = build(variant, &corpus).map_err(err)?;
        ensure!(ds.y.len() == ds.x.len(), "{variant}: |Y| != |X|");
        for i in 0..ds.x.len() - 1 {
            ensure!(ds.y[i] == ds.x[i + 1], "{variant}: Y[{i}] != X[{}]", i + 1);
        }
        ensure!(
            ds.y[ds.x.len() - 1] == ds.x[0],
            "{variant}: last target does not wrap"
        );
        counts.push((variant, ds.song_count()));
    }
    let control = counts[0].1;
    let db12 = counts[2].1;
    ensure!(
        db12 == 12 * control,
        "db12 has {db12} songs, control {control}"
    );
    for (i, m) in corpus.melodies.iter().enumerate() {
        let decoded = decode_intervals(&interval_tokens(m), m.notes[0].pitch);
        ensure!(
            decoded.melody == *m && decoded.clamped == 0,
            "melody {i} does not roundtrip"
        );
    }
    Ok(format!(
        "shift holds on 3 variants; db12 {db12} = 12 x {control}; {} interval roundtrips exact",
        corpus.len()
    ))
}

fn midi_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let len = rng.random_range(1..=80);
        let m = random_melody(&mut rng, len, 0..=127);
        let bytes = write_midi(&m).map_err(err)?;
        let parsed = parse_midi(&bytes).map_err(err)?;
        let back = quantize(&parsed.notes, parsed.ticks_per_quarter).map_err(err)?;
        ensure!(back == m, "melody {i} changed in the roundtrip");
    }
    let bytes = fs::read(repo("corpus/001.mid")).map_err(err)?;
    let parsed = parse_midi(&bytes).map_err(err)?;
    let reference: Vec<(u64, u64, u8)> = serde_json::from_str(
        &fs::read_to_string(repo("fixtures/reference/001.json")).map_err(err)?,
    )
    .map_err(err)?;
    let got: Vec<(u64, u64, u8)> = parsed
        .notes
        .iter()
        .map(|n| (n.onset_ticks, n.duration_ticks, n.pitch))
        .collect();
    ensure!(
        got == reference,
        "001.mid decodes to {} notes differing from the reference dump",
        got.len()
    );
    Ok(format!(
        "100 random melodies roundtrip; 001.mid matches its {}-note reference",
        reference.len()
    ))
}

fn brute_representative(triples: &[MetricTriple]) -> usize {
    let n = triples.len() as f64;
    let mean = [
        triples.iter().map(|t| t.cmm).sum::<f64>() / n,
        triples.iter().map(|t| t.lm).sum::<f64>() / n,
        triples.iter().map(|t| t.centr).sum::<f64>() / n,
    ];
    let dist = |t: &MetricTriple| {
        ((t.cmm - mean[0]).powi(2) + (t.lm - mean[1]).powi(2) + (t.centr - mean[2]).powi(2)).sqrt()
    };
    let mut best = 0;
    for i in 1..triples.len() {
        if dist(&triples[i]) < dist(&triples[best]) {
            best = i;
        }
    }
    best
}

fn representative_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut triples: Vec<MetricTriple> = (0..100)
        .map(|_| {
            MetricTriple::new(
                rng.random_range(0.5..6.0),
                rng.random_range(1.0..3.0),
                rng.random_range(0.1..1.0),
            )
        })
        .collect();
    let got = representative(&triples).map_err(err)?;
    ensure!(
        got == brute_representative(&triples),
        "random set: {got} vs {}",
        brute_representative(&triples)
    );
    // every triple twice: each distance ties with its copy 50 places later
    let half: Vec<MetricTriple> = triples.drain(..50).collect();
    let doubled: Vec<MetricTriple> = half.iter().chain(&half).copied().collect();
    let tied = representative(&doubled).map_err(err)?;
    ensure!(
        tied < 50 && tied == brute_representative(&doubled),
        "tie resolved to {tied}"
    );
    let same = vec![MetricTriple::new(2.0, 1.5, 0.3); 100];
    ensure!(
        representative(&same).map_err(err)? == 0,
        "identical triples"
    );
    let exact = [
        MetricTriple::new(1.0, 1.0, 1.0),
        MetricTriple::new(3.0, 3.0, 0.5),
        MetricTriple::new(2.0, 2.0, 0.75),
    ];
    ensure!(representative(&exact).map_err(err)? == 2, "exact-mean case");
    Ok("random, tied, identical and exact-mean cases match the full scan".into())
}

fn micro_config(ds: &EncodedDataset, cell: CellType, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        seq_len: 50,
        epochs,
        checkpoint_every: 5,
        ..TrainConfig::new(ModelConfig {
            cell,
            hidden: 32,
            layers: 1,
            embedding: 64,
            vocab: ds.vocab.len(),
            seed: 0,
        })
    }
}

fn load(path: &Path) -> Result<(EncodedDataset, u64), String> {
    let bytes = fs::read(path).map_err(err)?;
    Ok((
        EncodedDataset::from_bytes(&bytes).map_err(err)?,
        fingerprint(&bytes),
    ))
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(err)?;
    let data = tmp.path().join("data");
    fs::create_dir_all(&data).map_err(err)?;
    let corpus = bundled_corpus()?;
    for variant in Variant::ALL {
        let ds = build(variant, &corpus).map_err(err)?;
        let path = data.join(format!("{}.mmtd", variant.name()));
        ds.save(&path).map_err(err)?;
        ds.save_json_mirror(&path.with_extension("json"))
            .map_err(err)?;
    }

    let span = SpanConfig::default();
    let sampler = SamplerConfig::default();
    let mut reports = Vec::new();
    for variant in Variant::ALL {
        let (ds, fp) = load(&data.join(format!("{}.mmtd", variant.name())))?;
        let (train, val) = dataset::split_train_val(&ds, 0.1).map_err(err)?;
        for cell in [CellType::Lstm, CellType::Gru] {
            let label = format!("{}-{cell}-32", variant.name());
            let run = tmp.path().join("runs").join(&label);
            let mut trainer = Trainer::<f32>::new(micro_config(&ds, cell, 20), fp).map_err(err)?;
            let outcome = trainer
                .fit(&train, &val, LearningCurve::default(), Some(&run))
                .map_err(err)?;
            ensure!(
                outcome.curve.len() == 20,
                "{label}: {} curve rows",
                outcome.curve.len()
            );
            let ck = Checkpoint::<f32>::load(&run.join("best.mmck"), trainer.config.adam)
                .map_err(err)?;
            let songs = generate_corpus(&ck.params, &ds.vocab, &sampler).map_err(err)?;
            let out = tmp.path().join("songs").join(&label);
            fs::create_dir_all(&out).map_err(err)?;
            let mut reread = Vec::new();
            for (i, m) in songs.iter().enumerate() {
                let path = out.join(format!("song_{:03}.mid", i + 1));
                fs::write(&path, write_midi(m).map_err(err)?).map_err(err)?;
                reread.push(extract_melody(&fs::read(&path).map_err(err)?).map_err(err)?);
            }
            ensure!(reread == songs, "{label}: written songs do not read back");
            ensure!(
                reread.len() == 100 && reread.iter().all(|m| m.len() == 33),
                "{label}: wrong song shapes"
            );
            let report =
                GenerationReport::build(&label, variant, cell, 32, &sampler, &span, &reread)
                    .map_err(err)?;
            let s = report.stats.means().as_array();
            let d = [
                report.stats.cmm.std,
                report.stats.lm.std,
                report.stats.centr.std,
            ];
            ensure!(
                s.iter().chain(&d).all(|v| v.is_finite()),
                "{label}: non-finite stats"
            );
            ensure!(
                report.representative < 100,
                "{label}: representative {}",
                report.representative
            );
            reports.push(report);
        }
    }
    let reference = MetricStats {
        cmm: Summary {
            mean: 2.23,
            std: 0.98,
            count: 0,
        },
        lm: Summary {
            mean: 2.05,
            std: 1.18,
            count: 0,
        },
        centr: Summary {
            mean: 0.27,
            std: 0.14,
            count: 0,
        },
    };
    let table = compare_models(&reports)
        .map_err(err)?
        .with_reference("reference corpus (published)", reference);
    ensure!(table.rows.len() == 6, "{} rows", table.rows.len());
    println!("{}", table.to_text());
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!(
        "6 models x 100 songs of 33 notes scored and compared in {elapsed:.1?}"
    ))
}

fn checkpoint_exactness() -> Outcome {
    let corpus = bundled_corpus()?;
    let ds = build(Variant::Interval, &corpus).map_err(err)?;
    let fp = ds.fingerprint();
    let (train, val) = dataset::split_train_val(&ds, 0.1).map_err(err)?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut cfg = micro_config(&ds, CellType::Lstm, 8);
    cfg.checkpoint_every = 4;
    let mut full = Trainer::<f32>::new(cfg, fp).map_err(err)?;
    let reference = full
        .fit(&train, &val, LearningCurve::default(), Some(tmp.path()))
        .map_err(err)?;
    let ck = Checkpoint::<f32>::load(&tmp.path().join("epoch_0004.mmck"), cfg.adam).map_err(err)?;
    let mut resumed = Trainer::from_checkpoint(ck, cfg, fp).map_err(err)?;
    let mut head = reference.curve.clone();
    head.truncate_to_epoch(4);
    let rest = resumed.fit(&train, &val, head, None).map_err(err)?;
    for (a, b) in rest.curve.rows.iter().zip(&reference.curve.rows).skip(4) {
        ensure!(
            a.train_loss.to_bits() == b.train_loss.to_bits()
                && a.val_loss.to_bits() == b.val_loss.to_bits(),
            "epoch {}: {a:?} vs {b:?}",
            a.epoch
        );
    }
    ensure!(
        rest.curve.len() == 8,
        "resumed curve has {} rows",
        rest.curve.len()
    );
    ensure!(resumed.params == full.params, "final parameters differ");
    Ok("epochs 5-8 after resuming at 4 match the uninterrupted run bitwise".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("span count oracle", span_oracle),
        ("gradient check", gradients),
        ("convergence and memorization", memorization),
        ("metric oracles", metric_oracles),
        ("transposition invariance", transposition),
        ("dataset properties", dataset_properties),
        ("MIDI roundtrip", midi_roundtrip),
        ("representative selection", representative_selection),
        ("end-to-end pipeline", end_to_end),
        ("checkpoint exactness", checkpoint_exactness),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
