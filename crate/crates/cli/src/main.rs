use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use melgen::dataset::{self, Corpus, EncodedDataset, Variant};
use melgen::generate::{
    compare_models, generate_corpus, Comparison, GenerationReport, SamplerConfig,
};
use melgen::metrics::{corpus_report, MetricReport, MetricStats, SpanConfig, Summary};
use melgen::midi::{extract_melody, write_midi, Melody};
use melgen::nn::{grad_check, AdamConfig, CellType, ModelConfig};
use melgen::train::{Checkpoint, LearningCurve, TrainConfig, Trainer};

/// Corpus statistics reported for the original folk-tune collection.
const REFERENCE_LABEL: &str = "reference corpus (published)";
const REFERENCE_STATS: [(f64, f64); 3] = [(2.23, 0.98), (2.05, 1.18), (0.27, 0.14)];

fn reference_stats() -> MetricStats {
    let s = |(mean, std): (f64, f64)| Summary {
        mean,
        std,
        count: 0,
    };
    MetricStats {
        cmm: s(REFERENCE_STATS[0]),
        lm: s(REFERENCE_STATS[1]),
        centr: s(REFERENCE_STATS[2]),
    }
}

#[derive(Parser)]
#[command(
    name = "melgen",
    version,
    about = "Train recurrent melody models and score what they generate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the control, interval and db12 datasets from a MIDI directory
    Prepare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric statistics of a MIDI corpus after cleaning
    Baseline {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        span: SpanArgs,
        /// Also write the full report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train one model
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Continue from a checkpoint written by an earlier run into --out
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a grid of cell types and unit counts
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "lstm,gru")]
        cells: Vec<CellType>,
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024,2048")]
        units: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        embedding: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate songs from a checkpoint and score them
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset the checkpoint was trained on (supplies the vocabulary)
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        songs: usize,
        #[arg(long, default_value_t = 30)]
        notes: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        rng_seed: u64,
        /// Seed melody as pitch:duration pairs
        #[arg(long, default_value = "62:8,64:4,65:4", value_parser = parse_melody)]
        seed: Melody,
        /// Row name in comparison tables
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        span: SpanArgs,
    },
    /// Score MIDI files or directories of them
    Evaluate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[command(flatten)]
        span: SpanArgs,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Tabulate report.json files written by `sample`
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check backpropagation against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 12)]
        vocab: usize,
        #[arg(long, default_value_t = 8)]
        embedding: usize,
        #[arg(long, default_value_t = 16)]
        hidden: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

#[derive(Args, Clone, Copy)]
struct SpanArgs {
    /// Span width in sixteenths
    #[arg(long = "span", default_value_t = 32)]
    n: usize,
    /// Span step in sixteenths
    #[arg(long = "step", default_value_t = 4)]
    m: usize,
}

impl SpanArgs {
    fn config(self) -> Result<SpanConfig> {
        Ok(SpanConfig::new(self.n, self.m)?)
    }
}

#[derive(Args, Clone, Copy)]
struct ModelArgs {
    #[arg(long, default_value = "lstm")]
    cell: CellType,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    embedding: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Copy)]
struct TrainArgs {
    /// Defaults to 200, or 90 for db12
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    seq_len: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Global gradient-norm ceiling; 0 disables clipping
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Reset the recurrent state before every window
    #[arg(long)]
    no_carry_state: bool,
}

impl TrainArgs {
    fn config(&self, model: ModelConfig, variant: Variant) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            epochs: self
                .epochs
                .unwrap_or_else(|| TrainConfig::default_epochs(variant)),
            adam: AdamConfig {
                lr: self.lr,
                clip_norm: (self.clip > 0.0).then_some(self.clip),
                ..AdamConfig::default()
            },
            checkpoint_every: self.checkpoint_every,
            carry_state: !self.no_carry_state,
            model,
        }
    }
}

/// Written next to the checkpoints so a run can be resumed or sampled.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    dataset: PathBuf,
    fingerprint: u64,
    val_fraction: f64,
    train: TrainConfig,
}

#[derive(Serialize)]
struct Manifest<'a> {
    checkpoint: &'a Path,
    songs: Vec<ManifestSong>,
    representative: usize,
    report: &'a GenerationReport,
}

#[derive(Serialize)]
struct ManifestSong {
    file: String,
    notes: usize,
    cmm: f64,
    lm: f64,
    centr: f64,
}

fn parse_melody(s: &str) -> Result<Melody, String> {
    let pairs = s
        .split(',')
        .map(|pair| {
            let (p, d) = pair
                .trim()
                .split_once(':')
                .ok_or(format!("expected pitch:duration, got {pair:?}"))?;
            let p: u8 = p.parse().map_err(|_| format!("bad pitch {p:?}"))?;
            let d: u16 = d.parse().map_err(|_| format!("bad duration {d:?}"))?;
            if p > 127 || d == 0 {
                return Err(format!("note {pair:?} out of range"));
            }
            Ok((p, d))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Melody::from_pairs(&pairs))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<(EncodedDataset, u64)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ds = EncodedDataset::from_bytes(&bytes)
        .with_context(|| format!("loading {}", path.display()))?;
    Ok((ds, dataset::fingerprint(&bytes)))
}

fn print_report(report: &MetricReport) {
    let s = &report.stats;
    println!("{:<28} {:>10} {:>10} {:>10}", "", "CMM", "LM", "CENTR");
    let row = |name: &str, s: &MetricStats| {
        println!(
            "{:<28} {:>10} {:>10} {:>10}",
            name,
            format!("{:.2}±{:.2}", s.cmm.mean, s.cmm.std),
            format!("{:.2}±{:.2}", s.lm.mean, s.lm.std),
            format!("{:.2}±{:.2}", s.centr.mean, s.centr.std),
        )
    };
    row(&format!("scored ({} melodies)", s.cmm.count), s);
    row(REFERENCE_LABEL, &reference_stats());
    if report.skipped > 0 {
        println!(
            "skipped {} melodies that could not be scored",
            report.skipped
        );
    }
}

fn prepare(input: &Path, out: &Path) -> Result<()> {
    let corpus = Corpus::load_dir(input)?;
    ensure!(
        !corpus.is_empty(),
        "no readable MIDI files in {}",
        input.display()
    );
    let cleaned = dataset::clean(&corpus);
    ensure!(!cleaned.is_empty(), "every melody was removed by cleaning");
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    println!(
        "{} files read, {} melodies kept",
        corpus.len(),
        cleaned.len()
    );
    for variant in Variant::ALL {
        let ds = dataset::build(variant, &cleaned)?;
        let path = out.join(format!("{}.mmtd", variant.name()));
        ds.save(&path)?;
        ds.save_json_mirror(&path.with_extension("json"))?;
        println!(
            "{:<9} {:>4} songs {:>7} tokens  vocab {:>4}  -> {}",
            variant.name(),
            ds.song_count(),
            ds.len(),
            ds.vocab.len(),
            path.display()
        );
    }
    Ok(())
}

fn baseline(input: &Path, span: SpanArgs, json: Option<&Path>) -> Result<()> {
    let corpus = dataset::clean(&Corpus::load_dir(input)?);
    ensure!(
        !corpus.is_empty(),
        "no usable melodies in {}",
        input.display()
    );
    let report = corpus_report(
        corpus
            .names
            .iter()
            .map(String::as_str)
            .zip(corpus.melodies.iter()),
        &span.config()?,
    )?;
    print_report(&report);
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn run_training(
    dataset_path: &Path,
    out: &Path,
    train_cfg: TrainConfig,
    val_fraction: f64,
    resume: Option<&Path>,
) -> Result<()> {
    let (ds, fingerprint) = load_dataset(dataset_path)?;
    let (train_ds, val_ds) = dataset::split_train_val(&ds, val_fraction)?;
    log::info!(
        "{}: {} training tokens, {} validation tokens, vocab {}",
        dataset_path.display(),
        train_ds.len(),
        val_ds.len(),
        ds.vocab.len()
    );
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (mut trainer, curve) = match resume {
        Some(ck_path) => {
            let ck = Checkpoint::<f32>::load(ck_path, train_cfg.adam)?;
            let curve_path = out.join("curve.csv");
            let curve = if curve_path.exists() {
                LearningCurve::read(&curve_path)?
            } else {
                LearningCurve::default()
            };
            log::info!("resuming from epoch {}", ck.epoch);
            (Trainer::from_checkpoint(ck, train_cfg, fingerprint)?, curve)
        }
        None => (
            Trainer::<f32>::new(train_cfg, fingerprint)?,
            LearningCurve::default(),
        ),
    };
    write_json(
        &out.join("run.json"),
        &RunInfo {
            dataset: dataset_path.to_path_buf(),
            fingerprint,
            val_fraction,
            train: train_cfg,
        },
    )?;
    let outcome = trainer.fit(&train_ds, &val_ds, curve, Some(out))?;
    if let Some(best) = outcome.best {
        println!(
            "best epoch {} (val {:.6}); {} epochs written to {}",
            best.epoch,
            best.val_loss,
            outcome.curve.len(),
            out.join("curve.csv").display()
        );
    } else {
        println!("no epochs run; initial checkpoint in {}", out.display());
    }
    Ok(())
}

fn train(
    dataset_path: &Path,
    out: &Path,
    model: ModelArgs,
    args: TrainArgs,
    resume: Option<&Path>,
) -> Result<()> {
    let (train_cfg, val_fraction) = match resume {
        Some(_) => {
            let info: RunInfo = read_json(&out.join("run.json"))
                .context("resuming needs the run.json of the original run")?;
            let mut cfg = info.train;
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            (cfg, info.val_fraction)
        }
        None => {
            let (ds, _) = load_dataset(dataset_path)?;
            let model_cfg = ModelConfig {
                cell: model.cell,
                hidden: model.hidden,
                layers: model.layers,
                embedding: model.embedding,
                vocab: ds.vocab.len(),
                seed: model.seed,
            };
            (args.config(model_cfg, ds.variant), args.val_fraction)
        }
    };
    run_training(dataset_path, out, train_cfg, val_fraction, resume)
}

fn sweep(
    dataset_path: &Path,
    out: &Path,
    cells: &[CellType],
    units: &[usize],
    base: ModelArgs,
    args: TrainArgs,
) -> Result<()> {
    ensure!(!cells.is_empty() && !units.is_empty(), "empty sweep grid");
    let (ds, _) = load_dataset(dataset_path)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for &cell in cells {
        for &hidden in units {
            let name = format!("{cell}_{hidden}");
            println!("== {name}");
            let model = ModelConfig {
                cell,
                hidden,
                layers: base.layers,
                embedding: base.embedding,
                vocab: ds.vocab.len(),
                seed: base.seed,
            };
            let run_dir = out.join(&name);
            run_training(
                dataset_path,
                &run_dir,
                args.config(model, ds.variant),
                args.val_fraction,
                None,
            )?;
            let target = out.join(format!("curve_{name}.csv"));
            fs::copy(run_dir.join("curve.csv"), &target)
                .with_context(|| format!("writing {}", target.display()))?;
        }
    }
    Ok(())
}

fn sample(
    checkpoint: &Path,
    dataset_path: &Path,
    out: &Path,
    sampler: SamplerConfig,
    label: Option<String>,
    span: SpanArgs,
) -> Result<()> {
    let (ds, fingerprint) = load_dataset(dataset_path)?;
    let ck = Checkpoint::<f32>::load(checkpoint, AdamConfig::default())?;
    if ck.fingerprint != fingerprint {
        bail!(
            "{} was trained on a different dataset than {}",
            checkpoint.display(),
            dataset_path.display()
        );
    }
    let melodies = generate_corpus(&ck.params, &ds.vocab, &sampler)?;
    let cfg = ck.config;
    let label =
        label.unwrap_or_else(|| format!("{}-{}-{}", ds.variant.name(), cfg.cell, cfg.hidden));
    let report = GenerationReport::build(
        label,
        ds.variant,
        cfg.cell,
        cfg.hidden,
        &sampler,
        &span.config()?,
        &melodies,
    )?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut songs = Vec::with_capacity(melodies.len());
    for (i, (m, t)) in melodies.iter().zip(&report.per_song).enumerate() {
        let file = format!("song_{:03}.mid", i + 1);
        fs::write(out.join(&file), write_midi(m)?).with_context(|| format!("writing {file}"))?;
        songs.push(ManifestSong {
            file,
            notes: m.len(),
            cmm: t.cmm,
            lm: t.lm,
            centr: t.centr,
        });
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            checkpoint,
            songs,
            representative: report.representative,
            report: &report,
        },
    )?;
    write_json(&out.join("report.json"), &report)?;
    let s = &report.stats;
    println!(
        "{}: {} songs  CMM {:.2}±{:.2}  LM {:.2}±{:.2}  CENTR {:.2}±{:.2}  representative song_{:03}.mid",
        report.label,
        melodies.len(),
        s.cmm.mean,
        s.cmm.std,
        s.lm.mean,
        s.lm.std,
        s.centr.mean,
        s.centr.std,
        report.representative + 1
    );
    Ok(())
}

fn midi_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|e| {
                        e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi")
                    })
                })
                .collect();
            inner.sort();
            files.extend(inner);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            bail!("no such file or directory: {}", p.display());
        }
    }
    Ok(files)
}

fn evaluate(paths: &[PathBuf], span: SpanArgs, json: Option<&Path>) -> Result<()> {
    let files = midi_files(paths)?;
    ensure!(!files.is_empty(), "no MIDI files found");
    let mut named = Vec::new();
    for f in &files {
        let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
        match extract_melody(&bytes) {
            Ok(m) => named.push((f.display().to_string(), m)),
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    let report = corpus_report(named.iter().map(|(n, m)| (n.as_str(), m)), &span.config()?)?;
    for s in &report.per_melody {
        println!(
            "{:<40} {:>8.4} {:>8.4} {:>8.4}",
            s.name, s.triple.cmm, s.triple.lm, s.triple.centr
        );
    }
    println!();
    print_report(&report);
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn compare(paths: &[PathBuf], json: Option<&Path>) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| read_json::<GenerationReport>(p))
        .collect::<Result<Vec<_>>>()?;
    let table: Comparison =
        compare_models(&reports)?.with_reference(REFERENCE_LABEL, reference_stats());
    print!("{}", table.to_text());
    println!("* best mean: CMM and LM closest to 1, CENTR highest");
    if let Some(path) = json {
        write_json(path, &table)?;
    }
    Ok(())
}

fn gradcheck(
    tolerance: f64,
    vocab: usize,
    embedding: usize,
    hidden: usize,
    layers: &[usize],
    seed: u64,
) -> Result<bool> {
    let mut ok = true;
    for cell in [CellType::Lstm, CellType::Gru] {
        for &l in layers {
            let cfg = ModelConfig {
                cell,
                hidden,
                layers: l,
                embedding,
                vocab,
                seed,
            };
            let report = grad_check(&cfg, tolerance)?;
            let worst = report
                .blocks
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .map_or("-", |b| b.block.as_str());
            println!(
                "{cell} layers={l}: max relative error {:.3e} (worst block {worst}) {}",
                report.max_rel_error,
                if report.passed { "ok" } else { "FAIL" }
            );
            ok &= report.passed;
        }
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Prepare { input, out } => prepare(&input, &out)?,
        Command::Baseline { input, span, json } => baseline(&input, span, json.as_deref())?,
        Command::Train {
            dataset,
            out,
            model,
            train: args,
            resume,
        } => train(&dataset, &out, model, args, resume.as_deref())?,
        Command::Sweep {
            dataset,
            out,
            cells,
            units,
            layers,
            embedding,
            seed,
            train: args,
        } => {
            let base = ModelArgs {
                cell: CellType::Lstm,
                hidden: 0,
                layers,
                embedding,
                seed,
            };
            sweep(&dataset, &out, &cells, &units, base, args)?
        }
        Command::Sample {
            checkpoint,
            dataset,
            out,
            songs,
            notes,
            temperature,
            rng_seed,
            seed,
            label,
            span,
        } => {
            let sampler = SamplerConfig {
                seed_melody: seed,
                notes_to_generate: notes,
                temperature,
                rng_seed,
                songs,
            };
            sample(&checkpoint, &dataset, &out, sampler, label, span)?
        }
        Command::Evaluate { paths, span, json } => evaluate(&paths, span, json.as_deref())?,
        Command::Compare { reports, json } => compare(&reports, json.as_deref())?,
        Command::Gradcheck {
            tolerance,
            vocab,
            embedding,
            hidden,
            layers,
            seed,
        } => return gradcheck(tolerance, vocab, embedding, hidden, &layers, seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
