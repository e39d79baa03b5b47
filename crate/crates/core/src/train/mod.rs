//! Batching, the epoch loop, validation, checkpoints and learning curves.

mod batches;
mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, EncodedDataset, Variant};
use crate::nn::{
    backward_sequence, forward_loss, forward_sequence, init_params, Adam, AdamConfig, ModelConfig,
    ModelParams, ModelState, NnError, Scalar,
};

pub use batches::{make_batches, validation_batches, Batches};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const CURVE_HEADER: &str = "epoch,train_loss,val_loss";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset too small: need at least {needed} tokens, have {available}")]
    TooSmall { needed: usize, available: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary size mismatch: checkpoint has {checkpoint}, expected {expected}")]
    VocabMismatch { checkpoint: usize, expected: usize },
    #[error("model config mismatch: checkpoint has {checkpoint:?}, expected {expected:?}")]
    ConfigMismatch {
        checkpoint: ModelConfig,
        expected: ModelConfig,
    },
    #[error(
        "dataset fingerprint mismatch: checkpoint has {checkpoint:016x}, expected {expected:016x}"
    )]
    FingerprintMismatch { checkpoint: u64, expected: u64 },
    #[error("non-finite loss in epoch {epoch}; last good checkpoint: {}", last_good.as_ref().map_or("none".into(), |p| p.display().to_string()))]
    NonFinite {
        epoch: usize,
        last_good: Option<PathBuf>,
    },
    #[error("bad learning curve: {0}")]
    Curve(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Write `epoch_NNNN.mmck` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Carry recurrent state from one window to the next within an epoch.
    pub carry_state: bool,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            batch_size: 64,
            seq_len: 100,
            epochs: 200,
            adam: AdamConfig::default(),
            checkpoint_every: 10,
            carry_state: true,
            model,
        }
    }

    /// The augmented set is twelve times larger and gets fewer passes.
    pub fn default_epochs(variant: Variant) -> usize {
        match variant {
            Variant::Db12 => 90,
            Variant::Control | Variant::Interval => 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Losses in nats, one row per completed epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub rows: Vec<EpochRow>,
}

impl LearningCurve {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row with the lowest validation loss, earliest on ties.
    pub fn best(&self) -> Option<&EpochRow> {
        self.rows
            .iter()
            .reduce(|a, b| if b.val_loss < a.val_loss { b } else { a })
    }

    pub fn truncate_to_epoch(&mut self, epoch: usize) {
        self.rows.retain(|r| r.epoch <= epoch);
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CURVE_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.6},{:.6}", r.epoch, r.train_loss, r.val_loss);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CURVE_HEADER) {
            return Err(TrainError::Curve(format!(
                "missing header {CURVE_HEADER:?}"
            )));
        }
        let mut rows: Vec<EpochRow> = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || TrainError::Curve(format!("line {}: {line:?}", i + 2));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [epoch, train, val] = fields[..] else {
                return Err(bad());
            };
            let row = EpochRow {
                epoch: epoch.parse().map_err(|_| bad())?,
                train_loss: train.parse().map_err(|_| bad())?,
                val_loss: val.parse().map_err(|_| bad())?,
            };
            if rows.last().is_some_and(|last| last.epoch >= row.epoch) {
                return Err(TrainError::Curve(format!(
                    "epochs not increasing at line {}",
                    i + 2
                )));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        Self::from_csv(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Mean cross-entropy over every window of `batches`, starting from a zero
/// state that carries across windows.
pub fn validate<T: Scalar>(params: &ModelParams<T>, batches: &Batches) -> Result<f64, TrainError> {
    let mut state = ModelState::zeros(&params.config, batches.lanes());
    let mut total = 0.0;
    for (x, y) in batches.iter() {
        let (loss, next) = forward_loss(params, &state, x, y)?;
        total += loss;
        state = next;
    }
    Ok(total / batches.steps().max(1) as f64)
}

/// Owns the parameters and optimizer moments of one run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub adam: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub fingerprint: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, fingerprint: u64) -> Result<Self, TrainError> {
        let params = init_params(&config.model)?;
        Ok(Self {
            adam: Adam::new(config.adam, &params),
            config,
            params,
            epoch: 0,
            fingerprint,
        })
    }

    pub fn from_checkpoint(
        ck: Checkpoint<T>,
        config: TrainConfig,
        fingerprint: u64,
    ) -> Result<Self, TrainError> {
        ck.verify(&config.model, fingerprint)?;
        let mut adam = ck.adam;
        adam.config = config.adam;
        Ok(Self {
            config,
            params: ck.params,
            adam,
            epoch: ck.epoch as usize,
            fingerprint,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.model,
            fingerprint: self.fingerprint,
            epoch: self.epoch as u32,
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng_state: self.config.model.seed,
        }
    }

    /// One pass over every training window. Returns the mean window loss.
    pub fn run_epoch(&mut self, batches: &Batches) -> Result<f64, TrainError> {
        let epoch = self.epoch + 1;
        let mut state = ModelState::zeros(&self.config.model, batches.lanes());
        let mut total = 0.0;
        for (x, y) in batches.iter() {
            let out = forward_sequence(&self.params, &state, x, y)?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    last_good: None,
                });
            }
            total += out.loss;
            let grads = backward_sequence(&self.params, &out.cache);
            match self.adam.step(&mut self.params, &grads) {
                Ok(_) => {}
                Err(NnError::NonFiniteGradient { .. }) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        last_good: None,
                    })
                }
                Err(e) => return Err(e.into()),
            }
            if self.config.carry_state {
                state = out.state;
            }
        }
        self.epoch = epoch;
        Ok(total / batches.steps().max(1) as f64)
    }

    /// Trains until `config.epochs` epochs are complete, appending to
    /// `curve`. With `out_dir`, writes `epoch_NNNN.mmck` (always for epoch
    /// 0 and then per `checkpoint_every`), `best.mmck`, `last.mmck` and
    /// `curve.csv`.
    pub fn fit(
        &mut self,
        train: &EncodedDataset,
        val: &EncodedDataset,
        mut curve: LearningCurve,
        out_dir: Option<&Path>,
    ) -> Result<TrainOutcome, TrainError> {
        let cfg = self.config;
        cfg.model.validate()?;
        for ds in [train, val] {
            if ds.vocab.len() != cfg.model.vocab {
                return Err(TrainError::VocabMismatch {
                    checkpoint: cfg.model.vocab,
                    expected: ds.vocab.len(),
                });
            }
        }
        let train_batches = make_batches(&train.x, &train.y, cfg.batch_size, cfg.seq_len)?;
        let val_batches = validation_batches(&val.x, &val.y, cfg.batch_size, cfg.seq_len)?;
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        curve.truncate_to_epoch(self.epoch);
        let mut best = curve.best().copied();
        let mut written = Vec::new();
        let mut last_good = None;
        let save = |trainer: &Self,
                    name: String,
                    written: &mut Vec<PathBuf>|
         -> Result<Option<PathBuf>, TrainError> {
            let Some(dir) = out_dir else { return Ok(None) };
            let path = dir.join(name);
            trainer.checkpoint().save(&path)?;
            if !written.contains(&path) {
                written.push(path.clone());
            }
            Ok(Some(path))
        };

        if self.epoch == 0 {
            last_good = save(self, "epoch_0000.mmck".into(), &mut written)?;
        }
        while self.epoch < cfg.epochs {
            let train_loss = match self.run_epoch(&train_batches) {
                Err(TrainError::NonFinite { epoch, .. }) => {
                    return Err(TrainError::NonFinite { epoch, last_good })
                }
                other => other?,
            };
            let val_loss = validate(&self.params, &val_batches)?;
            if !val_loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: self.epoch,
                    last_good,
                });
            }
            let row = EpochRow {
                epoch: self.epoch,
                train_loss,
                val_loss,
            };
            log::info!(
                "epoch {:>4}  train {:.6}  val {:.6}",
                row.epoch,
                row.train_loss,
                row.val_loss
            );
            curve.rows.push(row);
            if cfg.checkpoint_every > 0 && self.epoch.is_multiple_of(cfg.checkpoint_every) {
                last_good = save(self, format!("epoch_{:04}.mmck", self.epoch), &mut written)?;
            }
            if best.is_none_or(|b| val_loss < b.val_loss) {
                best = Some(row);
                last_good = save(self, "best.mmck".into(), &mut written)?.or(last_good);
            }
            if let Some(dir) = out_dir {
                curve.write(&dir.join("curve.csv"))?;
            }
        }
        save(self, "last.mmck".into(), &mut written)?;
        if let Some(dir) = out_dir {
            curve.write(&dir.join("curve.csv"))?;
        }
        Ok(TrainOutcome {
            curve,
            best,
            checkpoints: written,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub curve: LearningCurve,
    /// Epoch with the lowest validation loss.
    pub best: Option<EpochRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Fresh run from initialization.
pub fn train<T: Scalar>(
    config: TrainConfig,
    train: &EncodedDataset,
    val: &EncodedDataset,
    fingerprint: u64,
    out_dir: Option<&Path>,
) -> Result<(TrainOutcome, Trainer<T>), TrainError> {
    let mut trainer = Trainer::<T>::new(config, fingerprint)?;
    let outcome = trainer.fit(train, val, LearningCurve::default(), out_dir)?;
    Ok((outcome, trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_control, Corpus};
    use crate::midi::Melody;
    use crate::nn::CellType;

    fn toy() -> EncodedDataset {
        let mut corpus = Corpus::default();
        let pairs: Vec<(u8, u16)> = (0..24)
            .map(|i| (60 + (i * 7 % 12) as u8, 1 + (i % 4) as u16 * 2))
            .collect();
        for s in 0..6 {
            corpus.push(format!("s{s}"), Melody::from_pairs(&pairs));
        }
        build_control(&corpus).unwrap()
    }

    fn config(vocab: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            seq_len: 8,
            epochs: 6,
            checkpoint_every: 2,
            ..TrainConfig::new(ModelConfig {
                cell: CellType::Gru,
                hidden: 12,
                layers: 1,
                embedding: 6,
                vocab,
                seed: 5,
            })
        }
    }

    #[test]
    fn curve_csv_roundtrip() {
        let curve = LearningCurve {
            rows: vec![
                EpochRow {
                    epoch: 1,
                    train_loss: 2.5,
                    val_loss: 2.75,
                },
                EpochRow {
                    epoch: 2,
                    train_loss: 1.0000004,
                    val_loss: 1.5,
                },
            ],
        };
        let csv = curve.to_csv();
        assert_eq!(
            csv,
            "epoch,train_loss,val_loss\n1,2.500000,2.750000\n2,1.000000,1.500000\n"
        );
        assert_eq!(
            LearningCurve::from_csv(&csv).unwrap().rows[1].train_loss,
            1.0
        );
        assert!(LearningCurve::from_csv("epoch,train_loss,val_loss\n2,1,1\n1,1,1\n").is_err());
    }

    #[test]
    fn uniform_model_validates_to_log_vocab() {
        let ds = toy();
        let cfg = config(ds.vocab.len());
        let params = ModelParams::<f64>::zeros(&cfg.model);
        let b = make_batches(&ds.x, &ds.y, 4, 8).unwrap();
        let loss = validate(&params, &b).unwrap();
        assert!((loss - (ds.vocab.len() as f64).ln()).abs() < 1e-12);
        assert_eq!(validate(&params, &b).unwrap(), loss);
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_only() {
        let ds = toy();
        let mut cfg = config(ds.vocab.len());
        cfg.epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        let (out, _) = train::<f32>(cfg, &ds, &ds, 1, Some(dir.path())).unwrap();
        assert!(out.curve.is_empty());
        assert!(dir.path().join("epoch_0000.mmck").exists());
        assert_eq!(
            fs::read_to_string(dir.path().join("curve.csv")).unwrap(),
            "epoch,train_loss,val_loss\n"
        );
    }

    #[test]
    fn deterministic_and_loss_decreases() {
        let ds = toy();
        let cfg = config(ds.vocab.len());
        let (a, _) = train::<f32>(cfg, &ds, &ds, 1, None).unwrap();
        let (b, _) = train::<f32>(cfg, &ds, &ds, 1, None).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 6);
        assert!(a.curve.rows[5].train_loss < a.curve.rows[0].train_loss);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let ds = toy();
        let cfg = config(ds.vocab.len());
        let dir = tempfile::tempdir().unwrap();
        let (full, _) = train::<f32>(cfg, &ds, &ds, 9, Some(dir.path())).unwrap();
        let ck = Checkpoint::<f32>::load(&dir.path().join("epoch_0002.mmck"), cfg.adam).unwrap();
        assert_eq!(ck.epoch, 2);
        let mut resumed = Trainer::from_checkpoint(ck, cfg, 9).unwrap();
        let mut curve = full.curve.clone();
        curve.truncate_to_epoch(2);
        let rest = resumed.fit(&ds, &ds, curve, None).unwrap();
        for (a, b) in rest.curve.rows.iter().zip(&full.curve.rows) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
        assert_eq!(rest.curve.len(), full.curve.len());
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let ds = toy();
        let cfg = config(ds.vocab.len() + 1);
        assert!(matches!(
            train::<f32>(cfg, &ds, &ds, 0, None),
            Err(TrainError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn exploding_learning_rate_aborts() {
        let ds = toy();
        let mut cfg = config(ds.vocab.len());
        cfg.adam.lr = f64::INFINITY;
        cfg.adam.clip_norm = None;
        cfg.epochs = 50;
        let dir = tempfile::tempdir().unwrap();
        match train::<f32>(cfg, &ds, &ds, 0, Some(dir.path())) {
            Err(TrainError::NonFinite { last_good, .. }) => assert!(last_good.unwrap().exists()),
            other => panic!("expected abort, got {other:?}"),
        }
    }
}
