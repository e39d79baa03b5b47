//! Embedding → stacked LSTM/GRU → dense → softmax cross-entropy, with exact
//! truncated backpropagation through time and an Adam optimizer.
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! checking in `f64`.

mod adam;
mod cell;
mod gradcheck;
mod model;
mod params;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::str::FromStr;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, AdamConfig, StepInfo};
pub use cell::{gru_step, lstm_step};
pub use gradcheck::{
    compare_gradients, grad_check, BlockError, GradCheckReport, GRAD_CHECK_STEP, RELATIVE_FLOOR,
};
pub use model::{
    backward_sequence, forward_loss, forward_sequence, predict_step, ForwardCache, ForwardOutput,
};
pub use params::{init_params, LayerParams, LayerState, ModelParams, ModelState, StepGrads};

/// Floating-point element type of the model.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + LinalgScalar
        + ScalarOperand
        + AddAssign
        + SubAssign
        + MulAssign
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("token index {index} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { index: usize, vocab: usize },
    #[error("non-finite gradient in block {block}")]
    NonFiniteGradient { block: String },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Lstm,
    Gru,
}

impl CellType {
    /// Number of stacked gate blocks in the weight matrices.
    pub fn gates(self) -> usize {
        match self {
            CellType::Lstm => 4,
            CellType::Gru => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Lstm => "lstm",
            CellType::Gru => "gru",
        }
    }
}

impl Display for CellType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellType::Lstm),
            "gru" => Ok(CellType::Gru),
            _ => Err(format!("unknown cell type {s:?} (expected lstm or gru)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellType,
    /// Hidden units per recurrent layer.
    pub hidden: usize,
    pub layers: usize,
    pub embedding: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(cell: CellType, hidden: usize, vocab: usize) -> Self {
        Self {
            cell,
            hidden,
            layers: 1,
            embedding: 64,
            vocab,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("embedding", self.embedding),
            ("vocab", self.vocab),
        ] {
            if v == 0 {
                return Err(NnError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Input width of recurrent layer `layer`.
    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embedding
        } else {
            self.hidden
        }
    }

    pub fn parameter_count(&self) -> usize {
        let g = self.cell.gates() * self.hidden;
        let recurrent: usize = (0..self.layers)
            .map(|l| self.layer_input(l) * g + self.hidden * g + g)
            .sum();
        self.vocab * self.embedding + recurrent + self.hidden * self.vocab + self.vocab
    }
}
