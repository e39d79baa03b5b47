use ndarray::{s, Array2, ArrayView2};

use super::TrainError;

/// A token stream cut into `lanes` contiguous rows of equal length, consumed
/// `seq_len` columns at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct Batches {
    x: Array2<usize>,
    y: Array2<usize>,
    seq_len: usize,
}

impl Batches {
    pub fn lanes(&self) -> usize {
        self.x.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn steps(&self) -> usize {
        self.x.ncols() / self.seq_len
    }

    /// Inputs and targets of step `step`, each lanes × seq_len.
    pub fn block(&self, step: usize) -> (ArrayView2<'_, usize>, ArrayView2<'_, usize>) {
        let cols = s![.., step * self.seq_len..(step + 1) * self.seq_len];
        (self.x.slice(cols), self.y.slice(cols))
    }

    pub fn iter(
        &self,
    ) -> impl Iterator<Item = (ArrayView2<'_, usize>, ArrayView2<'_, usize>)> + '_ {
        (0..self.steps()).map(|s| self.block(s))
    }

    /// Offsets into the source stream of every consumed token, lane by lane.
    pub fn consumed_offsets(&self, source_len: usize) -> Vec<usize> {
        let lane_len = source_len / self.lanes();
        let used = self.steps() * self.seq_len;
        (0..self.lanes())
            .flat_map(|b| (b * lane_len)..(b * lane_len + used))
            .collect()
    }
}

/// Splits `x`/`y` into `batch_size` lanes of `|x| / batch_size` tokens; each
/// lane is truncated to a whole number of `seq_len` windows.
pub fn make_batches(
    x: &[u32],
    y: &[u32],
    batch_size: usize,
    seq_len: usize,
) -> Result<Batches, TrainError> {
    if batch_size == 0 || seq_len == 0 {
        return Err(TrainError::Config(
            "batch size and sequence length must be positive".into(),
        ));
    }
    if x.len() != y.len() {
        return Err(TrainError::Config(format!(
            "input and target streams differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let needed = batch_size * seq_len;
    if x.len() < needed {
        return Err(TrainError::TooSmall {
            needed,
            available: x.len(),
        });
    }
    let lane_len = x.len() / batch_size;
    let used = lane_len / seq_len * seq_len;
    let lanes = |src: &[u32]| {
        Array2::from_shape_fn((batch_size, used), |(b, t)| src[b * lane_len + t] as usize)
    };
    Ok(Batches {
        x: lanes(x),
        y: lanes(y),
        seq_len,
    })
}

/// Batches for scoring a held-out stream. Uses the training geometry when
/// the stream is large enough, otherwise fewer lanes and, failing that, a
/// single shorter window.
pub fn validation_batches(
    x: &[u32],
    y: &[u32],
    batch_size: usize,
    seq_len: usize,
) -> Result<Batches, TrainError> {
    if x.is_empty() {
        return Err(TrainError::Config("validation split is empty".into()));
    }
    let lanes = batch_size.min(x.len() / seq_len);
    if lanes == 0 {
        make_batches(x, y, 1, x.len())
    } else {
        make_batches(x, y, lanes, seq_len)
    }
}
