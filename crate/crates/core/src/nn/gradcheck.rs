use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{backward_sequence, forward_loss, forward_sequence};
use super::params::{init_params, ModelParams, ModelState};
use super::{CellType, ModelConfig, NnError};

/// Central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Central differences at
/// `GRAD_CHECK_STEP` carry about 5e-11 of roundoff in f64, so entries where
/// both gradients are below this are effectively held to an absolute
/// tolerance of `tolerance * RELATIVE_FLOOR`.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockError {
    pub block: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub cell: CellType,
    pub layers: usize,
    pub blocks: Vec<BlockError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` against central differences of the loss at `params`
/// for every parameter.
pub fn compare_gradients(
    params: &ModelParams<f64>,
    state: &ModelState<f64>,
    x: &Array2<usize>,
    y: &Array2<usize>,
    analytic: &ModelParams<f64>,
    tolerance: f64,
) -> Result<GradCheckReport, NnError> {
    let h = GRAD_CHECK_STEP;
    let mut probe = params.clone();
    let names: Vec<String> = params.blocks().into_iter().map(|(n, _, _)| n).collect();
    let analytic_blocks = analytic.blocks();
    let mut blocks = Vec::with_capacity(names.len());
    for (b, name) in names.into_iter().enumerate() {
        let len = analytic_blocks[b].2.len();
        let mut worst = BlockError {
            block: name,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..len {
            let original = probe.blocks_mut()[b][i];
            probe.blocks_mut()[b][i] = original + h;
            let (plus, _) = forward_loss(&probe, state, x.view(), y.view())?;
            probe.blocks_mut()[b][i] = original - h;
            let (minus, _) = forward_loss(&probe, state, x.view(), y.view())?;
            probe.blocks_mut()[b][i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic_blocks[b].2[i];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || err.is_nan() {
                worst.max_rel_error = err;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        blocks.push(worst);
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        cell: params.config.cell,
        layers: params.config.layers,
        passed: max_rel_error < tolerance && blocks.iter().all(|b| !b.max_rel_error.is_nan()),
        blocks,
        max_rel_error,
        tolerance,
    })
}

type Problem = (
    ModelParams<f64>,
    ModelState<f64>,
    Array2<usize>,
    Array2<usize>,
);

/// Random model, random nonzero entry state and random tokens for a
/// gradient check: returns `(params, state, x, y)`.
pub(crate) fn random_problem(
    config: &ModelConfig,
    lanes: usize,
    steps: usize,
) -> Result<Problem, NnError> {
    let mut params = init_params::<f64>(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    // nonzero biases so every gate path carries gradient
    for layer in &mut params.layers {
        layer.b.mapv_inplace(|b| b + rng.random_range(-0.5..0.5));
    }
    params.dense_b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let mut state = ModelState::zeros(config, lanes);
    for l in &mut state.layers {
        l.h.mapv_inplace(|_| rng.random_range(-0.8..0.8));
        if let Some(c) = l.c.as_mut() {
            c.mapv_inplace(|_| rng.random_range(-1.5..1.5));
        }
    }
    let x = Array2::from_shape_fn((lanes, steps), |_| rng.random_range(0..config.vocab));
    let y = Array2::from_shape_fn((lanes, steps), |_| rng.random_range(0..config.vocab));
    Ok((params, state, x, y))
}

/// Checks backpropagation against central differences in `f64` on a random
/// two-lane, five-step problem.
pub fn grad_check(config: &ModelConfig, tolerance: f64) -> Result<GradCheckReport, NnError> {
    config.validate()?;
    if config.parameter_count() >= 100_000 {
        return Err(NnError::Config(format!(
            "{} parameters is too many for a finite-difference check",
            config.parameter_count()
        )));
    }
    let (params, state, x, y) = random_problem(config, 2, 5)?;
    let out = forward_sequence(&params, &state, x.view(), y.view())?;
    let analytic = backward_sequence(&params, &out.cache);
    compare_gradients(&params, &state, &x, &y, &analytic, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(cell: CellType, layers: usize) -> ModelConfig {
        ModelConfig {
            cell,
            hidden: 16,
            layers,
            embedding: 8,
            vocab: 12,
            seed: 11,
        }
    }

    #[test]
    fn lstm_and_gru_pass() {
        for cell in [CellType::Lstm, CellType::Gru] {
            for layers in [1, 2] {
                let report = grad_check(&cfg(cell, layers), 1e-5).unwrap();
                assert!(report.passed, "{report:#?}");
            }
        }
    }

    #[test]
    fn sabotaged_gradient_fails() {
        let config = cfg(CellType::Gru, 1);
        let (params, state, x, y) = random_problem(&config, 2, 5).unwrap();
        let out = forward_sequence(&params, &state, x.view(), y.view()).unwrap();
        let mut g = backward_sequence(&params, &out.cache);
        let (r, c) = g.layers[0]
            .u
            .indexed_iter()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(ix, _)| ix)
            .unwrap();
        g.layers[0].u[[r, c]] = 0.0;
        let report = compare_gradients(&params, &state, &x, &y, &g, 1e-5).unwrap();
        assert!(!report.passed);
        let worst = report
            .blocks
            .iter()
            .find(|b| b.block == "layer0.u")
            .unwrap();
        assert!(worst.max_rel_error > 1e-5);
        assert_eq!(worst.worst_index, r * g.layers[0].u.ncols() + c);
    }

    #[test]
    fn oversized_config_rejected() {
        let mut c = cfg(CellType::Lstm, 1);
        c.hidden = 512;
        assert!(matches!(grad_check(&c, 1e-5), Err(NnError::Config(_))));
    }
}
