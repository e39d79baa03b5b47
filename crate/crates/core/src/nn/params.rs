use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CellType, ModelConfig, NnError, Scalar};

/// Weights of one recurrent layer. Gate blocks are stacked along the columns:
/// `[input | forget | candidate | output]` for LSTM, `[update | reset |
/// candidate]` for GRU.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// input × gates·hidden
    pub w: Array2<T>,
    /// hidden × gates·hidden
    pub u: Array2<T>,
    pub b: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// vocab × embedding
    pub embedding: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    /// hidden × vocab
    pub dense_w: Array2<T>,
    pub dense_b: Array1<T>,
}

/// Gradients share the parameter layout.
pub type StepGrads<T> = ModelParams<T>;

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let g = config.cell.gates() * config.hidden;
        Self {
            config: *config,
            embedding: Array2::zeros((config.vocab, config.embedding)),
            layers: (0..config.layers)
                .map(|l| LayerParams {
                    w: Array2::zeros((config.layer_input(l), g)),
                    u: Array2::zeros((config.hidden, g)),
                    b: Array1::zeros(g),
                })
                .collect(),
            dense_w: Array2::zeros((config.hidden, config.vocab)),
            dense_b: Array1::zeros(config.vocab),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// `(name, shape, values)` for every block, in a fixed order.
    pub fn blocks(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = vec![(
            "embedding".to_string(),
            self.embedding.shape().to_vec(),
            self.embedding.as_slice().expect("standard layout"),
        )];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{i}.w"),
                l.w.shape().to_vec(),
                l.w.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.u"),
                l.u.shape().to_vec(),
                l.u.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("layer{i}.b"),
                l.b.shape().to_vec(),
                l.b.as_slice().expect("standard layout"),
            ));
        }
        out.push((
            "dense.w".to_string(),
            self.dense_w.shape().to_vec(),
            self.dense_w.as_slice().expect("standard layout"),
        ));
        out.push((
            "dense.b".to_string(),
            self.dense_b.shape().to_vec(),
            self.dense_b.as_slice().expect("standard layout"),
        ));
        out
    }

    /// Mutable views in the same order as [`ModelParams::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for l in &mut self.layers {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.u.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.dense_w.as_slice_mut().expect("standard layout"));
        out.push(self.dense_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> T {
        self.blocks()
            .iter()
            .flat_map(|(_, _, v)| v.iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        for (dst, (_, _, src)) in out.blocks_mut().into_iter().zip(self.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from(*s).expect("finite value");
            }
        }
        out
    }
}

/// Uniform(−s, s) weights with s = 1/sqrt(fan_in), zero biases, LSTM forget
/// bias 1. The embedding table uses s = 1/sqrt(embedding).
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>, NnError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = ModelParams::<T>::zeros(config);
    let mut fill = |a: &mut [T], fan_in: usize| {
        let s = 1.0 / (fan_in as f64).sqrt();
        for v in a {
            *v = T::lit(rng.random_range(-s..s));
        }
    };
    fill(p.embedding.as_slice_mut().unwrap(), config.embedding);
    for (l, layer) in p.layers.iter_mut().enumerate() {
        fill(layer.w.as_slice_mut().unwrap(), config.layer_input(l));
        fill(layer.u.as_slice_mut().unwrap(), config.hidden);
        if config.cell == CellType::Lstm {
            let h = config.hidden;
            layer.b.slice_mut(ndarray::s![h..2 * h]).fill(T::one());
        }
    }
    fill(p.dense_w.as_slice_mut().unwrap(), config.hidden);
    Ok(p)
}

/// Recurrent state of one layer, one row per batch lane.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub h: Array2<T>,
    /// Cell memory, LSTM only.
    pub c: Option<Array2<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> ModelState<T> {
    pub fn zeros(config: &ModelConfig, lanes: usize) -> Self {
        Self {
            layers: (0..config.layers)
                .map(|_| LayerState {
                    h: Array2::zeros((lanes, config.hidden)),
                    c: (config.cell == CellType::Lstm)
                        .then(|| Array2::zeros((lanes, config.hidden))),
                })
                .collect(),
        }
    }

    pub fn lanes(&self) -> usize {
        self.layers.first().map_or(0, |l| l.h.nrows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(cell: CellType) -> ModelConfig {
        ModelConfig {
            cell,
            hidden: 16,
            layers: 2,
            embedding: 8,
            vocab: 12,
            seed: 42,
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_params::<f32>(&cfg(CellType::Lstm)).unwrap();
        let b = init_params::<f32>(&cfg(CellType::Lstm)).unwrap();
        assert_eq!(a, b);
        let mut other = cfg(CellType::Lstm);
        other.seed = 43;
        assert_ne!(a, init_params::<f32>(&other).unwrap());
    }

    #[test]
    fn lstm_forget_bias_is_one() {
        let p = init_params::<f64>(&cfg(CellType::Lstm)).unwrap();
        for layer in &p.layers {
            assert!(layer.b.slice(ndarray::s![16..32]).iter().all(|&v| v == 1.0));
            assert!(layer.b.slice(ndarray::s![..16]).iter().all(|&v| v == 0.0));
            assert!(layer.b.slice(ndarray::s![32..]).iter().all(|&v| v == 0.0));
        }
        let g = init_params::<f64>(&cfg(CellType::Gru)).unwrap();
        assert!(g.layers.iter().all(|l| l.b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn uniform_moments() {
        // 100 × 100 dense block, s = 0.1: mean 0, variance s²/3
        let config = ModelConfig {
            cell: CellType::Gru,
            hidden: 100,
            layers: 1,
            embedding: 4,
            vocab: 100,
            seed: 7,
        };
        let p = init_params::<f64>(&config).unwrap();
        let vals = p.dense_w.as_slice().unwrap();
        assert_eq!(vals.len(), 10_000);
        let s = 0.1;
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 0.05 * s, "mean {mean}");
        assert!((var / (s * s / 3.0) - 1.0).abs() < 0.05, "var {var}");
        assert!(vals.iter().all(|v| v.abs() < s));
    }

    #[test]
    fn block_layout_matches_parameter_count() {
        for cell in [CellType::Lstm, CellType::Gru] {
            let c = cfg(cell);
            let p = init_params::<f32>(&c).unwrap();
            let total: usize = p.blocks().iter().map(|(_, _, v)| v.len()).sum();
            assert_eq!(total, c.parameter_count());
            let names: Vec<String> = p.blocks().into_iter().map(|(n, _, _)| n).collect();
            assert_eq!(names.first().unwrap(), "embedding");
            assert_eq!(names.last().unwrap(), "dense.b");
            assert_eq!(names.len(), 3 + 3 * 2);
        }
    }

    #[test]
    fn zero_config_rejected() {
        let mut c = cfg(CellType::Gru);
        c.hidden = 0;
        assert!(init_params::<f32>(&c).is_err());
    }
}
