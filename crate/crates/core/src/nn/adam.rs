use serde::{Deserialize, Serialize};

use super::params::{ModelParams, StepGrads};
use super::{NnError, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Adam with bias correction and global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to the gradients (1 when not clipped).
    pub clip_scale: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ModelParams<T>) -> Self {
        Self {
            config,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies one update. Non-finite gradients leave parameters and moments
    /// untouched.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &StepGrads<T>,
    ) -> Result<StepInfo, NnError> {
        let blocks = grads.blocks();
        let mut sq = 0.0f64;
        for (name, _, g) in &blocks {
            for &x in g.iter() {
                let x = x.to_f64().unwrap_or(f64::NAN);
                if !x.is_finite() {
                    return Err(NnError::NonFiniteGradient {
                        block: name.clone(),
                    });
                }
                sq += x * x;
            }
        }
        let grad_norm = sq.sqrt();
        let clip_scale = match self.config.clip_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };

        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let scale = T::lit(clip_scale);
        let correct1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let correct2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (((p, (_, _, g)), m), v) in params
            .blocks_mut()
            .into_iter()
            .zip(blocks)
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
        {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepInfo {
            grad_norm,
            clip_scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, CellType, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            cell: CellType::Gru,
            hidden: 2,
            layers: 1,
            embedding: 2,
            vocab: 3,
            seed: 1,
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = init_params::<f64>(&tiny()).unwrap();
        let before = p.clone();
        let mut fresh = Adam::new(AdamConfig::default(), &p);
        fresh.step(&mut p, &before.zeros_like()).unwrap();
        assert_eq!(p, before);

        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.m.dense_b.fill(0.5);
        adam.v.dense_b.fill(0.25);
        adam.step(&mut p, &before.zeros_like()).unwrap();
        assert!(adam.m.dense_b.iter().all(|&m| (m - 0.45).abs() < 1e-15));
        assert!(adam
            .v
            .dense_b
            .iter()
            .all(|&v| (v - 0.25 * 0.999).abs() < 1e-15));
    }

    #[test]
    fn first_update_is_learning_rate() {
        let mut p = ModelParams::<f64>::zeros(&tiny());
        let mut g = p.zeros_like();
        g.dense_b[0] = 1.0;
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &g).unwrap();
        // m̂ / (√v̂ + ε) = 1 / (1 + 1e-8)
        assert!(
            (p.dense_b[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-12,
            "{}",
            p.dense_b[0]
        );
        assert!((p.dense_b[0] + 0.1).abs() < 1e-8);
        adam.step(&mut p, &g).unwrap();
        assert!((p.dense_b[0] + 0.2).abs() < 1e-8);

        let mut q = ModelParams::<f64>::zeros(&tiny());
        let mut exact = Adam::new(AdamConfig { eps: 0.0, ..cfg }, &q);
        exact.step(&mut q, &g).unwrap();
        assert!((q.dense_b[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_before_moments() {
        let p0 = ModelParams::<f64>::zeros(&tiny());
        let mut g = p0.zeros_like();
        g.dense_b[0] = 30.0;
        g.dense_b[1] = 40.0;
        let mut p = p0.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let info = adam.step(&mut p, &g).unwrap();
        assert_eq!(info.grad_norm, 50.0);
        assert!((info.clip_scale - 0.1).abs() < 1e-15);
        assert!((adam.m.dense_b[0] - 0.1 * 3.0).abs() < 1e-12);
        assert!((adam.m.dense_b[1] - 0.1 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = ModelParams::<f32>::zeros(&tiny());
        let mut g = p.zeros_like();
        g.layers[0].u[[0, 1]] = f32::NAN;
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &g).unwrap_err();
        assert_eq!(
            err,
            NnError::NonFiniteGradient {
                block: "layer0.u".into()
            }
        );
        assert_eq!(adam.t, 0);
    }
}
