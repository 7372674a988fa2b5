use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(1.0),
        }
    }
}

/// First/second moment accumulators for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

/// Scales `grads` in place so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Matrix]) -> Self {
        let zeros = |p: &Matrix| Matrix::zeros(p.rows(), p.cols());
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One clipped, bias-corrected Adam update with decoupled weight decay.
    pub fn apply(&mut self, params: &mut [Matrix], grads: &mut [Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params / {} grads for {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape("adam_step", format!("tensor {i} shape changed")));
            }
            if !g.is_finite() {
                return Err(Error::Divergence {
                    step: self.step as usize + 1,
                    detail: format!("non-finite gradient in tensor {i}"),
                });
            }
        }
        if let Some(c) = self.config.clip_norm {
            clip_global_norm(grads, c);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for k in 0..pd.len() {
                md[k] = beta1 * md[k] + (1.0 - beta1) * gd[k];
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * gd[k] * gd[k];
                let mhat = md[k] / bc1;
                let vhat = vd[k] / bc2;
                pd[k] -= lr * weight_decay * pd[k];
                pd[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![Matrix::scalar(0.5)];
        let mut st = AdamState::new(cfg, &p);
        st.apply(&mut p, &mut [Matrix::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + eps)
        let want = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0].item() - want).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn decay_term_on_first_step() {
        let mut p = vec![Matrix::scalar(2.0)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.apply(&mut p, &mut [Matrix::scalar(1.0)]).unwrap();
        let want = 2.0 - 1e-3 * 1e-4 * 2.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0].item() - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let orig = Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.25]]);
        let mut p = vec![orig.clone()];
        let mut st = AdamState::new(cfg, &p);
        for _ in 0..3 {
            st.apply(&mut p, &mut [Matrix::zeros(2, 2)]).unwrap();
        }
        assert_eq!(p[0], orig);
        assert_eq!(st.step_count(), 3);
    }

    #[test]
    fn clip_to_unit_norm() {
        let mut g = vec![Matrix::row_vector(&[3.0]), Matrix::row_vector(&[4.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        let after = (g[0].item().powi(2) + g[1].item().powi(2)).sqrt();
        assert!((after - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let mut p = vec![Matrix::scalar(0.0)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let err = st.apply(&mut p, &mut [Matrix::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
    }
}
