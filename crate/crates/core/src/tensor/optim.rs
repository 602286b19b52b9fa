use serde::{Deserialize, Serialize};

use super::{Params, Scalar};
use crate::error::{Error, Result};

/// AdamW hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, max_grad_norm: 1.0 }
    }
}

/// Moments and step counter of an AdamW optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    /// First and second moments, one slot per parameter of the table the
    /// optimizer drives; `None` until the parameter is first updated.
    pub moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        OptimizerState { config, step: 0, moments: vec![None; n_params] }
    }

    /// One decoupled-weight-decay Adam update of every trainable parameter.
    ///
    /// Weight decay is applied to matrices only; vectors (biases, norms)
    /// are never decayed. `lr_scale` multiplies the configured rate.
    pub fn step(&mut self, params: &mut Params<T>, lr_scale: f64) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, table has {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (_, name, t) in params.iter() {
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::Usage(format!("parameter `{name}` has no gradient")));
            }
        }
        let clip = if self.config.max_grad_norm > 0.0 {
            let norm = params.grad_norm();
            if norm > self.config.max_grad_norm {
                self.config.max_grad_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = c.lr * lr_scale;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let clip = T::lit(clip);

        for id in params.ids().collect::<Vec<_>>() {
            let p = params.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let decay = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let grad = p.grad.take().expect("checked above");
            let n = grad.len();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let data = p.data_mut();
            for i in 0..n {
                let g = grad[i] * clip;
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let mhat = m[i].as_f64() / bc1;
                let vhat = v[i].as_f64() / bc2;
                let w = data[i].as_f64();
                data[i] = T::lit(w - lr * (mhat / (vhat.sqrt() + c.eps) + decay * w));
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
