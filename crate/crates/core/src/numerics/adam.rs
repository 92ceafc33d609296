use super::tensor::Tensor;
use super::{Real, TensorError};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state: per-parameter first and second moments and the
/// shared step counter. Moment buffers follow the registration order of the
/// parameter list passed to [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam<E: Real> {
    pub config: AdamConfig,
    pub step_count: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Real> Adam<E> {
    /// Moments start at zero, sized from the given parameter list.
    pub fn new(config: AdamConfig, params: &[&Tensor<E>]) -> Self {
        Adam {
            config,
            step_count: 0,
            m: params.iter().map(|p| vec![E::ZERO; p.numel()]).collect(),
            v: params.iter().map(|p| vec![E::ZERO; p.numel()]).collect(),
        }
    }

    pub fn from_buffers(config: AdamConfig, step_count: u64, m: Vec<Vec<E>>, v: Vec<Vec<E>>) -> Self {
        Adam {
            config,
            step_count,
            m,
            v,
        }
    }

    pub fn moment_buffers(&self) -> (&[Vec<E>], &[Vec<E>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected Adam update over all parameters. `grads` must be
    /// aligned with `params` in the registration order used at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor<E>], grads: &[Vec<E>]) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::Usage(format!(
                "adam step: {} params, {} grads, state holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() {
                return Err(TensorError::Usage(format!(
                    "adam step: grad {} has {} elements, state holds {}",
                    i,
                    g.len(),
                    self.m[i].len()
                )));
            }
            if let Some(idx) = g.iter().position(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: "adam_step",
                    index: idx,
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let beta1 = E::from_f64(self.config.beta1);
        let beta2 = E::from_f64(self.config.beta2);
        let lr = E::from_f64(self.config.lr);
        let eps = E::from_f64(self.config.eps);
        let bc1 = E::ONE - E::from_f64(self.config.beta1.powi(t));
        let bc2 = E::ONE - E::from_f64(self.config.beta2.powi(t));
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pv = param.values_mut();
            for i in 0..pv.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (E::ONE - beta1) * g;
                v[i] = beta2 * v[i] + (E::ONE - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pv[i] = pv[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
