use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: AdamWState::default(),
        }
    }

    /// Applies one update. `params` and `grads` are matched by position.
    ///
    /// Every gradient is checked before any parameter moves, so a rejected
    /// step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "{name}: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
        }
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.state.v = self.state.m.clone();
        } else if self.state.m.len() != params.len()
            || self.state.m.iter().zip(params.iter()).any(|(m, (_, p))| m.len() != p.numel())
        {
            return Err(Error::Dimension("optimizer state does not match parameters".into()));
        }

        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as f64;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.state.m[k];
            let v = &mut self.state.v[k];
            for (e, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[e] = c.beta1 * m[e] + (1.0 - c.beta1) * gv;
                v[e] = c.beta2 * v[e] + (1.0 - c.beta2) * gv * gv;
                let m_hat = m[e] / bias1;
                let v_hat = v[e] / bias2;
                *pv -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *pv);
            }
        }
        Ok(())
    }
}
