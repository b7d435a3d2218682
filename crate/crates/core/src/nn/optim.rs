use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers are kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(cfg: AdamWConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Self { cfg, step, m, v }
    }

    pub fn step<T: Real>(&mut self, params: Vec<&mut Tensor<T>>, grads: Vec<&Tensor<T>>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidState(format!(
                "optimizer got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidState("optimizer parameter list changed".into()));
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::InvalidState(format!("gradient {i} has wrong size")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((x, gv), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let gf = gv.as_f64();
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gf;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gf * gf;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let xf = x.as_f64();
                let upd = xf - c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * xf);
                *x = T::lit(upd);
            }
        }
        Ok(())
    }
}
