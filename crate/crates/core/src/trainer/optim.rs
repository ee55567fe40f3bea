use fsc_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak`, then cosine decay to zero at `total` steps.
///
/// Warmup reaches `peak` on its last step; `lr(warmup) == peak` as well.
pub fn learning_rate(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return peak;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(Error::Config(format!("adam betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config("adam eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay, one state slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW<S: Scalar> {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(sizes: &[usize], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update. `decay[i]` selects whether tensor `i` receives weight decay.
    pub fn step(&mut self, params: &mut [&mut [S]], grads: &[&[S]], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len() {
            return Err(Error::InvalidInput("optimizer state does not match parameter list".into()));
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (one, eps, lr_s) = (S::one(), S::lit(c.eps), S::lit(lr));
        let bc1 = S::lit(1.0 - c.beta1.powi(self.t));
        let bc2 = S::lit(1.0 - c.beta2.powi(self.t));
        let shrink = S::lit(1.0 - lr * c.weight_decay);
        for (i, theta) in params.iter_mut().enumerate() {
            let g = grads[i];
            if theta.len() != g.len() || theta.len() != self.m[i].len() {
                return Err(Error::InvalidInput(format!("gradient {i} has the wrong length")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..theta.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                if decay[i] {
                    theta[j] *= shrink;
                }
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
