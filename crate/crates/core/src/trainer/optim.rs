use crate::encoder::Params;
use crate::error::{HailError, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// d^-0.5 · min(step^-0.5, step · warmup^-1.5).
pub fn noam_learning_rate(step: u64, d: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Bias-corrected Adam moments with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update at 1-based `step`.
    pub fn update(&mut self, params: &mut Params, grads: &Params, lr: f64, step: u64) -> Result<()> {
        if step == 0 {
            return Err(HailError::contract("Adam steps are 1-based"));
        }
        let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
        let g = grads.blocks();
        let mut m = self.m.blocks_mut();
        let mut v = self.v.blocks_mut();
        let mut p = params.blocks_mut();
        if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
            return Err(HailError::contract("optimizer state does not match the parameters"));
        }
        for i in 0..p.len() {
            let (pd, gd) = (&mut p[i].1.data, &g[i].1.data);
            let (md, vd) = (&mut m[i].1.data, &mut v[i].1.data);
            for k in 0..pd.len() {
                let gk = gd[k];
                md[k] = ADAM_BETA1 * md[k] + (1.0 - ADAM_BETA1) * gk;
                vd[k] = ADAM_BETA2 * vd[k] + (1.0 - ADAM_BETA2) * gk * gk;
                let m_hat = md[k] / c1;
                let v_hat = vd[k] / c2;
                pd[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
