use super::{NetError, ProjectionParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments plus the number of steps taken so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ProjectionParams,
    pub v: ProjectionParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ProjectionParams) -> AdamState {
        AdamState {
            m: ProjectionParams::zeros(params.config),
            v: ProjectionParams::zeros(params.config),
            t: 0,
        }
    }

    /// One bias-corrected Adam update; the step index becomes `t + 1`.
    pub fn step(
        &mut self,
        params: &mut ProjectionParams,
        grads: &ProjectionParams,
        lr: f64,
        cfg: AdamConfig,
    ) -> Result<(), NetError> {
        if grads.config != params.config || self.m.config != params.config {
            return Err(NetError::Shape("adam: parameter/gradient config mismatch".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            adam_update(p, g, m, v, lr, cfg, bc1, bc2);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Cosine annealing from `lr0` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let frac = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
