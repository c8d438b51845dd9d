use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet<f64>,
    pub v: ParamSet<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: ParamSet::zeros(&params.spec),
            v: ParamSet::zeros(&params.spec),
            t: 0,
        }
    }

    /// Bias-corrected Adam update of every tensor.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamSet<f64>, lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ps = params.weights.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        let gs = grads.tensors();
        for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(gs) {
            let (p, m, v, g) = (p.1.as_mut_slice(), m.1.as_mut_slice(), v.1.as_mut_slice(), g.1.as_slice());
            for k in 0..p.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let upd = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
                if upd != 0.0 {
                    p[k] = (p[k] as f64 - upd) as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderKind, FusionInit, ModelSpec};

    fn params() -> ModelParams {
        ModelParams::init(ModelSpec::new(4, 2, EncoderKind::RecurrentGate), 1, FusionInit::Random).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = ParamSet::zeros(&p.spec);
        for _ in 0..3 {
            st.step(&mut p, &g, 0.1, &AdamConfig::default());
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_steps_match_scalar_oracle() {
        let mut p = params();
        let w0 = p.weights.proj_w.as_slice()[0] as f64;
        let mut st = AdamState::new(&p);
        let mut g = ParamSet::zeros(&p.spec);
        let cfg = AdamConfig::default();
        let (lr, gs) = (0.01, [0.5, -0.2]);
        // Hand-rolled scalar Adam.
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, w0);
        for (t, &gv) in gs.iter().enumerate() {
            g.proj_w.as_mut_slice()[0] = gv;
            st.step(&mut p, &g, lr, &cfg);
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            w = (w - lr * mh / (vh.sqrt() + 1e-8)) as f32 as f64;
        }
        assert_eq!(p.weights.proj_w.as_slice()[0] as f64, w);
        // First step moves by ≈ lr against the gradient sign.
        let mut q = params();
        let mut st = AdamState::new(&q);
        g.proj_w.as_mut_slice()[0] = 3.0;
        st.step(&mut q, &g, lr, &cfg);
        let delta = q.weights.proj_w.as_slice()[0] as f64 - w0;
        assert!((delta + lr).abs() < 1e-6);
    }
}
