use super::{EncoderKind, GruWeights, ModelParams, ParamSet};
use crate::tensor::{sigmoid, Tensor};

/// Cached activations of one recurrent step.
#[derive(Clone, Debug)]
pub struct GruStep {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

/// Encoder run over a window. `outputs[t]` is the representation of the
/// prefix `inputs[..=t]`.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub outputs: Vec<Vec<f64>>,
    steps: Vec<GruStep>,
    kind: EncoderKind,
}

fn gate_preact(w: &Tensor<f32>, u: &Tensor<f32>, b: &Tensor<f32>, x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = b.as_slice().iter().map(|&v| v as f64).collect();
    for (r, ar) in a.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (&wv, &xv) in w.row(r).iter().zip(x) {
            acc += wv as f64 * xv;
        }
        for (&uv, &hv) in u.row(r).iter().zip(h) {
            acc += uv as f64 * hv;
        }
        *ar += acc;
    }
    a
}

fn gru_step(g: &GruWeights<f32>, x: &[f64], h: &[f64]) -> (Vec<f64>, GruStep) {
    let z: Vec<f64> = gate_preact(&g.w_z, &g.u_z, &g.b_z, x, h)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = gate_preact(&g.w_r, &g.u_r, &g.b_r, x, h)
        .into_iter()
        .map(sigmoid)
        .collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let n: Vec<f64> = gate_preact(&g.w_n, &g.u_n, &g.b_n, x, &rh)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let h_new: Vec<f64> = (0..h.len())
        .map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i])
        .collect();
    (
        h_new,
        GruStep {
            h_prev: h.to_vec(),
            z,
            r,
            n,
            rh,
        },
    )
}

pub(super) fn encode_last(params: &ModelParams, inputs: &[&[f64]]) -> Vec<f64> {
    let d = params.d_l();
    match params.spec.encoder {
        EncoderKind::MeanPool => {
            let mut acc = vec![0.0; d];
            for x in inputs {
                for (a, v) in acc.iter_mut().zip(x.iter()) {
                    *a += v;
                }
            }
            let n = inputs.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
        EncoderKind::RecurrentGate => {
            let g = params.weights.gru.as_ref().expect("recurrent encoder has weights");
            let mut h = vec![0.0; d];
            for x in inputs {
                h = gru_step(g, x, &h).0;
            }
            h
        }
    }
}

pub(super) fn trace(params: &ModelParams, inputs: &[&[f64]]) -> EncoderTrace {
    let d = params.d_l();
    let kind = params.spec.encoder;
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut steps = Vec::new();
    match kind {
        EncoderKind::MeanPool => {
            let mut acc = vec![0.0; d];
            for (t, x) in inputs.iter().enumerate() {
                for (a, v) in acc.iter_mut().zip(x.iter()) {
                    *a += v;
                }
                let n = (t + 1) as f64;
                outputs.push(acc.iter().map(|a| a / n).collect());
            }
        }
        EncoderKind::RecurrentGate => {
            let g = params.weights.gru.as_ref().expect("recurrent encoder has weights");
            let mut h = vec![0.0; d];
            steps.reserve(inputs.len());
            for x in inputs {
                let (h_new, step) = gru_step(g, x, &h);
                steps.push(step);
                outputs.push(h_new.clone());
                h = h_new;
            }
        }
    }
    EncoderTrace {
        outputs,
        steps,
        kind,
    }
}

impl EncoderTrace {
    /// Backpropagates `d_outputs` (one gradient per output, zeros allowed).
    /// Accumulates recurrent weight gradients into `grads` and returns the
    /// gradient with respect to every input.
    pub fn backward(
        &self,
        params: &ModelParams,
        inputs: &[&[f64]],
        d_outputs: &[Vec<f64>],
        grads: &mut ParamSet<f64>,
    ) -> Vec<Vec<f64>> {
        let d = params.d_l();
        let len = self.outputs.len();
        debug_assert_eq!(d_outputs.len(), len);
        let mut d_inputs = vec![vec![0.0; d]; len];
        match self.kind {
            EncoderKind::MeanPool => {
                // d x_s = sum_{t >= s} d_out[t] / (t + 1)
                let mut suffix = vec![0.0; d];
                for t in (0..len).rev() {
                    let n = (t + 1) as f64;
                    for (s, g) in suffix.iter_mut().zip(&d_outputs[t]) {
                        *s += g / n;
                    }
                    d_inputs[t].copy_from_slice(&suffix);
                }
            }
            EncoderKind::RecurrentGate => {
                let g = params.weights.gru.as_ref().expect("recurrent encoder has weights");
                let gg = grads.gru.as_mut().expect("gradient buffers mirror parameters");
                let mut dh = vec![0.0; d];
                for t in (0..len).rev() {
                    for (a, b) in dh.iter_mut().zip(&d_outputs[t]) {
                        *a += b;
                    }
                    let st = &self.steps[t];
                    let x = inputs[t];
                    let mut dh_prev = vec![0.0; d];
                    let mut da_z = vec![0.0; d];
                    let mut da_n = vec![0.0; d];
                    for i in 0..d {
                        let dz = dh[i] * (st.h_prev[i] - st.n[i]);
                        let dn = dh[i] * (1.0 - st.z[i]);
                        dh_prev[i] = dh[i] * st.z[i];
                        da_z[i] = dz * st.z[i] * (1.0 - st.z[i]);
                        da_n[i] = dn * (1.0 - st.n[i] * st.n[i]);
                    }
                    // candidate gate
                    gg.w_n.add_outer(&da_n, x);
                    gg.u_n.add_outer(&da_n, &st.rh);
                    gg.b_n.add_assign_slice(&da_n);
                    g.w_n.matvec_t_add(&da_n, &mut d_inputs[t]);
                    let mut d_rh = vec![0.0; d];
                    g.u_n.matvec_t_add(&da_n, &mut d_rh);
                    let mut da_r = vec![0.0; d];
                    for i in 0..d {
                        let dr = d_rh[i] * st.h_prev[i];
                        dh_prev[i] += d_rh[i] * st.r[i];
                        da_r[i] = dr * st.r[i] * (1.0 - st.r[i]);
                    }
                    // reset gate
                    gg.w_r.add_outer(&da_r, x);
                    gg.u_r.add_outer(&da_r, &st.h_prev);
                    gg.b_r.add_assign_slice(&da_r);
                    g.w_r.matvec_t_add(&da_r, &mut d_inputs[t]);
                    g.u_r.matvec_t_add(&da_r, &mut dh_prev);
                    // update gate
                    gg.w_z.add_outer(&da_z, x);
                    gg.u_z.add_outer(&da_z, &st.h_prev);
                    gg.b_z.add_assign_slice(&da_z);
                    g.w_z.matvec_t_add(&da_z, &mut d_inputs[t]);
                    g.u_z.matvec_t_add(&da_z, &mut dh_prev);
                    dh = dh_prev;
                }
            }
        }
        d_inputs
    }
}
