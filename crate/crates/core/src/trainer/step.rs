//! One training step: projection, encoding, optional fusion, BPR, the
//! generalization terms, and the hand-written reverse pass through all of it.

use rayon::prelude::*;

use super::TrainError;
use crate::model::{ModelParams, ParamSet};
use crate::objective::{
    combine, inter_compactness_grad, intra_diversity_grad, DomainEmbeddings, GenLossConfig, LossBreakdown,
};
use crate::patterns::{fuse, fuse_backward, PatternBank};
use crate::semstore::BoundEmbeddings;
use crate::tensor::{dot, sigmoid, softplus};

/// Users handled per parallel work unit; fixed so reductions do not depend on
/// the thread count.
const CHUNK: usize = 8;

/// Item indices of one mini-batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    /// Per user: the truncated window. Position `t ≥ 1` predicts `window[t]`
    /// from `window[..t]`.
    pub windows: Vec<Vec<usize>>,
    /// Per user: one negative per predicted position (`window.len() - 1`).
    pub negatives: Vec<Vec<usize>>,
    /// Distinct items entering the generalization losses, sorted.
    pub gen_items: Vec<usize>,
    /// Domain slot (`0..n_gen_domains`) of every `gen_items` entry.
    pub gen_slots: Vec<usize>,
    pub n_gen_domains: usize,
}

impl TrainBatch {
    pub fn n_pairs(&self) -> usize {
        self.windows.iter().map(|w| w.len().saturating_sub(1)).sum()
    }
}

#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub emb: &'a BoundEmbeddings,
    pub gen: Option<&'a GenLossConfig>,
    /// Item count used when β is derived from the whole corpus.
    pub n_corpus_items: usize,
    /// When set, user representations are fused with attended patterns.
    pub bank: Option<&'a PatternBank>,
}

struct ChunkOut {
    loss: f64,
    grads: ParamSet<f64>,
    item_grads: Vec<(usize, Vec<f64>)>,
}

fn user_pass(
    params: &ModelParams,
    ctx: &StepContext<'_>,
    window: &[usize],
    negatives: &[usize],
    proj: &[Vec<f64>],
    local: &dyn Fn(usize) -> usize,
    want_grad: bool,
    out: &mut ChunkOut,
) -> Result<(), TrainError> {
    let len = window.len() - 1;
    let inputs: Vec<&[f64]> = window[..len].iter().map(|&i| proj[local(i)].as_slice()).collect();
    let trace = params.encoder_trace(&inputs);
    let w_f = &params.weights.fusion_w;
    let mut d_outputs = vec![Vec::new(); len];
    for t in 0..len {
        let y = &trace.outputs[t];
        let fused = match ctx.bank {
            Some(b) => {
                let (attn, s) = b.attend(y)?;
                let g = fuse(y, &s, w_f)?;
                Some((attn, s, g))
            }
            None => None,
        };
        let u: &[f64] = fused.as_ref().map(|f| f.2.as_slice()).unwrap_or(y);
        let (pos, neg) = (local(window[t + 1]), local(negatives[t]));
        let diff = dot(u, &proj[pos]) - dot(u, &proj[neg]);
        out.loss += softplus(-diff);
        if !want_grad {
            continue;
        }
        let dd = -sigmoid(-diff);
        let du: Vec<f64> = proj[pos].iter().zip(&proj[neg]).map(|(p, n)| dd * (p - n)).collect();
        out.item_grads.push((pos, u.iter().map(|v| dd * v).collect()));
        out.item_grads.push((neg, u.iter().map(|v| -dd * v).collect()));
        d_outputs[t] = match (&fused, ctx.bank) {
            (Some((attn, s, _)), Some(b)) => {
                let (mut dy, ds) = fuse_backward(y, s, w_f, &du, &mut out.grads.fusion_w);
                for (a, v) in dy.iter_mut().zip(b.attend_backward(y, attn, &ds)) {
                    *a += v;
                }
                dy
            }
            _ => du,
        };
    }
    if want_grad {
        let d_inputs = trace.backward(params, &inputs, &d_outputs, &mut out.grads);
        for (&item, g) in window[..len].iter().zip(d_inputs) {
            out.item_grads.push((local(item), g));
        }
    }
    Ok(())
}

/// Loss of one batch and, when `want_grad`, the gradient of `L_total` with
/// respect to every parameter tensor. `L_rec` sums the BPR loss over the
/// batch's (position, negative) pairs.
pub fn forward_backward(
    params: &ModelParams,
    batch: &TrainBatch,
    ctx: &StepContext<'_>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ParamSet<f64>>), TrainError> {
    let d = params.d_l();
    let mut union: Vec<usize> = batch
        .windows
        .iter()
        .flatten()
        .chain(batch.negatives.iter().flatten())
        .chain(&batch.gen_items)
        .copied()
        .collect();
    union.sort_unstable();
    union.dedup();
    let local = |i: usize| union.binary_search(&i).expect("item is in the batch union");
    let proj: Vec<Vec<f64>> = union
        .par_iter()
        .map(|&i| params.project_f64(ctx.emb.row(i)))
        .collect();

    let users: Vec<usize> = (0..batch.windows.len()).filter(|&u| batch.windows[u].len() >= 2).collect();
    let chunks: Vec<ChunkOut> = users
        .par_chunks(CHUNK)
        .map(|us| {
            let mut out = ChunkOut {
                loss: 0.0,
                grads: ParamSet::zeros(&params.spec),
                item_grads: Vec::new(),
            };
            for &u in us {
                user_pass(
                    params,
                    ctx,
                    &batch.windows[u],
                    &batch.negatives[u],
                    &proj,
                    &local,
                    want_grad,
                    &mut out,
                )?;
            }
            Ok(out)
        })
        .collect::<Result<_, TrainError>>()?;

    let mut grads = if want_grad { Some(ParamSet::<f64>::zeros(&params.spec)) } else { None };
    let mut d_proj = if want_grad { vec![vec![0.0; d]; union.len()] } else { Vec::new() };
    let mut rec = 0.0;
    for c in chunks {
        rec += c.loss;
        if let Some(g) = grads.as_mut() {
            for ((_, dst), (_, src)) in g.tensors_mut().into_iter().zip(c.grads.tensors()) {
                for (a, b) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                    *a += b;
                }
            }
            for (i, v) in c.item_grads {
                for (a, b) in d_proj[i].iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
    }

    let (mut intra, mut inter, mut beta) = (0.0, 0.0, 0.0);
    let alpha = ctx.gen.map(|g| g.alpha);
    if let Some(gen) = ctx.gen {
        if !batch.gen_items.is_empty() {
            let flat: Vec<f64> = batch.gen_items.iter().flat_map(|&i| proj[local(i)].iter().copied()).collect();
            let de = DomainEmbeddings::new(&flat, d, &batch.gen_slots, batch.n_gen_domains)?;
            beta = gen.beta(batch.gen_items.len(), ctx.n_corpus_items, batch.n_gen_domains);
            let mut d_gen = vec![0.0; flat.len()];
            if gen.use_intra {
                let (v, g) = intra_diversity_grad(&de, gen.tau, gen.include_self_pairs, want_grad);
                intra = v.value;
                if want_grad {
                    for (a, b) in d_gen.iter_mut().zip(g) {
                        *a -= gen.alpha * b;
                    }
                }
            }
            if gen.use_inter && batch.n_gen_domains >= 2 {
                let (v, g) = inter_compactness_grad(&de, gen.tau, gen.inter_mode)?;
                inter = v;
                if want_grad {
                    for (a, b) in d_gen.iter_mut().zip(g) {
                        *a += beta * b;
                    }
                }
            }
            if want_grad {
                for (k, &i) in batch.gen_items.iter().enumerate() {
                    for (a, b) in d_proj[local(i)].iter_mut().zip(&d_gen[k * d..(k + 1) * d]) {
                        *a += b;
                    }
                }
            }
        }
    }
    let losses = combine(rec, intra, inter, alpha, beta)?;

    let Some(mut g) = grads else {
        return Ok((losses, None));
    };
    for (k, &item) in union.iter().enumerate() {
        let dv = &d_proj[k];
        if dv.iter().all(|&v| v == 0.0) {
            continue;
        }
        let e = ctx.emb.row(item);
        g.proj_w.add_outer_f32(dv, e);
        g.proj_b.add_assign_slice(dv);
        g.proj2_w.add_outer_f32(dv, e);
        g.proj2_b.add_assign_slice(dv);
    }
    for (name, t) in g.tensors() {
        if !t.is_finite() {
            return Err(TrainError::NonFiniteGradient(name));
        }
    }
    Ok((losses, Some(g)))
}
