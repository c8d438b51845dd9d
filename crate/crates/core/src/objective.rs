//! Ranking loss and the entropy-based item-level generalization terms.
//!
//! Embeddings are passed as flat row-major `f64` matrices together with a
//! per-row domain slot in `0..n_domains`. Every loss has a value-only form and a
//! `*_grad` form returning `d loss / d embeddings`.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{dot, norm, softmax_into, softplus};

/// Guard on the cosine denominator.
pub const COS_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("domain {0} has no embeddings")]
    EmptyDomain(usize),
    #[error("inter-domain compactness needs at least 2 domains, got {0}")]
    TooFewDomains(usize),
    #[error("non-finite loss term {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid generalization config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaRule {
    /// β = α·|N| / |D|³
    #[default]
    DomainScaled,
    Manual,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NForBeta {
    #[default]
    BatchItems,
    CorpusItems,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterMode {
    /// Softmax over the other domains only; degenerate (≡ 0) with two domains.
    #[default]
    LiteralExcludeOwn,
    /// The item's own centre joins the softmax denominator; the outer sum still
    /// runs over the other domains.
    IncludeOwn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenLossConfig {
    pub alpha: f64,
    pub tau: f64,
    pub beta_rule: BetaRule,
    pub manual_beta: Option<f64>,
    pub n_for_beta: NForBeta,
    pub include_self_pairs: bool,
    pub inter_mode: InterMode,
    /// Extra items drawn uniformly per domain per batch.
    pub sample_size: usize,
    pub use_intra: bool,
    pub use_inter: bool,
}

impl Default for GenLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            tau: 0.1,
            beta_rule: BetaRule::DomainScaled,
            manual_beta: None,
            n_for_beta: NForBeta::BatchItems,
            include_self_pairs: false,
            inter_mode: InterMode::LiteralExcludeOwn,
            sample_size: 64,
            use_intra: true,
            use_inter: true,
        }
    }
}

impl GenLossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ObjectiveError::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ObjectiveError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.beta_rule == BetaRule::Manual && !matches!(self.manual_beta, Some(b) if b > 0.0) {
            return Err(ObjectiveError::Config("manual beta rule needs manual_beta > 0".into()));
        }
        Ok(())
    }

    pub fn beta(&self, n_batch_items: usize, n_corpus_items: usize, n_domains: usize) -> f64 {
        match self.beta_rule {
            BetaRule::Manual => self.manual_beta.unwrap_or(0.0),
            BetaRule::DomainScaled => {
                let n = match self.n_for_beta {
                    NForBeta::BatchItems => n_batch_items,
                    NForBeta::CorpusItems => n_corpus_items,
                };
                scaled_beta(self.alpha, n, n_domains)
            }
        }
    }
}

pub fn scaled_beta(alpha: f64, n_items: usize, n_domains: usize) -> f64 {
    alpha * n_items as f64 / (n_domains as f64).powi(3)
}

/// Flat row-major embedding matrix with a domain slot per row.
#[derive(Clone, Copy, Debug)]
pub struct DomainEmbeddings<'a> {
    pub data: &'a [f64],
    pub dim: usize,
    pub domain_of: &'a [usize],
    pub n_domains: usize,
}

impl<'a> DomainEmbeddings<'a> {
    pub fn new(data: &'a [f64], dim: usize, domain_of: &'a [usize], n_domains: usize) -> Result<Self, ObjectiveError> {
        if dim == 0 || data.len() != dim * domain_of.len() {
            return Err(ObjectiveError::Dim(format!(
                "{} values for {} rows of dim {dim}",
                data.len(),
                domain_of.len()
            )));
        }
        if let Some(&d) = domain_of.iter().find(|&&d| d >= n_domains) {
            return Err(ObjectiveError::Dim(format!("domain slot {d} >= {n_domains}")));
        }
        Ok(Self {
            data,
            dim,
            domain_of,
            n_domains,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.domain_of.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.domain_of.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn members(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.n_domains];
        for (i, &d) in self.domain_of.iter().enumerate() {
            g[d].push(i);
        }
        g
    }
}

/// Cosine similarity with the denominator clamped at [`COS_EPS`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b)).max(COS_EPS)
}

/// Accumulates `g * d cos(a, b) / d a` into `out`. Zero inside the guard.
fn cosine_grad_a(a: &[f64], b: &[f64], na: f64, nb: f64, cos: f64, g: f64, out: &mut [f64]) {
    let den = na * nb;
    if den <= COS_EPS || g == 0.0 {
        return;
    }
    let ka = cos / (na * na);
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += g * (bi / den - ka * ai);
    }
}

#[inline]
fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

pub fn domain_centers(emb: &DomainEmbeddings<'_>) -> Result<Vec<Vec<f64>>, ObjectiveError> {
    let mut sums = vec![vec![0.0; emb.dim]; emb.n_domains];
    let mut counts = vec![0usize; emb.n_domains];
    for i in 0..emb.len() {
        let d = emb.domain_of[i];
        counts[d] += 1;
        for (s, v) in sums[d].iter_mut().zip(emb.row(i)) {
            *s += v;
        }
    }
    for (d, (s, &c)) in sums.iter_mut().zip(&counts).enumerate() {
        if c == 0 {
            return Err(ObjectiveError::EmptyDomain(d));
        }
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(sums)
}

/// Q rows: for each item, the softmax weights over its candidate domains
/// (indexed by domain slot; excluded slots are 0).
pub fn inter_probabilities(
    emb: &DomainEmbeddings<'_>,
    tau: f64,
    mode: InterMode,
) -> Result<Vec<Vec<f64>>, ObjectiveError> {
    if emb.n_domains < 2 {
        return Err(ObjectiveError::TooFewDomains(emb.n_domains));
    }
    let centers = domain_centers(emb)?;
    Ok((0..emb.len())
        .map(|i| inter_row(emb.row(i), emb.domain_of[i], &centers, tau, mode).0)
        .collect())
}

/// Returns (Q over all slots, logits) for one item.
fn inter_row(e: &[f64], own: usize, centers: &[Vec<f64>], tau: f64, mode: InterMode) -> (Vec<f64>, Vec<f64>) {
    let cands: Vec<usize> = (0..centers.len())
        .filter(|&d| d != own || mode == InterMode::IncludeOwn)
        .collect();
    let logits: Vec<f64> = cands.iter().map(|&d| cosine(e, &centers[d]) / tau).collect();
    let mut q = vec![0.0; cands.len()];
    softmax_into(&logits, &mut q);
    let mut full = vec![0.0; centers.len()];
    let mut full_logits = vec![0.0; centers.len()];
    for (k, &d) in cands.iter().enumerate() {
        full[d] = q[k];
        full_logits[d] = logits[k];
    }
    (full, full_logits)
}

/// `Σ_i Σ_{d ≠ d_i} Q_id log Q_id` (≤ 0).
pub fn inter_compactness(emb: &DomainEmbeddings<'_>, tau: f64, mode: InterMode) -> Result<f64, ObjectiveError> {
    Ok(inter_compactness_grad(emb, tau, mode)?.0)
}

pub fn inter_compactness_grad(
    emb: &DomainEmbeddings<'_>,
    tau: f64,
    mode: InterMode,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    if emb.n_domains < 2 {
        return Err(ObjectiveError::TooFewDomains(emb.n_domains));
    }
    let centers = domain_centers(emb)?;
    let center_norms: Vec<f64> = centers.iter().map(|c| norm(c)).collect();
    let counts: Vec<usize> = emb.members().iter().map(|m| m.len()).collect();
    let dim = emb.dim;
    let mut grad = vec![0.0; emb.data.len()];
    let mut d_centers = vec![vec![0.0; dim]; emb.n_domains];
    let mut total = 0.0;
    for i in 0..emb.len() {
        let e = emb.row(i);
        let own = emb.domain_of[i];
        let (q, _) = inter_row(e, own, &centers, tau, mode);
        let mut value = 0.0;
        // Σ_{k∈T} Q_k (log Q_k + 1)
        let mut s = 0.0;
        for (d, &qd) in q.iter().enumerate() {
            if d != own {
                value += xlogx(qd);
                s += xlogx(qd) + qd;
            }
        }
        total += value;
        let ne = norm(e);
        let gi = &mut grad[i * dim..(i + 1) * dim];
        for (d, &qd) in q.iter().enumerate() {
            let in_softmax = d != own || mode == InterMode::IncludeOwn;
            if !in_softmax {
                continue;
            }
            let in_sum = if d != own { xlogx(qd) + qd } else { 0.0 };
            let dl = in_sum - qd * s;
            let g = dl / tau;
            if g == 0.0 {
                continue;
            }
            let cos = cosine(e, &centers[d]);
            cosine_grad_a(e, &centers[d], ne, center_norms[d], cos, g, gi);
            cosine_grad_a(&centers[d], e, center_norms[d], ne, cos, g, &mut d_centers[d]);
        }
    }
    for i in 0..emb.len() {
        let d = emb.domain_of[i];
        let inv = 1.0 / counts[d] as f64;
        for (g, c) in grad[i * dim..(i + 1) * dim].iter_mut().zip(&d_centers[d]) {
            *g += c * inv;
        }
    }
    Ok((total, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntraValue {
    pub value: f64,
    /// Domains skipped because they had a single item and self pairs are off.
    pub skipped_domains: usize,
}

/// P rows of one domain: `rows[i][j]` is P_ij over the domain members listed
/// in `members` (self entry is 0 when excluded).
pub fn intra_probabilities(
    emb: &DomainEmbeddings<'_>,
    domain: usize,
    tau: f64,
    include_self: bool,
) -> Vec<Vec<f64>> {
    let members = &emb.members()[domain];
    let block = IntraBlock::new(emb, members, tau, include_self);
    (0..members.len()).map(|i| block.row_probs(i)).collect()
}

/// `Σ_d (1/|V_d|) Σ_i H(P_i)`: a sum of entropies, so always ≥ 0.
pub fn intra_diversity(emb: &DomainEmbeddings<'_>, tau: f64, include_self: bool) -> IntraValue {
    intra_diversity_grad(emb, tau, include_self, false).0
}

struct IntraBlock {
    norms: Vec<f64>,
    /// Unit rows (zero rows for zero vectors), `n × dim`.
    units: DMatrix<f64>,
    /// Symmetric cosine matrix, `n × n`.
    cos: DMatrix<f64>,
    tau: f64,
    include_self: bool,
}

impl IntraBlock {
    fn new(emb: &DomainEmbeddings<'_>, members: &[usize], tau: f64, include_self: bool) -> Self {
        let n = members.len();
        let norms: Vec<f64> = members.iter().map(|&i| norm(emb.row(i))).collect();
        let units = DMatrix::from_fn(n, emb.dim, |i, c| {
            if norms[i] > 0.0 {
                emb.row(members[i])[c] / norms[i]
            } else {
                0.0
            }
        });
        let mut cos = &units * units.transpose();
        // Near-zero pairs keep the guarded quotient.
        for i in 0..n {
            for j in 0..n {
                if norms[i] * norms[j] <= COS_EPS {
                    cos[(i, j)] = dot(emb.row(members[i]), emb.row(members[j])) / COS_EPS;
                }
            }
        }
        Self {
            norms,
            units,
            cos,
            tau,
            include_self,
        }
    }

    fn n(&self) -> usize {
        self.norms.len()
    }

    fn cos_row(&self, i: usize) -> Vec<f64> {
        self.cos.column(i).iter().copied().collect()
    }

    /// Softmax over the row's candidates given its cosine row.
    fn probs_from_cos(&self, i: usize, cos: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut logits = Vec::with_capacity(n);
        let mut idx = Vec::with_capacity(n);
        for (j, &c) in cos.iter().enumerate() {
            if j != i || self.include_self {
                logits.push(c / self.tau);
                idx.push(j);
            }
        }
        let mut p = vec![0.0; logits.len()];
        softmax_into(&logits, &mut p);
        let mut full = vec![0.0; n];
        for (k, &j) in idx.iter().enumerate() {
            full[j] = p[k];
        }
        full
    }

    fn row_probs(&self, i: usize) -> Vec<f64> {
        self.probs_from_cos(i, &self.cos_row(i))
    }
}

/// Value and (optionally) gradient of [`intra_diversity`]. Rows are processed
/// in parallel; every output element is reduced in a fixed order.
pub fn intra_diversity_grad(
    emb: &DomainEmbeddings<'_>,
    tau: f64,
    include_self: bool,
    want_grad: bool,
) -> (IntraValue, Vec<f64>) {
    let dim = emb.dim;
    let mut grad = if want_grad { vec![0.0; emb.data.len()] } else { Vec::new() };
    let mut value = 0.0;
    let mut skipped = 0;
    for members in emb.members() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n == 1 && !include_self {
            skipped += 1;
            log::warn!("intra-domain diversity skipped a single-item domain");
            continue;
        }
        let block = IntraBlock::new(emb, &members, tau, include_self);
        let inv_n = 1.0 / n as f64;
        // Per row: entropy and dL/dcos for the row's logits.
        let rows: Vec<(f64, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let p = block.row_probs(i);
                let h: f64 = -p.iter().map(|&x| xlogx(x)).sum::<f64>();
                let g: Vec<f64> = if want_grad {
                    p.iter()
                        .map(|&pj| {
                            if pj > 0.0 {
                                -pj * (pj.ln() + h) * inv_n / tau
                            } else {
                                0.0
                            }
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                (h, g)
            })
            .collect();
        value += inv_n * rows.iter().map(|r| r.0).sum::<f64>();
        if !want_grad {
            continue;
        }
        // d e_i = (1/|e_i|) [ Σ_j S_ij û_j − (Σ_j S_ij cos_ij) û_i ],  S = G + Gᵀ
        let norms = &block.norms;
        let s = DMatrix::from_fn(n, n, |i, j| {
            if i == j || norms[i] * norms[j] <= COS_EPS {
                0.0
            } else {
                rows[i].1[j] + rows[j].1[i]
            }
        });
        let su = &s * &block.units;
        for (k, &item) in members.iter().enumerate() {
            let ni = norms[k];
            if ni <= 0.0 {
                continue;
            }
            let acc: f64 = s.column(k).dot(&block.cos.column(k));
            for (c, dst) in grad[item * dim..(item + 1) * dim].iter_mut().enumerate() {
                *dst += (su[(k, c)] - acc * block.units[(k, c)]) / ni;
            }
        }
    }
    (
        IntraValue {
            value,
            skipped_domains: skipped,
        },
        grad,
    )
}

/// `log(1 + e^{-diff})`, the BPR loss of one (positive, negative) pair.
#[inline]
pub fn bpr_pair_loss(score_diff: f64) -> f64 {
    softplus(-score_diff)
}

/// `−Σ log σ(⟨u, i⁺⟩ − ⟨u, i⁻⟩)` over aligned triples.
pub fn bpr_loss(users: &[Vec<f64>], positives: &[Vec<f64>], negatives: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
    if users.len() != positives.len() || users.len() != negatives.len() {
        return Err(ObjectiveError::Dim("BPR triples are not aligned".into()));
    }
    let mut total = 0.0;
    for ((u, p), n) in users.iter().zip(positives).zip(negatives) {
        if u.len() != p.len() || u.len() != n.len() {
            return Err(ObjectiveError::Dim("BPR vectors differ in length".into()));
        }
        total += bpr_pair_loss(dot(u, p) - dot(u, n));
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub intra: f64,
    pub inter: f64,
    pub beta: f64,
    pub total: f64,
}

/// `L_total = L_rec − α·L_intra + β·L_inter`. With `alpha = None` the
/// generalization terms are off and `L_total = L_rec`.
pub fn combine(
    rec: f64,
    intra: f64,
    inter: f64,
    alpha: Option<f64>,
    beta: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    for (name, v) in [("L_rec", rec), ("L_intra", intra), ("L_inter", inter), ("beta", beta)] {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite(name));
        }
    }
    let total = match alpha {
        Some(a) => rec - a * intra + beta * inter,
        None => rec,
    };
    if !total.is_finite() {
        return Err(ObjectiveError::NonFinite("L_total"));
    }
    Ok(LossBreakdown {
        rec,
        intra,
        inter,
        beta,
        total,
    })
}

/// Per-step loss records, written as `step,L_rec,L_intra,L_inter,beta,L_total`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<(usize, LossBreakdown)>,
}

impl LossLog {
    pub fn push(&mut self, step: usize, l: LossBreakdown) {
        self.rows.push((step, l));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,L_rec,L_intra,L_inter,beta,L_total\n");
        for (step, l) in &self.rows {
            s.push_str(&format!(
                "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                l.rec, l.intra, l.inter, l.beta, l.total
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn emb<'a>(data: &'a [f64], dim: usize, dom: &'a [usize], nd: usize) -> DomainEmbeddings<'a> {
        DomainEmbeddings::new(data, dim, dom, nd).unwrap()
    }

    #[test]
    fn centers_are_means() {
        let data = [1.0, 0.0, 0.0, 1.0, 3.0, 4.0];
        let dom = [0, 0, 1];
        let c = domain_centers(&emb(&data, 2, &dom, 2)).unwrap();
        assert_eq!(c[0], vec![0.5, 0.5]);
        assert_eq!(c[1], vec![3.0, 4.0]);
    }

    #[test]
    fn centers_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let dom = [0, 0, 0, 0];
        let c = domain_centers(&emb(&data, 3, &dom, 1)).unwrap();
        for k in 0..3 {
            let mut s = 0.0;
            for i in 0..4 {
                s += data[i * 3 + k];
            }
            assert!((c[0][k] - s / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_domain_is_an_error() {
        let data = [1.0, 0.0];
        let dom = [0];
        assert_eq!(
            domain_centers(&emb(&data, 2, &dom, 2)).unwrap_err(),
            ObjectiveError::EmptyDomain(1)
        );
    }

    #[test]
    fn two_domain_literal_inter_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dom = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let e = emb(&data, 3, &dom, 2);
        let (v, g) = inter_compactness_grad(&e, 0.1, InterMode::LiteralExcludeOwn).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(inter_compactness(&e, 0.1, InterMode::IncludeOwn).unwrap() < 0.0);
    }

    #[test]
    fn flat_temperature_gives_minus_log_two_per_item() {
        // Three domains, τ huge: Q is uniform over the two other domains.
        let data = [1.0, 0.0, 0.0, 1.0, -1.0, 0.5];
        let dom = [0, 1, 2];
        let v = inter_compactness(&emb(&data, 2, &dom, 3), 1e12, InterMode::LiteralExcludeOwn).unwrap();
        assert!((v - 3.0 * -(2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn explicit_cosines_match_hand_softmax() {
        // Item in domain 0 with cosines 0.9 and 0.1 to the other two centres.
        let (c1, c2) = (0.9f64, 0.1f64);
        let e = [1.0, 0.0, 0.0];
        let d1 = [c1, (1.0 - c1 * c1).sqrt(), 0.0];
        let d2 = [c2, 0.0, (1.0 - c2 * c2).sqrt()];
        let data: Vec<f64> = e.iter().chain(&d1).chain(&d2).copied().collect();
        let dom = [0, 1, 2];
        let em = emb(&data, 3, &dom, 3);
        let q = inter_probabilities(&em, 0.1, InterMode::LiteralExcludeOwn).unwrap();
        let a = (c1 / 0.1).exp();
        let b = (c2 / 0.1).exp();
        let (q1, q2) = (a / (a + b), b / (a + b));
        assert!((q[0][1] - q1).abs() < 1e-12 && (q[0][2] - q2).abs() < 1e-12);
        // Only row 0 is hand-checked; the total includes the other two rows.
        let row0 = q1 * q1.ln() + q2 * q2.ln();
        let rows12: f64 = q[1..].iter().flat_map(|r| r.iter()).map(|&x| xlogx(x)).sum();
        let total = inter_compactness(&em, 0.1, InterMode::LiteralExcludeOwn).unwrap();
        assert!((total - (row0 + rows12)).abs() < 1e-12);
    }

    #[test]
    fn too_few_domains_rejected() {
        let data = [1.0, 0.0];
        let dom = [0];
        assert_eq!(
            inter_compactness(&emb(&data, 2, &dom, 1), 0.1, InterMode::IncludeOwn).unwrap_err(),
            ObjectiveError::TooFewDomains(1)
        );
    }

    #[test]
    fn identical_embeddings_give_uniform_rows() {
        let data = [0.3, -0.7, 0.3, -0.7, 0.3, -0.7];
        let dom = [0, 0, 0];
        let e = emb(&data, 2, &dom, 1);
        let p = intra_probabilities(&e, 0, 0.1, false);
        for (i, row) in p.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((v - want).abs() < 1e-12);
            }
        }
        // (1/3)·3·log 2
        assert!((intra_diversity(&e, 0.1, false).value - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn antipodal_pair_has_zero_entropy() {
        let data = [1.0, 0.0, -1.0, 0.0];
        let dom = [0, 0];
        assert_eq!(intra_diversity(&emb(&data, 2, &dom, 1), 0.1, false).value, 0.0);
    }

    #[test]
    fn single_item_domain_is_skipped() {
        let data = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let dom = [0, 1, 1];
        let v = intra_diversity(&emb(&data, 2, &dom, 2), 0.1, false);
        assert_eq!(v.skipped_domains, 1);
    }

    /// Brute-force O(n²) scalar oracle for L_intra of one domain.
    fn intra_oracle(rows: &[Vec<f64>], tau: f64, include_self: bool) -> f64 {
        let n = rows.len();
        let cos = |a: &[f64], b: &[f64]| {
            let mut ab = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            for k in 0..a.len() {
                ab += a[k] * b[k];
                aa += a[k] * a[k];
                bb += b[k] * b[k];
            }
            ab / (aa.sqrt() * bb.sqrt())
        };
        let mut total = 0.0;
        for i in 0..n {
            let mut z = 0.0;
            for j in 0..n {
                if j != i || include_self {
                    z += (cos(&rows[i], &rows[j]) / tau).exp();
                }
            }
            for j in 0..n {
                if j != i || include_self {
                    let p = (cos(&rows[i], &rows[j]) / tau).exp() / z;
                    total -= p * p.ln();
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn intra_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let data: Vec<f64> = rows.concat();
        let dom = [0, 0, 0, 0];
        let e = emb(&data, 3, &dom, 1);
        for include_self in [false, true] {
            let got = intra_diversity(&e, 0.1, include_self).value;
            assert!((got - intra_oracle(&rows, 0.1, include_self)).abs() < 1e-5);
        }
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, analytic: &[f64], x: &[f64]) {
        let h = 1e-6;
        let mut xp = x.to_vec();
        for k in 0..x.len() {
            xp[k] = x[k] + h;
            let fp = f(&xp);
            xp[k] = x[k] - h;
            let fm = f(&xp);
            xp[k] = x[k];
            let num = (fp - fm) / (2.0 * h);
            let scale = num.abs().max(analytic[k].abs()).max(1e-3);
            assert!((num - analytic[k]).abs() / scale < 1e-5, "k={k}: {num} vs {}", analytic[k]);
        }
    }

    #[test]
    fn intra_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dom = [0, 1, 0, 1, 0, 1, 0, 0];
        for include_self in [false, true] {
            let e = emb(&data, 3, &dom, 2);
            let (_, g) = intra_diversity_grad(&e, 0.5, include_self, true);
            fd_check(
                |x| intra_diversity(&emb(x, 3, &dom, 2), 0.5, include_self).value,
                &g,
                &data,
            );
        }
    }

    #[test]
    fn inter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dom = [0, 1, 2, 0, 1, 2, 0, 0, 1];
        for mode in [InterMode::LiteralExcludeOwn, InterMode::IncludeOwn] {
            let e = emb(&data, 3, &dom, 3);
            let (_, g) = inter_compactness_grad(&e, 0.5, mode).unwrap();
            fd_check(|x| inter_compactness(&emb(x, 3, &dom, 3), 0.5, mode).unwrap(), &g, &data);
        }
    }

    #[test]
    fn zero_vectors_keep_losses_finite() {
        let data = [0.0, 0.0, 1.0, 0.5, 0.0, 0.0, -1.0, 2.0];
        let dom = [0, 0, 1, 1];
        let e = emb(&data, 2, &dom, 2);
        let (iv, ig) = intra_diversity_grad(&e, 0.1, false, true);
        assert!(iv.value.is_finite() && ig.iter().all(|v| v.is_finite()));
        let (xv, xg) = inter_compactness_grad(&e, 0.1, InterMode::IncludeOwn).unwrap();
        assert!(xv.is_finite() && xg.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bpr_reference_values() {
        assert!((bpr_pair_loss(0.0) - 2.0f64.ln()).abs() < 1e-12);
        assert!(bpr_pair_loss(1e4) < 1e-12);
        assert!((bpr_pair_loss(1.0) - 0.313261687518223).abs() < 1e-12);
        let l = bpr_loss(&[vec![1.0, 0.0]], &[vec![2.0, 0.0]], &[vec![1.0, 5.0]]).unwrap();
        assert!((l - bpr_pair_loss(1.0)).abs() < 1e-12);
    }

    #[test]
    fn beta_follows_cubic_domain_scaling() {
        assert!((scaled_beta(0.001, 128, 2) - 0.016).abs() < 1e-15);
        let cfg = GenLossConfig {
            n_for_beta: NForBeta::CorpusItems,
            ..Default::default()
        };
        assert!((cfg.beta(10, 800, 2) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn alpha_must_be_positive() {
        let cfg = GenLossConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(ObjectiveError::Config(_))));
        let cfg = GenLossConfig {
            beta_rule: BetaRule::Manual,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn combine_is_additive() {
        let l = combine(2.5, 0.0, 0.0, Some(0.01), 0.3).unwrap();
        assert_eq!(l.total, 2.5);
        let l = combine(2.5, 3.0, -1.0, Some(0.01), 0.3).unwrap();
        assert!((l.total - (2.5 - 0.03 - 0.3)).abs() < 1e-12);
        assert_eq!(
            combine(f64::NAN, 0.0, 0.0, None, 0.0).unwrap_err(),
            ObjectiveError::NonFinite("L_rec")
        );
    }

    #[test]
    fn loss_log_has_expected_header() {
        let mut log = LossLog::default();
        log.push(0, combine(1.0, 0.5, -0.25, Some(0.1), 0.2).unwrap());
        let csv = log.to_csv();
        assert!(csv.starts_with("step,L_rec,L_intra,L_inter,beta,L_total\n0,"));
    }

    fn rows_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
        (2usize..8).prop_flat_map(|n| {
            (
                proptest::collection::vec(-3.0f64..3.0, n * 3),
                proptest::collection::vec(0usize..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions((data, mut dom) in rows_strategy(), tau in 0.05f64..2.0) {
            dom[0] = 0; dom[1] = 1;
            let nd = 3;
            let present: Vec<bool> = (0..nd).map(|d| dom.contains(&d)).collect();
            let remap: Vec<usize> = present.iter().scan(0, |c, &p| { let v = *c; if p { *c += 1; } Some(v) }).collect();
            let dom: Vec<usize> = dom.iter().map(|&d| remap[d]).collect();
            let nd = present.iter().filter(|&&p| p).count();
            let e = emb(&data, 3, &dom, nd);
            for mode in [InterMode::LiteralExcludeOwn, InterMode::IncludeOwn] {
                for row in inter_probabilities(&e, tau, mode).unwrap() {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
                prop_assert!(inter_compactness(&e, tau, mode).unwrap() <= 0.0);
            }
            for d in 0..nd {
                let n = dom.iter().filter(|&&x| x == d).count();
                if n < 2 { continue; }
                for row in intra_probabilities(&e, d, tau, false) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    let h: f64 = -row.iter().map(|&x| xlogx(x)).sum::<f64>();
                    prop_assert!(h >= -1e-12 && h <= ((n - 1) as f64).ln() + 1e-9);
                }
            }
            prop_assert!(intra_diversity(&e, tau, false).value >= 0.0);
        }

        #[test]
        fn losses_are_scale_invariant((data, mut dom) in rows_strategy(), c in 0.1f64..10.0) {
            dom.iter_mut().for_each(|d| *d %= 2);
            dom[0] = 0; dom[1] = 1;
            let scaled: Vec<f64> = data.iter().map(|v| v * c).collect();
            let a = emb(&data, 3, &dom, 2);
            let b = emb(&scaled, 3, &dom, 2);
            let ia = intra_diversity(&a, 0.1, false).value;
            let ib = intra_diversity(&b, 0.1, false).value;
            prop_assert!((ia - ib).abs() < 1e-5);
            let xa = inter_compactness(&a, 0.1, InterMode::IncludeOwn).unwrap();
            let xb = inter_compactness(&b, 0.1, InterMode::IncludeOwn).unwrap();
            prop_assert!((xa - xb).abs() < 1e-5);
        }
    }
}
