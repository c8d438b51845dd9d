//! Sampled ranking evaluation (1 truth + n negatives), R@k / N@k, and the
//! zero-shot inference path.

mod diagnostics;

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, SplitSpec};
use crate::model::{Checkpoint, ModelError, ModelParams};
use crate::patterns::{PatternBank, PatternError};
use crate::semstore::BoundEmbeddings;
use crate::tensor::dot;

pub use diagnostics::{
    embedding_diagnostics, linear_probe, pca_2d, write_metrics_csv, write_pca_csv, Diagnostics, ProbeConfig,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("domain-overlap: {0} shared between source and target")]
    DomainOverlap(String),
    #[error("only {available} negatives available, {wanted} requested")]
    InsufficientNegatives { available: usize, wanted: usize },
    #[error("no users to evaluate")]
    NoUsers,
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    /// The truth is placed after every negative it ties with.
    #[default]
    Pessimistic,
    Optimistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub cutoffs: Vec<usize>,
    pub n_negatives: usize,
    pub n_repeats: usize,
    pub seed: u64,
    pub tie_rule: TieRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cutoffs: vec![5, 10, 20],
            n_negatives: 100,
            n_repeats: 5,
            seed: 0,
            tie_rule: TieRule::Pessimistic,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.cutoffs.is_empty() || self.cutoffs.iter().any(|&k| k == 0 || k > self.n_negatives + 1) {
            return Err(EvalError::Config(format!(
                "cutoffs must lie in 1..={}",
                self.n_negatives + 1
            )));
        }
        if self.n_repeats == 0 {
            return Err(EvalError::Config("n_repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// 1-based rank of the truth among `1 + negatives.len()` scores.
pub fn rank_from_scores(truth: f64, negatives: &[f64], tie_rule: TieRule) -> usize {
    let mut above = 0;
    let mut ties = 0;
    for &s in negatives {
        if s > truth {
            above += 1;
        } else if s == truth {
            ties += 1;
        }
    }
    match tie_rule {
        TieRule::Pessimistic => 1 + above + ties,
        TieRule::Optimistic => 1 + above,
    }
}

pub fn rank_one(user: &[f64], truth: &[f64], negatives: &[&[f64]], tie_rule: TieRule) -> usize {
    let t = dot(user, truth);
    let negs: Vec<f64> = negatives.iter().map(|n| dot(user, n)).collect();
    rank_from_scores(t, &negs, tie_rule)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall_pct: f64,
    pub ndcg_pct: f64,
}

/// R@k and N@k (single relevant item, ideal DCG = 1) as percentages.
pub fn metrics(ranks: &[usize], cutoffs: &[usize]) -> Vec<CutoffMetrics> {
    let n = ranks.len().max(1) as f64;
    cutoffs
        .iter()
        .map(|&k| {
            let mut hits = 0usize;
            let mut dcg = 0.0;
            for &r in ranks {
                if r <= k {
                    hits += 1;
                    dcg += 1.0 / ((r + 1) as f64).log2();
                }
            }
            CutoffMetrics {
                k,
                recall_pct: 100.0 * hits as f64 / n,
                ndcg_pct: 100.0 * dcg / n,
            }
        })
        .collect()
}

/// Draws `n` distinct items from `pool`, skipping anything in `exclude`.
pub fn sample_negatives(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    exclude: &HashSet<usize>,
    n: usize,
) -> Result<Vec<usize>, EvalError> {
    let available = pool.iter().filter(|i| !exclude.contains(i)).count();
    if available < n {
        return Err(EvalError::InsufficientNegatives { available, wanted: n });
    }
    let mut out = Vec::with_capacity(n);
    let mut chosen: HashSet<usize> = HashSet::with_capacity(n);
    if available < 2 * n {
        // Dense case: partial shuffle of the eligible items.
        let mut elig: Vec<usize> = pool.iter().copied().filter(|i| !exclude.contains(i)).collect();
        for k in 0..n {
            let j = rng.gen_range(k..elig.len());
            elig.swap(k, j);
        }
        elig.truncate(n);
        return Ok(elig);
    }
    while out.len() < n {
        let c = pool[rng.gen_range(0..pool.len())];
        if !exclude.contains(&c) && chosen.insert(c) {
            out.push(c);
        }
    }
    Ok(out)
}

/// One user to rank: history, held-out truth, and every item the user touched.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub history: Vec<usize>,
    pub truth: usize,
    pub seen: HashSet<usize>,
}

/// Test cases (history = prefix + val, truth = test) for every split user.
pub fn test_cases(corpus: &Corpus, split: &SplitSpec) -> Vec<EvalCase> {
    split
        .users
        .iter()
        .map(|u| EvalCase {
            history: u.test_history(),
            truth: u.test,
            seen: corpus.users()[u.user].items.iter().copied().collect(),
        })
        .collect()
}

/// Validation cases (history = prefix, truth = val).
pub fn validation_cases(corpus: &Corpus, split: &SplitSpec) -> Vec<EvalCase> {
    split
        .users
        .iter()
        .map(|u| EvalCase {
            history: u.prefix.clone(),
            truth: u.val,
            seen: corpus.users()[u.user].items.iter().copied().collect(),
        })
        .collect()
}

/// Frozen scorer: projected items plus the user-side encoder and optional fusion.
pub struct Scorer<'a> {
    pub params: &'a ModelParams,
    pub bank: Option<&'a PatternBank>,
    items: Vec<Vec<f64>>,
}

impl<'a> Scorer<'a> {
    pub fn new(params: &'a ModelParams, bank: Option<&'a PatternBank>, emb: &BoundEmbeddings) -> Result<Self, EvalError> {
        if emb.dim() != params.d_h() {
            return Err(ModelError::DimMismatch {
                what: "semantic store dim",
                expected: params.d_h(),
                found: emb.dim(),
            }
            .into());
        }
        if let Some(b) = bank {
            if b.d_l() != params.d_l() {
                return Err(PatternError::Dim {
                    expected: params.d_l(),
                    found: b.d_l(),
                }
                .into());
            }
        }
        let items = (0..emb.len())
            .into_par_iter()
            .map(|i| params.project_f64(emb.row(i)))
            .collect();
        Ok(Self { params, bank, items })
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i]
    }

    pub fn user(&self, history: &[usize]) -> Result<Vec<f64>, EvalError> {
        let refs: Vec<&[f64]> = history.iter().map(|&i| self.items[i].as_slice()).collect();
        let y = self.params.encode_f64(&refs)?;
        match self.bank {
            Some(b) => Ok(b.fuse_user(&y, &self.params.weights.fusion_w)?.g),
            None => Ok(y),
        }
    }

    /// Ranks of each case against its own negatives.
    pub fn ranks(&self, cases: &[EvalCase], negatives: &[Vec<usize>], tie_rule: TieRule) -> Result<Vec<usize>, EvalError> {
        cases
            .par_iter()
            .zip(negatives)
            .map(|(c, negs)| {
                let u = self.user(&c.history)?;
                let t = dot(&u, &self.items[c.truth]);
                let s: Vec<f64> = negs.iter().map(|&n| dot(&u, &self.items[n])).collect();
                Ok(rank_from_scores(t, &s, tie_rule))
            })
            .collect()
    }
}

/// Negatives for every case from one seeded stream, drawn in case order.
pub fn draw_negatives(cases: &[EvalCase], pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>, EvalError> {
    cases
        .iter()
        .map(|c| {
            let mut ex = c.seen.clone();
            ex.insert(c.truth);
            c.history.iter().for_each(|&h| {
                ex.insert(h);
            });
            sample_negatives(rng, pool, &ex, n)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub source_domain: String,
    pub target_domain: String,
    pub cutoffs: Vec<CutoffMetrics>,
    pub repeats: Vec<Vec<CutoffMetrics>>,
    pub n_users: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn metric(&self, k: usize) -> Option<&CutoffMetrics> {
        self.cutoffs.iter().find(|c| c.k == k)
    }

    pub fn domain_pair(&self) -> String {
        format!("{}->{}", self.source_domain, self.target_domain)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Runs `n_repeats` sampled rankings with freshly drawn negatives and averages them.
pub fn evaluate(
    scorer: &Scorer<'_>,
    cases: &[EvalCase],
    pool: &[usize],
    cfg: &EvalConfig,
) -> Result<(Vec<CutoffMetrics>, Vec<Vec<CutoffMetrics>>), EvalError> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let mut repeats = Vec::with_capacity(cfg.n_repeats);
    for r in 0..cfg.n_repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64 + 1);
        let negs = draw_negatives(cases, pool, cfg.n_negatives, &mut rng)?;
        let ranks = scorer.ranks(cases, &negs, cfg.tie_rule)?;
        repeats.push(metrics(&ranks, &cfg.cutoffs));
    }
    let mean = cfg
        .cutoffs
        .iter()
        .enumerate()
        .map(|(i, &k)| CutoffMetrics {
            k,
            recall_pct: repeats.iter().map(|r| r[i].recall_pct).sum::<f64>() / repeats.len() as f64,
            ndcg_pct: repeats.iter().map(|r| r[i].ndcg_pct).sum::<f64>() / repeats.len() as f64,
        })
        .collect();
    Ok((mean, repeats))
}

/// Fails if any item or user id appears in both corpora.
pub fn check_disjoint(source: &Corpus, target: &Corpus) -> Result<(), EvalError> {
    let src_items: HashSet<&str> = source.items().iter().map(|i| i.item_id.as_str()).collect();
    if let Some(i) = target.items().iter().find(|i| src_items.contains(i.item_id.as_str())) {
        return Err(EvalError::DomainOverlap(format!("item {}", i.item_id)));
    }
    let src_users: HashSet<&str> = source.users().iter().map(|u| u.user_id.as_str()).collect();
    if let Some(u) = target.users().iter().find(|u| src_users.contains(u.user_id.as_str())) {
        return Err(EvalError::DomainOverlap(format!("user {}", u.user_id)));
    }
    Ok(())
}

/// Variant label for a checkpoint evaluated with or without pattern fusion.
pub fn variant_label(checkpoint: &Checkpoint, fused: bool) -> String {
    let base = checkpoint.params.spec.encoder.label();
    if checkpoint.meta.variant.is_empty() {
        format!("{base}-{}", if fused { "RecG" } else { "Sem" })
    } else if !fused && checkpoint.meta.variant.ends_with("-RecG") {
        format!("{base}-Sem")
    } else {
        checkpoint.meta.variant.clone()
    }
}

/// Frozen-parameter evaluation on a target domain that shares no ids with the
/// source. With `bank = None` fusion is off.
pub fn zero_shot_eval(
    checkpoint: &Checkpoint,
    bank: Option<(&PatternBank, [u8; 32])>,
    source: &Corpus,
    target: &Corpus,
    target_emb: &BoundEmbeddings,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    check_disjoint(source, target)?;
    if let Some((b, fp)) = bank {
        b.check_fingerprint(&fp)?;
    }
    let split = crate::corpus::split(target);
    let cases = test_cases(target, &split);
    let pool: Vec<usize> = (0..target.n_items()).collect();
    let scorer = Scorer::new(&checkpoint.params, bank.map(|b| b.0), target_emb)?;
    let (mean, repeats) = evaluate(&scorer, &cases, &pool, cfg)?;
    let target_domain = target
        .domains()
        .iter()
        .map(|d| d.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(EvalReport {
        variant: variant_label(checkpoint, bank.is_some()),
        source_domain: checkpoint.meta.source_domain.clone(),
        target_domain,
        cutoffs: mean,
        repeats,
        n_users: cases.len(),
        seed: cfg.seed,
    })
}

/// In-domain evaluation on the test split of the training corpus.
pub fn in_domain_eval(
    checkpoint: &Checkpoint,
    bank: Option<&PatternBank>,
    corpus: &Corpus,
    emb: &BoundEmbeddings,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let split = crate::corpus::split(corpus);
    let cases = test_cases(corpus, &split);
    let scorer = Scorer::new(&checkpoint.params, bank, emb)?;
    // Negatives come from the truth item's own domain.
    let mut reports = Vec::new();
    let domain_pools: Vec<Vec<usize>> = (0..corpus.domains().len())
        .map(|d| corpus.items_in_domain(crate::corpus::DomainId(d as u32)))
        .collect();
    let mut by_domain: Vec<Vec<EvalCase>> = vec![Vec::new(); domain_pools.len()];
    for c in cases {
        by_domain[corpus.item_domain(c.truth).index()].push(c);
    }
    let mut total = 0;
    for (d, cs) in by_domain.iter().enumerate() {
        if cs.is_empty() {
            continue;
        }
        let (_, repeats) = evaluate(&scorer, cs, &domain_pools[d], cfg)?;
        reports.push((cs.len(), repeats));
        total += cs.len();
    }
    if total == 0 {
        return Err(EvalError::NoUsers);
    }
    // User-weighted merge across domains.
    let repeats: Vec<Vec<CutoffMetrics>> = (0..cfg.n_repeats)
        .map(|r| {
            cfg.cutoffs
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    let w = |f: fn(&CutoffMetrics) -> f64| {
                        reports.iter().map(|(n, rep)| *n as f64 * f(&rep[r][i])).sum::<f64>() / total as f64
                    };
                    CutoffMetrics {
                        k,
                        recall_pct: w(|m| m.recall_pct),
                        ndcg_pct: w(|m| m.ndcg_pct),
                    }
                })
                .collect()
        })
        .collect();
    let mean = cfg
        .cutoffs
        .iter()
        .enumerate()
        .map(|(i, &k)| CutoffMetrics {
            k,
            recall_pct: repeats.iter().map(|r| r[i].recall_pct).sum::<f64>() / repeats.len() as f64,
            ndcg_pct: repeats.iter().map(|r| r[i].ndcg_pct).sum::<f64>() / repeats.len() as f64,
        })
        .collect();
    let name = checkpoint.meta.source_domain.clone();
    Ok(EvalReport {
        variant: variant_label(checkpoint, bank.is_some()),
        source_domain: name.clone(),
        target_domain: name,
        cutoffs: mean,
        repeats,
        n_users: total,
        seed: cfg.seed,
    })
}
