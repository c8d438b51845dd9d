//! Mini-batch training with Adam, early stopping on validation N@10 and the
//! pattern-fusion warm phase at the end of training.

mod adam;
mod step;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, DomainId, SplitSpec, UserSplit};
use crate::evalkit::{self, EvalCase, EvalError, Scorer, TieRule};
use crate::model::{ModelError, ModelParams};
use crate::objective::{GenLossConfig, LossBreakdown, LossLog, ObjectiveError};
use crate::patterns::{extract_patterns, PatternBank, PatternError, DEFAULT_K};
use crate::semstore::BoundEmbeddings;

pub use adam::{AdamConfig, AdamState};
pub use step::{forward_backward, StepContext, TrainBatch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no user has a training prefix of at least two items")]
    NoTrainableUsers,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence {
        epoch: usize,
        step: usize,
        last_good: Box<ModelParams>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which domains feed the generalization losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Purity {
    /// Only domains that have training users.
    Strict,
    /// Every domain in the corpus; target items join through their metadata
    /// embeddings only, never through interactions.
    #[default]
    Metadata,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub enabled: bool,
    pub k: usize,
    /// Share of the final epochs that route users through attend + fuse.
    pub warm_fraction: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k: DEFAULT_K,
            warm_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    /// Epochs without validation N@10 improvement before stopping.
    pub patience: Option<usize>,
    pub val_negatives: usize,
    /// `None` disables both generalization terms.
    pub gen: Option<GenLossConfig>,
    pub purity: Purity,
    pub fusion: FusionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 20,
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip: None,
            patience: Some(5),
            val_negatives: 100,
            gen: Some(GenLossConfig::default()),
            purity: Purity::Metadata,
            fusion: FusionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be >= 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be finite and >= 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config("grad_clip must be > 0".into()));
            }
        }
        if let Some(g) = &self.gen {
            g.validate()?;
        }
        if self.fusion.enabled && (self.fusion.k == 0 || !(0.0..=1.0).contains(&self.fusion.warm_fraction)) {
            return Err(TrainError::Config("fusion needs k >= 1 and warm_fraction in [0, 1]".into()));
        }
        Ok(())
    }

    /// First epoch of the fusion warm phase (`epochs` when fusion is off).
    pub fn warm_start(&self) -> usize {
        if !self.fusion.enabled || self.epochs == 0 {
            return self.epochs;
        }
        let warm = ((self.epochs as f64 * self.fusion.warm_fraction).ceil() as usize).clamp(1, self.epochs);
        self.epochs - warm
    }
}

/// Training inputs: the corpus, its bound embeddings, the users to train on
/// and the domains that enter the generalization losses.
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub emb: &'a BoundEmbeddings,
    pub split: &'a SplitSpec,
    pub gen_domains: Vec<DomainId>,
}

/// Domains for the generalization losses under `purity`.
pub fn gen_domains(corpus: &Corpus, split: &SplitSpec, purity: Purity) -> Vec<DomainId> {
    match purity {
        Purity::Metadata => (0..corpus.domains().len() as u32).map(DomainId).collect(),
        Purity::Strict => {
            let mut seen: Vec<DomainId> = split
                .users
                .iter()
                .flat_map(|u| u.prefix.iter().map(|&i| corpus.item_domain(i)))
                .collect();
            seen.sort();
            seen.dedup();
            seen
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_rec: f64,
    pub mean_total: f64,
    pub val_ndcg10: f64,
    pub fused: bool,
    pub eligible: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best eligible epoch.
    pub params: ModelParams,
    /// Bank extracted from `params` (fingerprint left zeroed).
    pub bank: Option<PatternBank>,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochStats>,
    pub loss_log: LossLog,
}

struct Sampler<'a> {
    corpus: &'a Corpus,
    domain_pools: Vec<Vec<usize>>,
    gen_slot: Vec<Option<usize>>,
    gen_domains: &'a [DomainId],
    max_seq_len: usize,
}

impl<'a> Sampler<'a> {
    fn new(data: &'a TrainData<'a>, max_seq_len: usize) -> Self {
        let nd = data.corpus.domains().len();
        let domain_pools = (0..nd)
            .map(|d| data.corpus.items_in_domain(DomainId(d as u32)))
            .collect();
        let mut gen_slot = vec![None; nd];
        for (s, d) in data.gen_domains.iter().enumerate() {
            gen_slot[d.index()] = Some(s);
        }
        Self {
            corpus: data.corpus,
            domain_pools,
            gen_slot,
            gen_domains: &data.gen_domains,
            max_seq_len,
        }
    }

    fn batch(&self, users: &[&UserSplit], gen: Option<&GenLossConfig>, rng: &mut ChaCha8Rng) -> TrainBatch {
        let mut b = TrainBatch {
            n_gen_domains: self.gen_domains.len(),
            ..Default::default()
        };
        for u in users {
            let start = u.prefix.len().saturating_sub(self.max_seq_len + 1);
            let window = u.prefix[start..].to_vec();
            let seen: HashSet<usize> = self.corpus.users()[u.user].items.iter().copied().collect();
            let negs = window[1..]
                .iter()
                .map(|&pos| {
                    let pool = &self.domain_pools[self.corpus.item_domain(pos).index()];
                    let free = pool.len() - pool.iter().filter(|i| seen.contains(i)).count();
                    if free == 0 {
                        return pos;
                    }
                    loop {
                        let c = pool[rng.gen_range(0..pool.len())];
                        if !seen.contains(&c) {
                            return c;
                        }
                    }
                })
                .collect();
            b.windows.push(window);
            b.negatives.push(negs);
        }
        if let Some(g) = gen {
            let mut items: Vec<usize> = b
                .windows
                .iter()
                .flatten()
                .chain(b.negatives.iter().flatten())
                .copied()
                .filter(|&i| self.gen_slot[self.corpus.item_domain(i).index()].is_some())
                .collect();
            for d in self.gen_domains {
                let pool = &self.domain_pools[d.index()];
                let n = g.sample_size.min(pool.len());
                items.extend(pool.choose_multiple(rng, n).copied());
            }
            items.sort_unstable();
            items.dedup();
            b.gen_slots = items
                .iter()
                .map(|&i| self.gen_slot[self.corpus.item_domain(i).index()].expect("gen item"))
                .collect();
            b.gen_items = items;
        }
        b
    }
}

/// Representations of every user's training prefix under `params`.
pub fn source_user_reprs(params: &ModelParams, emb: &BoundEmbeddings, split: &SplitSpec) -> Result<Vec<Vec<f64>>, ModelError> {
    split
        .users
        .par_iter()
        .map(|u| {
            let xs: Vec<Vec<f64>> = u.prefix.iter().map(|&i| params.project_f64(emb.row(i))).collect();
            let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
            params.encode_f64(&refs)
        })
        .collect()
}

/// k-means bank over the source users' prefix representations.
pub fn build_bank(
    params: &ModelParams,
    emb: &BoundEmbeddings,
    split: &SplitSpec,
    k: usize,
    seed: u64,
) -> Result<PatternBank, TrainError> {
    let reprs = source_user_reprs(params, emb, split)?;
    Ok(extract_patterns(&reprs, k, seed, [0; 32])?)
}

struct Validation {
    cases: Vec<EvalCase>,
    negatives: Vec<Vec<usize>>,
}

impl Validation {
    fn new(data: &TrainData<'_>, n_neg: usize, seed: u64) -> Result<Self, TrainError> {
        let cases = evalkit::validation_cases(data.corpus, data.split);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let nd = data.corpus.domains().len();
        let pools: Vec<Vec<usize>> = (0..nd)
            .map(|d| data.corpus.items_in_domain(DomainId(d as u32)))
            .collect();
        let mut negatives = Vec::with_capacity(cases.len());
        for c in &cases {
            let pool = &pools[data.corpus.item_domain(c.truth).index()];
            let n = evalkit::draw_negatives(std::slice::from_ref(c), pool, n_neg, &mut rng)?;
            negatives.push(n.into_iter().next().unwrap_or_default());
        }
        Ok(Self { cases, negatives })
    }

    fn ndcg10(&self, params: &ModelParams, bank: Option<&PatternBank>, emb: &BoundEmbeddings) -> Result<f64, TrainError> {
        if self.cases.is_empty() {
            return Ok(0.0);
        }
        let scorer = Scorer::new(params, bank, emb)?;
        let ranks = scorer.ranks(&self.cases, &self.negatives, TieRule::Pessimistic)?;
        Ok(evalkit::metrics(&ranks, &[10])[0].ndcg_pct)
    }
}

/// Runs the epoch loop and returns the best eligible epoch's parameters. With
/// fusion on, only warm-phase epochs are eligible and early stopping is only
/// checked inside the warm phase.
pub fn train(data: &TrainData<'_>, init: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if data.emb.dim() != init.d_h() {
        return Err(ModelError::DimMismatch {
            what: "semantic store dim",
            expected: init.d_h(),
            found: data.emb.dim(),
        }
        .into());
    }
    let trainable: Vec<&UserSplit> = data.split.users.iter().filter(|u| u.prefix.len() >= 2).collect();
    if trainable.is_empty() {
        return Err(TrainError::NoTrainableUsers);
    }
    if cfg.gen.is_some() && data.gen_domains.is_empty() {
        return Err(TrainError::Config("generalization losses need at least one domain".into()));
    }
    let sampler = Sampler::new(data, init.spec.max_seq_len);
    let validation = Validation::new(data, cfg.val_negatives, cfg.seed)?;
    let warm_start = cfg.warm_start();
    let gen = cfg.gen.as_ref();
    let ctx_base = StepContext {
        emb: data.emb,
        gen,
        n_corpus_items: data.gen_domains.iter().map(|&d| sampler.domain_pools[d.index()].len()).sum(),
        bank: None,
    };

    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut bank: Option<PatternBank> = None;
    let mut log = LossLog::default();
    let mut stats = Vec::new();
    let mut best: Option<(f64, usize, ModelParams, Option<PatternBank>)> = None;
    let mut since_best = 0;
    let mut step_no = 0;
    let batch_size = cfg.batch_size.min(trainable.len()).max(1);

    for epoch in 0..cfg.epochs {
        let fused = cfg.fusion.enabled && epoch >= warm_start;
        if fused && bank.is_none() {
            bank = Some(build_bank(&params, data.emb, data.split, cfg.fusion.k, cfg.seed)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order = trainable.clone();
        order.shuffle(&mut rng);
        let (mut sum_rec, mut sum_total, mut n_batches) = (0.0, 0.0, 0usize);
        for users in order.chunks(batch_size) {
            let batch = sampler.batch(users, gen, &mut rng);
            let ctx = StepContext {
                bank: if fused { bank.as_ref() } else { None },
                ..ctx_base
            };
            let result = forward_backward(&params, &batch, &ctx, true);
            let (losses, grads) = match result {
                Ok((l, Some(g))) if l.total.is_finite() => (l, g),
                Err(TrainError::NonFiniteGradient(_)) | Err(TrainError::Objective(ObjectiveError::NonFinite(_))) | Ok(_) => {
                    return Err(TrainError::Divergence {
                        epoch,
                        step: step_no,
                        last_good: Box::new(params),
                    })
                }
                Err(e) => return Err(e),
            };
            let mut grads = grads;
            if let Some(c) = cfg.grad_clip {
                let n = grads.global_norm();
                if n > c {
                    grads.scale(c / n);
                }
            }
            adam.step(&mut params, &grads, cfg.learning_rate, &cfg.adam);
            if !params.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    step: step_no,
                    last_good: Box::new(params),
                });
            }
            log.push(step_no, losses);
            step_no += 1;
            sum_rec += losses.rec;
            sum_total += losses.total;
            n_batches += 1;
        }
        if fused {
            bank = Some(build_bank(&params, data.emb, data.split, cfg.fusion.k, cfg.seed)?);
        }
        let val = validation.ndcg10(&params, if fused { bank.as_ref() } else { None }, data.emb)?;
        let eligible = !cfg.fusion.enabled || fused;
        stats.push(EpochStats {
            epoch,
            mean_rec: sum_rec / n_batches.max(1) as f64,
            mean_total: sum_total / n_batches.max(1) as f64,
            val_ndcg10: val,
            fused,
            eligible,
        });
        log::info!(
            "epoch {epoch}: L_rec {:.5} L_total {:.5} val N@10 {val:.3}{}",
            sum_rec / n_batches.max(1) as f64,
            sum_total / n_batches.max(1) as f64,
            if fused { " (fused)" } else { "" }
        );
        if !eligible {
            continue;
        }
        if best.as_ref().map_or(true, |b| val > b.0) {
            best = Some((val, epoch, params.clone(), if fused { bank.clone() } else { None }));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, params, bank) = match best {
        Some((_, e, p, b)) => (Some(e), p, b),
        None => (None, params, None),
    };
    Ok(TrainOutcome {
        params,
        bank,
        best_epoch,
        epochs: stats,
        loss_log: log,
    })
}

/// Mean of the logged losses; handy for reporting.
pub fn mean_losses(log: &LossLog) -> LossBreakdown {
    let n = log.rows.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for (_, l) in &log.rows {
        m.rec += l.rec / n;
        m.intra += l.intra / n;
        m.inter += l.inter / n;
        m.beta += l.beta / n;
        m.total += l.total / n;
    }
    m
}

#[cfg(test)]
mod tests;
