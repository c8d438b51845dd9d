//! End-to-end wiring: train a variant on a source domain, then evaluate it
//! zero-shot on a disjoint target domain.

use thiserror::Error;

use crate::config::{ConfigError, RunConfig, Variant};
use crate::corpus::{split, Corpus, CorpusError, DomainId, SplitSpec};
use crate::evalkit::{self, Diagnostics, EvalConfig, EvalError, EvalReport, ProbeConfig};
use crate::model::{Checkpoint, CheckpointMeta, ModelError, ModelParams};
use crate::patterns::{fingerprint, PatternBank, PatternError};
use crate::semstore::{BoundEmbeddings, SemStoreError};
use crate::trainer::{gen_domains, train, TrainData, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    SemStore(#[from] SemStoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Split users whose whole sequence lies in `domain`.
pub fn domain_split(corpus: &Corpus, domain: DomainId) -> SplitSpec {
    let mut s = split(corpus);
    let before = s.users.len();
    s.users
        .retain(|u| corpus.users()[u.user].items.iter().all(|&i| corpus.item_domain(i) == domain));
    if s.users.len() < before {
        log::info!(
            "{} users outside domain {} left out of training",
            before - s.users.len(),
            corpus.domain_name(domain)
        );
    }
    s
}

/// Embedding rows for `items`, in that order.
pub fn select_rows(emb: &BoundEmbeddings, items: &[usize]) -> Result<BoundEmbeddings, SemStoreError> {
    let data = items.iter().flat_map(|&i| emb.row(i).iter().copied()).collect();
    BoundEmbeddings::from_rows(emb.dim(), data)
}

pub fn lookup_domain(corpus: &Corpus, name: &str) -> Result<DomainId, CorpusError> {
    corpus
        .domain_id(name)
        .ok_or_else(|| CorpusError::UnknownDomain(name.to_string()))
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    /// Present when the variant uses fusion; fingerprinted against `checkpoint`.
    pub bank: Option<PatternBank>,
    pub outcome: TrainOutcome,
    pub variant: Variant,
}

impl Trained {
    pub fn fingerprint(&self, corpus: &Corpus) -> [u8; 32] {
        fingerprint(&corpus.digest(), &self.checkpoint.to_bytes())
    }
}

/// Trains `variant` on the users of `source` in `corpus`.
pub fn train_variant(
    corpus: &Corpus,
    emb: &BoundEmbeddings,
    source: &str,
    run: &RunConfig,
    variant: Variant,
) -> Result<Trained, PipelineError> {
    let source_id = lookup_domain(corpus, source)?;
    let spec = run.model_spec(emb.dim());
    let encoder = spec.encoder;
    let init = ModelParams::init(spec, run.seed, run.fusion_init)?;
    let cfg = variant.apply(&run.train_config()?);
    let sp = domain_split(corpus, source_id);
    let data = TrainData {
        corpus,
        emb,
        gen_domains: gen_domains(corpus, &sp, cfg.purity),
        split: &sp,
    };
    let outcome = train(&data, init, &cfg)?;
    let checkpoint = Checkpoint {
        params: outcome.params.clone(),
        meta: CheckpointMeta {
            variant: variant.label(encoder),
            source_domain: source.to_string(),
            fusion: cfg.fusion.enabled,
        },
    };
    let fp = fingerprint(&corpus.digest(), &checkpoint.to_bytes());
    let bank = outcome.bank.clone().map(|mut b| {
        b.fingerprint = fp;
        b
    });
    Ok(Trained {
        checkpoint,
        bank,
        outcome,
        variant,
    })
}

/// Zero-shot evaluation of a checkpoint trained on `source_corpus` against
/// the `target` domain of `target_corpus`. The bank, if given, must carry the
/// fingerprint of `source_corpus` and `checkpoint`.
pub fn zero_shot(
    checkpoint: &Checkpoint,
    bank: Option<&PatternBank>,
    source_corpus: &Corpus,
    target_corpus: &Corpus,
    target_emb: &BoundEmbeddings,
    target: &str,
    cfg: &EvalConfig,
) -> Result<EvalReport, PipelineError> {
    let src = source_corpus.restrict_to_domain(&checkpoint.meta.source_domain)?;
    let tgt_id = lookup_domain(target_corpus, target)?;
    let tgt = target_corpus.restrict_to_domain(target)?;
    let tgt_emb = select_rows(target_emb, &target_corpus.items_in_domain(tgt_id))?;
    let expected = fingerprint(&source_corpus.digest(), &checkpoint.to_bytes());
    Ok(evalkit::zero_shot_eval(
        checkpoint,
        bank.map(|b| (b, expected)),
        &src,
        &tgt,
        &tgt_emb,
        cfg,
    )?)
}

/// Diagnostics over every item of `corpus` projected by `params`. Returns the
/// summary and `(item_id, domain, [x, y])` PCA rows.
pub fn projected_diagnostics(
    params: &ModelParams,
    corpus: &Corpus,
    emb: &BoundEmbeddings,
    probe: &ProbeConfig,
) -> Result<(Diagnostics, Vec<(String, String, [f64; 2])>), PipelineError> {
    let rows: Vec<Vec<f64>> = (0..corpus.n_items()).map(|i| params.project_f64(emb.row(i))).collect();
    let dom: Vec<usize> = (0..corpus.n_items()).map(|i| corpus.item_domain(i).index()).collect();
    let (d, pca) = evalkit::embedding_diagnostics(&rows, &dom, corpus.domains().len(), probe)?;
    let pca_rows = pca
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let it = corpus.item(i);
            (it.item_id.clone(), corpus.domain_name(it.domain).to_string(), p)
        })
        .collect();
    Ok((d, pca_rows))
}
