use super::*;
use crate::corpus::{split, synthesize, SynthConfig};
use crate::model::{EncoderKind, FusionInit, ModelSpec, ParamSet};
use crate::objective::InterMode;
use crate::patterns::PatternBank;
use crate::tensor::Tensor;

fn tiny_params(kind: EncoderKind, seed: u64) -> ModelParams {
    ModelParams::init(ModelSpec::new(5, 3, kind), seed, FusionInit::Random).unwrap()
}

fn tiny_emb(seed: u64) -> BoundEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BoundEmbeddings::from_rows(5, (0..30).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn tiny_batch() -> TrainBatch {
    TrainBatch {
        windows: vec![vec![0, 1, 2], vec![3, 4]],
        negatives: vec![vec![4, 5], vec![1]],
        gen_items: vec![0, 1, 2, 3, 4, 5],
        gen_slots: vec![0, 0, 0, 1, 1, 1],
        n_gen_domains: 2,
    }
}

fn loss_at(params: &ModelParams, batch: &TrainBatch, ctx: &StepContext<'_>) -> f64 {
    forward_backward(params, batch, ctx, false).unwrap().0.total
}

/// Central differences on the f32 parameters, divided by the step actually
/// representable in f32.
fn check_gradients(params: &ModelParams, batch: &TrainBatch, ctx: &StepContext<'_>) -> f64 {
    let (_, g) = forward_backward(params, batch, ctx, true).unwrap();
    let g = g.unwrap();
    let mut worst: f64 = 0.0;
    let names: Vec<&str> = params.weights.tensors().iter().map(|(n, _)| *n).collect();
    for (ti, name) in names.iter().enumerate() {
        let n = params.weights.tensors()[ti].1.len();
        let analytic = g.tensors()[ti].1.as_slice().to_vec();
        let mut numeric = vec![0.0; n];
        for k in 0..n {
            let mut p = params.clone();
            let base = p.weights.tensors()[ti].1.as_slice()[k];
            let up = base + 1e-3;
            let down = base - 1e-3;
            p.weights.tensors_mut()[ti].1.as_mut_slice()[k] = up;
            let fu = loss_at(&p, batch, ctx);
            p.weights.tensors_mut()[ti].1.as_mut_slice()[k] = down;
            let fd = loss_at(&p, batch, ctx);
            numeric[k] = (fu - fd) / (up as f64 - down as f64);
        }
        let scale = numeric.iter().chain(&analytic).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = numeric
            .iter()
            .zip(&analytic)
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{name}: relative error {err}");
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let emb = tiny_emb(1);
    let batch = tiny_batch();
    let gen = GenLossConfig {
        alpha: 0.5,
        tau: 0.5,
        inter_mode: InterMode::IncludeOwn,
        ..Default::default()
    };
    for kind in [EncoderKind::MeanPool, EncoderKind::RecurrentGate] {
        let params = tiny_params(kind, 2);
        let bank = PatternBank {
            centroids: Tensor::from_vec(2, 3, vec![0.5, -0.3, 0.2, -0.1, 0.4, 0.6]),
            inertia: None,
            fingerprint: [0; 32],
        };
        for bank in [None, Some(&bank)] {
            let ctx = StepContext {
                emb: &emb,
                gen: Some(&gen),
                n_corpus_items: 6,
                bank,
            };
            check_gradients(&params, &batch, &ctx);
        }
    }
}

#[test]
fn symmetric_pair_cancels_projection_bias_gradient() {
    let spec = ModelSpec::new(5, 3, EncoderKind::MeanPool);
    let params = ModelParams {
        weights: ParamSet::zeros(&spec),
        spec,
    };
    let emb = BoundEmbeddings::from_rows(5, vec![0.5; 10]).unwrap();
    let batch = TrainBatch {
        windows: vec![vec![0, 1]],
        negatives: vec![vec![1]],
        ..Default::default()
    };
    let ctx = StepContext {
        emb: &emb,
        gen: None,
        n_corpus_items: 2,
        bank: None,
    };
    let (l, g) = forward_backward(&params, &batch, &ctx, true).unwrap();
    assert!((l.rec - 2f64.ln()).abs() < 1e-12);
    assert!(g.unwrap().proj_b.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn literal_two_domain_inter_contributes_nothing() {
    let emb = tiny_emb(4);
    let params = tiny_params(EncoderKind::MeanPool, 3);
    let batch = TrainBatch {
        windows: vec![],
        negatives: vec![],
        ..tiny_batch()
    };
    let only_inter = GenLossConfig {
        use_intra: false,
        ..Default::default()
    };
    let ctx = StepContext {
        emb: &emb,
        gen: Some(&only_inter),
        n_corpus_items: 6,
        bank: None,
    };
    let (l, g) = forward_backward(&params, &batch, &ctx, true).unwrap();
    assert_eq!(l.inter, 0.0);
    for (_, t) in g.unwrap().tensors() {
        assert!(t.as_slice().iter().all(|&v| v == 0.0));
    }
}

fn small_data() -> (Corpus, BoundEmbeddings) {
    let (corpus, store) = synthesize(&SynthConfig {
        n_items: 60,
        n_users: 40,
        d_h: 8,
        n_latent_topics: 4,
        ..Default::default()
    })
    .unwrap();
    let emb = store.bind(&corpus).unwrap();
    (corpus, emb)
}

fn source_split(corpus: &Corpus) -> SplitSpec {
    let mut s = split(corpus);
    s.users.retain(|u| corpus.item_domain(u.test) == DomainId(0));
    s
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs: 3,
        val_negatives: 20,
        fusion: FusionConfig {
            enabled: true,
            k: 4,
            warm_fraction: 0.34,
        },
        gen: Some(GenLossConfig {
            sample_size: 8,
            inter_mode: InterMode::IncludeOwn,
            ..Default::default()
        }),
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (corpus, emb) = small_data();
    let sp = source_split(&corpus);
    let data = TrainData {
        corpus: &corpus,
        emb: &emb,
        gen_domains: gen_domains(&corpus, &sp, Purity::Metadata),
        split: &sp,
    };
    let init = ModelParams::init(ModelSpec::new(8, 4, EncoderKind::RecurrentGate), 0, FusionInit::Random).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        fusion: FusionConfig {
            enabled: false,
            ..Default::default()
        },
        ..small_cfg()
    };
    let out = train(&data, init.clone(), &cfg).unwrap();
    assert_eq!(out.params, init);
}

#[test]
fn training_is_deterministic_and_logs_decompose() {
    let (corpus, emb) = small_data();
    let sp = source_split(&corpus);
    let data = TrainData {
        corpus: &corpus,
        emb: &emb,
        gen_domains: gen_domains(&corpus, &sp, Purity::Metadata),
        split: &sp,
    };
    let init = ModelParams::init(ModelSpec::new(8, 4, EncoderKind::MeanPool), 0, FusionInit::LeftIdentity).unwrap();
    let cfg = small_cfg();
    let a = train(&data, init.clone(), &cfg).unwrap();
    let b = train(&data, init, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.bank, b.bank);
    assert_eq!(a.loss_log, b.loss_log);
    assert!(a.bank.is_some());
    let alpha = cfg.gen.as_ref().unwrap().alpha;
    for (_, l) in &a.loss_log.rows {
        assert!((l.total - (l.rec - alpha * l.intra + l.beta * l.inter)).abs() < 1e-6);
    }
    // Only warm-phase epochs may be selected.
    let best = a.best_epoch.unwrap();
    assert!(a.epochs[best].fused);
}

#[test]
fn oversized_batch_runs_one_step_per_epoch() {
    let (corpus, emb) = small_data();
    let sp = source_split(&corpus);
    let data = TrainData {
        corpus: &corpus,
        emb: &emb,
        gen_domains: vec![DomainId(0)],
        split: &sp,
    };
    let init = ModelParams::init(ModelSpec::new(8, 4, EncoderKind::MeanPool), 0, FusionInit::Random).unwrap();
    let cfg = TrainConfig {
        batch_size: 10_000,
        epochs: 2,
        gen: None,
        fusion: FusionConfig {
            enabled: false,
            ..Default::default()
        },
        ..small_cfg()
    };
    let out = train(&data, init, &cfg).unwrap();
    assert_eq!(out.loss_log.rows.len(), 2);
}

#[test]
fn rec_loss_falls_over_epochs() {
    let (corpus, store) = synthesize(&SynthConfig {
        n_items: 200,
        n_users: 300,
        d_h: 16,
        n_latent_topics: 8,
        ..Default::default()
    })
    .unwrap();
    let emb = store.bind(&corpus).unwrap();
    let sp = source_split(&corpus);
    let data = TrainData {
        corpus: &corpus,
        emb: &emb,
        gen_domains: gen_domains(&corpus, &sp, Purity::Metadata),
        split: &sp,
    };
    let init = ModelParams::init(ModelSpec::new(16, 8, EncoderKind::MeanPool), 0, FusionInit::Random).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        patience: None,
        fusion: FusionConfig {
            enabled: false,
            ..Default::default()
        },
        ..small_cfg()
    };
    let out = train(&data, init, &cfg).unwrap();
    let decreasing = out.epochs.windows(2).filter(|w| w[1].mean_rec < w[0].mean_rec).count();
    assert!(decreasing >= 4, "{:?}", out.epochs);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = TrainConfig {
        batch_size: 1,
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    let bad = TrainConfig {
        learning_rate: -1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn warm_phase_covers_last_fifth() {
    let cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    assert_eq!(cfg.warm_start(), 8);
    let off = TrainConfig {
        fusion: FusionConfig {
            enabled: false,
            ..Default::default()
        },
        ..cfg
    };
    assert_eq!(off.warm_start(), 10);
}
