//! `zsrec`: train on one domain, recommend zero-shot in another.

mod error;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zsrec_core::config::{RunConfig, Variant};
use zsrec_core::corpus::{
    ingest_with_report, load_prepared, split, synthesize, write_split_manifest, Corpus, IngestOptions,
    INTERACTIONS_FILE, METADATA_FILE,
};
use zsrec_core::evalkit::{in_domain_eval, write_metrics_csv, write_pca_csv, EvalReport, ProbeConfig};
use zsrec_core::model::{Checkpoint, CheckpointMeta};
use zsrec_core::objective::{domain_centers, DomainEmbeddings};
use zsrec_core::patterns::{fingerprint, PatternBank};
use zsrec_core::pipeline::{projected_diagnostics, train_variant, zero_shot, PipelineError};
use zsrec_core::semstore::{BoundEmbeddings, SemanticStore};
use zsrec_core::trainer::TrainError;

use error::CliError;
use manifest::RunManifest;

const CORPUS_DIR: &str = "corpus";
const SPLIT_FILE: &str = "split.tsv";
const SEMB_FILE: &str = "embeddings.semb";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const PATTERNS_FILE: &str = "patterns.ptrn";
const LOSS_LOG_FILE: &str = "loss_log.csv";

#[derive(Parser)]
#[command(name = "zsrec", version, about = "Zero-shot cross-domain sequential recommendation")]
struct Cli {
    /// Flat TOML run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split raw interaction logs.
    Prepare(PrepareArgs),
    /// Generate a two-domain synthetic corpus with embeddings.
    Synth(SynthArgs),
    /// Train a model variant on one source domain.
    Train(TrainArgs),
    /// Evaluate in-domain, or zero-shot on a target domain.
    Eval(EvalArgs),
    /// Embedding diagnostics and a 2D PCA projection.
    Analyze(AnalyzeArgs),
    /// Print the header of an embedding file.
    SembInfo(SembInfoArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// TSV of `user_id<TAB>item_id<TAB>timestamp`.
    #[arg(long)]
    interactions: PathBuf,
    /// JSONL item metadata.
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long)]
    min_interactions: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    bias_strength: Option<f64>,
    /// Comma-separated bias strengths; one corpus per value.
    #[arg(long, value_delimiter = ',')]
    bias_sweep: Option<Vec<f64>>,
}

#[derive(Args)]
struct CorpusArgs {
    /// Directory holding interactions.tsv and metadata.jsonl.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: CorpusArgs,
    /// Domain whose users are trained on.
    #[arg(long)]
    source: String,
    /// sem, recg, no-ig, no-id, no-ic or no-sg.
    #[arg(long, default_value = "recg")]
    variant: Variant,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Corpus and embeddings the checkpoint was trained on.
    #[command(flatten)]
    data: CorpusArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pattern bank; required when the checkpoint was trained with fusion.
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Target domain; switches to zero-shot mode.
    #[arg(long)]
    target: Option<String>,
    /// Corpus holding the target domain (defaults to --corpus).
    #[arg(long, requires = "target")]
    target_corpus: Option<PathBuf>,
    /// Embeddings for the target corpus (defaults to --embeddings).
    #[arg(long, requires = "target")]
    target_embeddings: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    report: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: CorpusArgs,
    #[arg(long, required_unless_present = "compare", conflicts_with = "compare")]
    checkpoint: Option<PathBuf>,
    /// Two checkpoints analysed side by side.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    compare: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct SembInfoArgs {
    path: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::SembInfo(a) = &cli.command {
        return semb_info(&a.path);
    }
    fs::create_dir_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
    let mut m = RunManifest::new(command_name(&cli.command), cfg.seed, String::new());
    if let Some(p) = &cli.config {
        m.input(p)?;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::Prepare(a) => prepare(&mut cfg, a, out, &mut m)?,
        Command::Synth(a) => synth(&mut cfg, a, out, &mut m)?,
        Command::Train(a) => train(&mut cfg, a, out, &mut m)?,
        Command::Eval(a) => eval(&cfg, a, out, &mut m)?,
        Command::Analyze(a) => analyze(&cfg, a, out, &mut m)?,
        Command::SembInfo(_) => unreachable!(),
    }
    m.config = cfg.to_toml();
    let path = m.write(out)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Prepare(_) => "prepare",
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Analyze(_) => "analyze",
        Command::SembInfo(_) => "semb-info",
    }
}

fn corpus_outputs(dir: &Path, m: &mut RunManifest) -> Result<(), CliError> {
    m.output(&dir.join(INTERACTIONS_FILE))?;
    m.output(&dir.join(METADATA_FILE))
}

fn prepare(cfg: &mut RunConfig, a: PrepareArgs, out: &Path, m: &mut RunManifest) -> Result<(), CliError> {
    if let Some(n) = a.min_interactions {
        cfg.min_interactions = n;
    }
    m.input(&a.interactions)?;
    m.input(&a.metadata)?;
    m.stage("ingest");
    let opts = IngestOptions {
        min_interactions: cfg.min_interactions,
        ..Default::default()
    };
    let (corpus, report) = ingest_with_report(&a.interactions, &a.metadata, &opts)?;
    log::info!(
        "{} users, {} items; dropped {} users and {} items, {} text-less items, {} unknown rows",
        corpus.n_users(),
        corpus.n_items(),
        report.dropped_users,
        report.dropped_items,
        report.textless_items,
        report.unknown_item_rows
    );
    m.stage("write");
    let dir = out.join(CORPUS_DIR);
    corpus.write_dir(&dir)?;
    corpus_outputs(&dir, m)?;
    let sp = split(&corpus);
    let split_path = out.join(SPLIT_FILE);
    write_split_manifest(&corpus, &sp, &split_path)?;
    m.output(&split_path)
}

fn center_distance(corpus: &Corpus, store: &SemanticStore) -> Result<f64, CliError> {
    let emb = store.bind(corpus)?;
    let data: Vec<f64> = (0..corpus.n_items())
        .flat_map(|i| emb.row(i).iter().map(|&v| v as f64))
        .collect();
    let dom: Vec<usize> = (0..corpus.n_items()).map(|i| corpus.item_domain(i).index()).collect();
    let de = DomainEmbeddings::new(&data, emb.dim(), &dom, corpus.domains().len())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let c = domain_centers(&de).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c[0].iter().zip(&c[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

fn write_synth(cfg: &RunConfig, dir: &Path, m: &mut RunManifest) -> Result<f64, CliError> {
    let (corpus, store) = synthesize(&cfg.synth_config()?)?;
    let cdir = dir.join(CORPUS_DIR);
    corpus.write_dir(&cdir)?;
    corpus_outputs(&cdir, m)?;
    let semb = dir.join(SEMB_FILE);
    store.write(&semb)?;
    m.output(&semb)?;
    center_distance(&corpus, &store)
}

fn synth(cfg: &mut RunConfig, a: SynthArgs, out: &Path, m: &mut RunManifest) -> Result<(), CliError> {
    if let Some(b) = a.bias_strength {
        cfg.bias_strength = b;
    }
    m.stage("synthesize");
    let Some(sweep) = a.bias_sweep else {
        let d = write_synth(cfg, out, m)?;
        log::info!("domain center distance {d:.4}");
        return Ok(());
    };
    let mut csv = String::from("bias_strength,center_distance\n");
    let mut last = f64::NEG_INFINITY;
    for b in sweep {
        let run = RunConfig {
            bias_strength: b,
            ..cfg.clone()
        };
        let dir = out.join(format!("bias-{b}"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let d = write_synth(&run, &dir, m)?;
        if d < last {
            log::warn!("center distance fell from {last:.4} to {d:.4} at bias {b}");
        }
        last = d;
        csv.push_str(&format!("{b},{d}\n"));
    }
    let path = out.join("bias_sweep.csv");
    fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    m.output(&path)
}

fn load_data(a: &CorpusArgs, m: &mut RunManifest) -> Result<(Corpus, BoundEmbeddings), CliError> {
    m.input(&a.corpus.join(INTERACTIONS_FILE))?;
    m.input(&a.corpus.join(METADATA_FILE))?;
    m.input(&a.embeddings)?;
    let corpus = load_prepared(&a.corpus)?;
    let emb = SemanticStore::load(&a.embeddings)?.bind(&corpus)?;
    Ok((corpus, emb))
}

fn train(cfg: &mut RunConfig, a: TrainArgs, out: &Path, m: &mut RunManifest) -> Result<(), CliError> {
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    m.stage("load");
    let (corpus, emb) = load_data(&a.data, m)?;
    m.stage("train");
    let trained = match train_variant(&corpus, &emb, &a.source, cfg, a.variant) {
        Ok(t) => t,
        Err(PipelineError::Train(TrainError::Divergence { epoch, step, last_good })) => {
            let path = out.join("checkpoint.last_good.bin");
            let ckpt = Checkpoint {
                params: *last_good,
                meta: CheckpointMeta {
                    variant: a.variant.label(cfg.encoder),
                    source_domain: a.source.clone(),
                    fusion: false,
                },
            };
            ckpt.save(&path)?;
            log::error!("last good parameters saved to {}", path.display());
            return Err(TrainError::Divergence {
                epoch,
                step,
                last_good: Box::new(ckpt.params),
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    m.stage("write");
    let ckpt_path = out.join(CHECKPOINT_FILE);
    trained.checkpoint.save(&ckpt_path)?;
    m.output(&ckpt_path)?;
    if let Some(bank) = &trained.bank {
        let p = out.join(PATTERNS_FILE);
        bank.save(&p)?;
        m.output(&p)?;
    }
    let log_path = out.join(LOSS_LOG_FILE);
    trained
        .outcome
        .loss_log
        .write_csv(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    m.output(&log_path)?;
    log::info!(
        "{}: best epoch {:?} of {}",
        trained.checkpoint.meta.variant,
        trained.outcome.best_epoch,
        trained.outcome.epochs.len()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, a: EvalArgs, out: &Path, m: &mut RunManifest) -> Result<(), CliError> {
    m.stage("load");
    let (corpus, emb) = load_data(&a.data, m)?;
    m.input(&a.checkpoint)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let bank = match &a.patterns {
        Some(p) => {
            m.input(p)?;
            Some(PatternBank::load(p)?)
        }
        None if ckpt.meta.fusion => {
            return Err(CliError::Usage(format!(
                "{} was trained with fusion; pass --patterns",
                a.checkpoint.display()
            )))
        }
        None => None,
    };
    let ecfg = cfg.eval_config()?;
    m.stage("evaluate");
    let report: EvalReport = match &a.target {
        None => {
            if let Some(b) = &bank {
                b.check_fingerprint(&fingerprint(&corpus.digest(), &ckpt.to_bytes()))?;
            }
            in_domain_eval(&ckpt, bank.as_ref(), &corpus, &emb, &ecfg)?
        }
        Some(target) => {
            let t_corpus = match &a.target_corpus {
                Some(dir) => {
                    m.input(&dir.join(INTERACTIONS_FILE))?;
                    m.input(&dir.join(METADATA_FILE))?;
                    load_prepared(dir)?
                }
                None => corpus.clone(),
            };
            let t_emb = match (&a.target_embeddings, &a.target_corpus) {
                (Some(p), _) => {
                    m.input(p)?;
                    SemanticStore::load(p)?.bind(&t_corpus)?
                }
                (None, Some(_)) => SemanticStore::load(&a.data.embeddings)?.bind(&t_corpus)?,
                (None, None) => emb.clone(),
            };
            zero_shot(&ckpt, bank.as_ref(), &corpus, &t_corpus, &t_emb, target, &ecfg)?
        }
    };
    for c in &report.cutoffs {
        println!("{}\tR@{} {:.2}\tN@{} {:.2}", report.variant, c.k, c.recall_pct, c.k, c.ndcg_pct);
    }
    let path = out.join(&a.report);
    report.write_json(&path)?;
    m.output(&path)
}

fn analyze(cfg: &RunConfig, a: AnalyzeArgs, out: &Path, m: &mut RunManifest) -> Result<(), CliError> {
    m.stage("load");
    let (corpus, emb) = load_data(&a.data, m)?;
    let paths = match (a.checkpoint, a.compare) {
        (Some(p), None) => vec![p],
        (None, Some(ps)) => ps,
        _ => return Err(CliError::Usage("pass --checkpoint or --compare A B".into())),
    };
    let single = paths.len() == 1;
    let probe = ProbeConfig {
        seed: cfg.seed,
        ..Default::default()
    };
    let mut columns: Vec<(String, Vec<(String, f64)>)> = Vec::new();
    for p in &paths {
        m.input(p)?;
        let ckpt = Checkpoint::load(p)?;
        m.stage(&format!("diagnostics {}", p.display()));
        let (d, pca) = projected_diagnostics(&ckpt.params, &corpus, &emb, &probe)?;
        for w in &d.warnings {
            log::warn!("{w}");
        }
        let suffix = if single {
            String::new()
        } else {
            format!("_{}", p.file_stem().unwrap_or_default().to_string_lossy())
        };
        let metrics_path = out.join(format!("diagnostics{suffix}.csv"));
        write_metrics_csv(&metrics_path, &d.rows())?;
        m.output(&metrics_path)?;
        let pca_path = out.join(format!("pca{suffix}.csv"));
        write_pca_csv(&pca_path, &pca)?;
        m.output(&pca_path)?;
        columns.push((ckpt.meta.variant.clone(), d.rows()));
    }
    let mut header = String::from("metric");
    for (label, _) in &columns {
        header.push('\t');
        header.push_str(label);
    }
    println!("{header}");
    for (i, (name, _)) in columns[0].1.iter().enumerate() {
        let vals: Vec<String> = columns.iter().map(|(_, r)| format!("{:.4}", r[i].1)).collect();
        println!("{name}\t{}", vals.join("\t"));
    }
    if !single {
        let mut csv = format!("metric,{},{}\n", columns[0].0, columns[1].0);
        for (i, (name, v)) in columns[0].1.iter().enumerate() {
            csv.push_str(&format!("{name},{v},{}\n", columns[1].1[i].1));
        }
        let path = out.join("comparison.csv");
        fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
        m.output(&path)?;
    }
    Ok(())
}

fn semb_info(path: &Path) -> Result<(), CliError> {
    let store = SemanticStore::load(path)?;
    let digest = manifest::sha256_file(path)?;
    let preview: Vec<&str> = store.ids().iter().take(3).map(|s| s.as_str()).collect();
    let info = serde_json::json!({
        "path": path.display().to_string(),
        "dim": store.dim(),
        "count": store.len(),
        "sha256": digest,
        "first_ids": preview,
    });
    println!("{}", serde_json::to_string_pretty(&info).expect("json"));
    Ok(())
}
