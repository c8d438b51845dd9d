use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
n_items = 120
n_users = 150
d_h = 16
d_l = 8
n_latent_topics = 6
epochs = 2
k = 4
val_negatives = 20
n_negatives = 20
n_repeats = 2
inter_mode = "include-own"
"#;

fn zsrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsrec"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn output_hashes(manifest: &Path) -> Vec<String> {
    json(manifest)["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["sha256"].as_str().unwrap().to_string())
        .collect()
}

/// A temp dir with `small.toml` and a synthesized corpus under `synth/`.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(&zsrec(dir.path(), &["--config", "small.toml", "--out", "synth", "synth"]));
    dir
}

fn train(dir: &Path, variant: &str, out: &str) -> PathBuf {
    ok(&zsrec(
        dir,
        &[
            "--config", "small.toml", "--out", out, "train", "--corpus", "synth/corpus", "--embeddings",
            "synth/embeddings.semb", "--source", "A", "--variant", variant,
        ],
    ));
    dir.join(out)
}

#[test]
fn synth_is_reproducible() {
    let dir = workspace();
    let d = dir.path();
    assert!(d.join("synth/corpus/interactions.tsv").exists());
    assert!(d.join("synth/embeddings.semb").exists());
    ok(&zsrec(d, &["--config", "small.toml", "--out", "again", "synth"]));
    assert_eq!(
        output_hashes(&d.join("synth/synth.manifest.json")),
        output_hashes(&d.join("again/synth.manifest.json"))
    );
    ok(&zsrec(d, &["--config", "small.toml", "--seed", "9", "--out", "other", "synth"]));
    assert_ne!(
        output_hashes(&d.join("synth/synth.manifest.json")),
        output_hashes(&d.join("other/synth.manifest.json"))
    );
}

#[test]
fn bias_sweep_centers_move_apart() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(&zsrec(dir.path(), &["--config", "small.toml", "--out", "sweep", "synth", "--bias-sweep", "0,1,3,5"]));
    let csv = fs::read_to_string(dir.path().join("sweep/bias_sweep.csv")).unwrap();
    let dists: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(dists.len(), 4);
    assert!(dists.windows(2).all(|w| w[1] > w[0]), "{dists:?}");
    assert!(dir.path().join("sweep/bias-3/embeddings.semb").exists());
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = workspace();
    let d = dir.path();
    let sem = train(d, "sem", "sem");
    let recg = train(d, "recg", "recg");
    assert!(!sem.join("patterns.ptrn").exists());
    assert!(recg.join("patterns.ptrn").exists());
    let log = fs::read_to_string(recg.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("step,L_rec,L_intra,L_inter,beta,L_total"));

    // Same seed, same checkpoint.
    let again = train(d, "recg", "recg2");
    assert_eq!(fs::read(recg.join("checkpoint.bin")).unwrap(), fs::read(again.join("checkpoint.bin")).unwrap());

    let base = ["--config", "small.toml", "--corpus", "synth/corpus", "--embeddings", "synth/embeddings.semb"];
    let mut args = vec!["--out", "eval", "eval", "--checkpoint", "recg/checkpoint.bin", "--patterns"];
    args.extend(["recg/patterns.ptrn", "--target", "B"]);
    args.extend(base);
    ok(&zsrec(d, &args));
    let report = json(&d.join("eval/report.json"));
    assert_eq!(report["variant"], "GRU-RecG");
    assert_eq!(report["source_domain"], "A");
    assert_eq!(report["target_domain"], "B");
    assert_eq!(report["cutoffs"].as_array().unwrap().len(), 3);
    assert_eq!(report["repeats"].as_array().unwrap().len(), 2);

    let mut args = vec!["--out", "indomain", "eval", "--checkpoint", "sem/checkpoint.bin"];
    args.extend(base);
    ok(&zsrec(d, &args));
    assert_eq!(json(&d.join("indomain/report.json"))["variant"], "GRU-Sem");

    let mut args = vec!["--out", "diag", "analyze", "--checkpoint", "recg/checkpoint.bin"];
    args.extend(base);
    ok(&zsrec(d, &args));
    let diag = fs::read_to_string(d.join("diag/diagnostics.csv")).unwrap();
    assert!(diag.starts_with("metric,value"));
    let pca = fs::read_to_string(d.join("diag/pca.csv")).unwrap();
    assert!(pca.starts_with("item_id,domain,x,y"));
    assert_eq!(pca.lines().count(), 1 + 240);

    let mut args = vec!["--out", "cmp", "analyze", "--compare", "sem/checkpoint.bin", "recg/checkpoint.bin"];
    args.extend(base);
    ok(&zsrec(d, &args));
    let cmp = fs::read_to_string(d.join("cmp/comparison.csv")).unwrap();
    assert!(cmp.starts_with("metric,GRU-Sem,GRU-RecG"));
}

#[test]
fn error_paths_use_documented_exit_codes() {
    let dir = workspace();
    let d = dir.path();
    let recg = train(d, "recg", "recg");
    let base = ["--config", "small.toml", "--corpus", "synth/corpus", "--embeddings", "synth/embeddings.semb"];

    // Target equal to source overlaps.
    let mut args = vec!["--out", "x", "eval", "--checkpoint", "recg/checkpoint.bin", "--patterns"];
    args.extend(["recg/patterns.ptrn", "--target", "A"]);
    args.extend(base);
    assert_eq!(zsrec(d, &args).status.code(), Some(5));

    // Patterns from a different run fail the fingerprint check.
    ok(&zsrec(
        d,
        &[
            "--config", "small.toml", "--seed", "5", "--out", "other", "train", "--corpus", "synth/corpus",
            "--embeddings", "synth/embeddings.semb", "--source", "A",
        ],
    ));
    let mut args = vec!["--out", "x", "eval", "--checkpoint", "recg/checkpoint.bin", "--patterns"];
    args.extend(["other/patterns.ptrn", "--target", "B"]);
    args.extend(base);
    assert_eq!(zsrec(d, &args).status.code(), Some(6));

    // Fusion checkpoint without patterns.
    let mut args = vec!["--out", "x", "eval", "--checkpoint", "recg/checkpoint.bin", "--target", "B"];
    args.extend(base);
    assert_eq!(zsrec(d, &args).status.code(), Some(2));

    // Missing checkpoint.
    let mut args = vec!["--out", "x", "analyze", "--checkpoint", "nope.bin"];
    args.extend(base);
    assert_eq!(zsrec(d, &args).status.code(), Some(4));

    // Corrupt embeddings.
    let mut bytes = fs::read(d.join("synth/embeddings.semb")).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(d.join("bad.semb"), bytes).unwrap();
    assert_eq!(zsrec(d, &["semb-info", "bad.semb"]).status.code(), Some(6));
    let o = zsrec(d, &["semb-info", "synth/embeddings.semb"]);
    ok(&o);
    let info: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(info["dim"], 16);
    assert_eq!(info["count"], 240);

    // Unknown config key.
    fs::write(d.join("bad.toml"), "learning_rat = 0.1\n").unwrap();
    assert_eq!(zsrec(d, &["--config", "bad.toml", "synth"]).status.code(), Some(2));
    assert!(recg.exists());
}

#[test]
fn prepare_filters_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut inter = String::new();
    let mut meta = String::new();
    for i in 0..12 {
        meta.push_str(&format!(
            "{{\"item_id\":\"i{i}\",\"domain\":\"books\",\"title\":\"Book {i}\",\"features\":\"\",\"description\":\"\"}}\n"
        ));
    }
    for u in 0..12 {
        for t in 0..12 {
            inter.push_str(&format!("u{u}\ti{}\t{t}\n", (u + t) % 12));
        }
    }
    fs::write(d.join("inter.tsv"), inter).unwrap();
    fs::write(d.join("meta.jsonl"), meta).unwrap();
    let o = zsrec(d, &["--out", "prep", "prepare", "--interactions", "inter.tsv", "--metadata", "meta.jsonl"]);
    ok(&o);
    assert!(d.join("prep/split.tsv").exists());
    let m = json(&d.join("prep/prepare.manifest.json"));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);

    let o = zsrec(
        d,
        &["--out", "prep2", "prepare", "--interactions", "inter.tsv", "--metadata", "meta.jsonl", "--min-interactions", "50"],
    );
    assert_eq!(o.status.code(), Some(3));
    let o = zsrec(d, &["--out", "prep3", "prepare", "--interactions", "missing.tsv", "--metadata", "meta.jsonl"]);
    assert_eq!(o.status.code(), Some(4));
}
