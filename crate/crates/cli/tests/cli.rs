//! End-to-end tests driving the compiled binary the way a user would:
//! generate logs, build signals, train, index, score, evaluate, and check
//! that artifacts are reproducible and digest-guarded.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_interactrank"))
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn interactrank");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn run_fail(dir: &Path, args: &[&str]) -> Output {
    let out = bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn interactrank");
    assert!(
        !out.status.success(),
        "command {:?} unexpectedly succeeded\nstdout: {}",
        args,
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

/// Small everything: tiny towers, two global windows plus one
/// country-conditioned slot, ten days of synthetic traffic.
const CONF: &str = "\
topic_count = 6
item_count = 80
query_count = 60
user_count = 20
days = 10
base_rates = 0.12,0.16
zipf_exponent = 1.1
topic_boost = 4.0
affinity_boost = 1.5
popularity_amp = 0.25
quirk_amp = 0.4
requests_per_day = 40
feed_size = 8
content_dim = 8
rate_count = 2
seed = 5

iqp_windows = 7d:7,30d:30
iqp_context_windows = 30d:30@country
iqp_k = 20
iqp_beta = 5
iqp_min_query_count = 1

embed_dim = 8
token_vocab = 64
token_dim = 4
item_vocab = 128
item_id_dim = 4
action_vocab = 8
action_dim = 2
time_buckets = 8
time_dim = 2
ctx_dim = 2
country_vocab = 4
device_vocab = 3
language_vocab = 2
age_vocab = 4
gender_vocab = 3
seq_max_len = 4
masknet_blocks = 2
mask_hidden = 4
block_out = 4
query_hidden = 16
item_hidden = 16
iqp_feature_count = 3

lr = 0.005
batch_size = 32
epochs = 1.0
phi_e = 1.0
phi_s = 0.01
downsample_rate = 0.5
split_time = 691200
";

const AS_OF: &str = "432000"; // seal signals at the end of day 4

fn write_conf(dir: &Path) {
    std::fs::write(dir.join("run.conf"), CONF).unwrap();
}

/// gen-data → iqp build → train → index build → eval hits, leaving every
/// artifact in `dir`.
fn run_pipeline(dir: &Path) {
    write_conf(dir);
    run_ok(dir, &["--config", "run.conf", "gen-data", "--out", "data"]);
    run_ok(
        dir,
        &[
            "--config", "run.conf", "iqp", "build",
            "--logs", "data/events.tsv",
            "--requests", "data/requests.tsv",
            "--users", "data/users.tsv",
            "--as-of", AS_OF,
            "--out", "store.tsv",
            "--counts-out", "base.cnt",
        ],
    );
    run_ok(
        dir,
        &[
            "--config", "run.conf", "train",
            "--events", "data/events.tsv",
            "--items", "data/items.tsv",
            "--users", "data/users.tsv",
            "--store", "store.tsv",
            "--out", "model.ckpt",
            "--metrics", "metrics.tsv",
        ],
    );
    run_ok(
        dir,
        &[
            "index", "build",
            "--model", "model.ckpt",
            "--items", "data/items.tsv",
            "--store", "store.tsv",
            "--out", "index.snap",
        ],
    );
    let report = run_ok(
        dir,
        &[
            "eval", "hits",
            "--model", "model.ckpt",
            "--index", "store.tsv",
            "--test", "data/events.tsv",
            "--items", "data/items.tsv",
            "--users", "data/users.tsv",
            "--requests", "data/requests.tsv",
            "--split", "691200",
            "--k", "3",
        ],
    );
    std::fs::write(dir.join("report.tsv"), report).unwrap();
}

#[test]
fn flops_match_published_costs() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(dir.path(), &["flops", "--dim", "64", "--iqp-features", "7"]);
    assert_eq!(out.trim(), "142");
    let out = run_ok(dir.path(), &["flops", "--dim", "64", "--no-interactions"]);
    assert_eq!(out.trim(), "127");
    let out = run_ok(dir.path(), &["flops", "--dim", "1", "--iqp-features", "0"]);
    assert_eq!(out.trim(), "2");
}

#[test]
fn unknown_subcommand_prints_synopsis_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_fail(dir.path(), &["frobnicate"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "no synopsis in: {stderr}");
}

#[test]
fn pipeline_is_deterministic_end_to_end() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_pipeline(dir_a.path());
    run_pipeline(dir_b.path());

    for name in [
        "data/events.tsv",
        "store.tsv",
        "metrics.tsv",
        "model.ckpt",
        "index.snap",
        "report.tsv",
    ] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    let report = std::fs::read_to_string(dir_a.path().join("report.tsv")).unwrap();
    assert!(report.starts_with("metric\tsegment\tvariant\tvalue\tdelta_vs_base\n"));
    assert!(report.contains("hits@3\tall\tmodel\t"));

    // Ranked output is identical too, and respects the requested cutoff.
    let score_args = [
        "score",
        "--index", "index.snap",
        "--model", "model.ckpt",
        "--query", "topic0 q11",
        "--n", "5",
        "--context", "user=12,country=us",
    ];
    let ranked_a = run_ok(dir_a.path(), &score_args);
    let ranked_b = run_ok(dir_b.path(), &score_args);
    assert_eq!(ranked_a, ranked_b);
    assert_eq!(ranked_a.lines().count(), 5);
    for line in ranked_a.lines() {
        let (item, score) = line.split_once('\t').expect("item\\tscore");
        item.parse::<u64>().unwrap();
        score.parse::<f64>().unwrap();
    }

    let sessions = run_ok(
        dir_a.path(),
        &["eval", "sessions", "--logs", "data/sessions.tsv"],
    );
    let field = |name: &str| -> f64 {
        sessions
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{name}\t")))
            .unwrap_or_else(|| panic!("missing {name} in {sessions}"))
            .parse()
            .unwrap()
    };
    assert!(field("sifr") >= field("f1s"));
    assert!(field("sessions") > 0.0);
}

#[test]
fn one_day_update_matches_direct_rebuild() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    write_conf(dir);
    run_ok(dir, &["--config", "run.conf", "gen-data", "--out", "data"]);
    let build = |as_of: &str, out: &str, extra: &[&str]| {
        let mut args = vec![
            "--config", "run.conf", "iqp", "build",
            "--logs", "data/events.tsv",
            "--requests", "data/requests.tsv",
            "--users", "data/users.tsv",
            "--as-of", as_of,
            "--out", out,
        ];
        args.extend_from_slice(extra);
        run_ok(dir, &args);
    };
    build(AS_OF, "store_day4.tsv", &["--counts-out", "base.cnt"]);
    // Direct rebuild one day later, also capturing that day's delta.
    build("518400", "store_day5_direct.tsv", &["--delta-out", "delta.cnt"]);
    run_ok(
        dir,
        &[
            "--config", "run.conf", "iqp", "update",
            "--base", "base.cnt",
            "--delta", "delta.cnt",
            "--out", "merged.cnt",
            "--store-out", "store_day5_merged.tsv",
        ],
    );
    let direct = std::fs::read(dir.join("store_day5_direct.tsv")).unwrap();
    let merged = std::fs::read(dir.join("store_day5_merged.tsv")).unwrap();
    assert_eq!(direct, merged, "incremental store differs from rebuild");
}

#[test]
fn mismatched_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    run_pipeline(dir);
    // A second model trained under a different seed scores differently and
    // must be rejected against the first model's index.
    run_ok(
        dir,
        &[
            "--config", "run.conf", "--set", "seed=99", "train",
            "--events", "data/events.tsv",
            "--items", "data/items.tsv",
            "--users", "data/users.tsv",
            "--store", "store.tsv",
            "--out", "other.ckpt",
        ],
    );
    let serve = run_fail(
        dir,
        &["serve", "--index", "index.snap", "--model", "other.ckpt", "--port", "0"],
    );
    let stderr = String::from_utf8_lossy(&serve.stderr);
    assert!(stderr.contains("error:"), "no error line in: {stderr}");
    assert!(stderr.contains("match"), "unexpected message: {stderr}");
    let score = run_fail(
        dir,
        &["score", "--index", "index.snap", "--model", "other.ckpt", "--query", "x"],
    );
    let stderr = String::from_utf8_lossy(&score.stderr);
    assert!(stderr.contains("digest"), "unexpected message: {stderr}");

    // The matching checkpoint still serves fine one-shot.
    run_ok(
        dir,
        &["score", "--index", "index.snap", "--model", "model.ckpt", "--query", "x"],
    );
}
