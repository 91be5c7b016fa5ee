//! Pipeline driver: one subcommand per stage, from synthetic log generation
//! through signal building, training, index building, serving, and offline
//! evaluation.
//!
//! Configuration is layered: a flat key=value file (`--config`), then
//! repeated `--set key=value` overrides, then dedicated flags (`--seed`).
//! Artifacts flow between stages as files; loaders cross-check content
//! digests so a stale checkpoint cannot be served against a newer index.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use interactrank_core::config::ConfigMap;
use interactrank_core::domain::{
    normalize_query, read_events, read_users, write_events, write_users, ActionType, ItemId,
    RequestContext,
};
use interactrank_core::eval::{
    ablation_run, build_eval_requests, evaluate_hits, f1s, generate_synthetic_logs,
    query_frequency, read_sessions, rows_to_tsv, segment_queries, sifr, write_sessions,
    AblationTarget, EvalDataset, EvalRequest, ReportRow, Segment, SyntheticConfig,
};
use interactrank_core::iqp::{
    build_counts_bundle, build_delta_bundle, build_signal_store, merge_bundle, read_counts_bundle,
    read_requests, read_signal_store_binary, read_signal_store_text, write_counts_bundle,
    write_requests, write_signal_store_binary, write_signal_store_text, IqpConfig, SignalStore,
};
use interactrank_core::model::{
    flop_count, load_checkpoint, read_items, save_checkpoint, write_items, ItemRecord,
    ModelConfig, ModelParams,
};
use interactrank_core::serving::{
    batch_inference, build_index, digest_hex, explain_candidate, file_digest, parse_context,
    prerank, read_snapshot, serve_loop, write_snapshot, PrerankRequest, ServeState,
};
use interactrank_core::train::{
    build_dataset, train_loop, train_loop_to_file, DatasetInputs, TrainOptions,
};

#[derive(Parser)]
#[command(
    name = "interactrank",
    version,
    about = "Engagement-driven search pre-ranking pipeline",
    arg_required_else_help = true
)]
struct Cli {
    /// Master RNG seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Flat key=value config file shared by all stages.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Extra config overrides, applied after the file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Print per-stage progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic engagement log bundle into a directory.
    GenData(GenDataArgs),
    /// Build, advance, or inspect the query-item signal store.
    #[command(subcommand)]
    Iqp(IqpCommand),
    /// Train the scorer from logs and a sealed signal store.
    Train(TrainArgs),
    /// Forward-index stages.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Serve pre-ranking over TCP (line protocol, one request per line).
    Serve(ServeArgs),
    /// One-shot scoring: rank candidates for a query and print them.
    Score(ScoreArgs),
    /// Offline metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Remove-one ablation: retrain without a feature family and report deltas.
    Ablate(AblateArgs),
    /// Per-candidate arithmetic cost of the serving scorer.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for events/requests/items/users/sessions TSVs.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum IqpCommand {
    /// Count logs up to a cutoff and write the signal store.
    Build(IqpBuildArgs),
    /// Merge a one-day delta onto a counts bundle (advances as_of one day).
    Update(IqpUpdateArgs),
    /// Print one item's per-slot signal values for a query.
    Lookup(IqpLookupArgs),
}

#[derive(Args)]
struct IqpBuildArgs {
    /// Engagement event log (TSV).
    #[arg(long, value_name = "PATH")]
    logs: PathBuf,
    /// Query request log (TSV) for query volume counts.
    #[arg(long, value_name = "PATH")]
    requests: PathBuf,
    /// User context table; absent users fall back to a "?" context key.
    #[arg(long, value_name = "PATH")]
    users: Option<PathBuf>,
    /// Count cutoff, epoch seconds; records after this are ignored.
    #[arg(long, value_name = "EPOCH_SECS")]
    as_of: i64,
    /// Signal store output path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Also persist the mergeable counts bundle.
    #[arg(long, value_name = "PATH")]
    counts_out: Option<PathBuf>,
    /// Also persist a bundle holding only the newest counted day,
    /// ready to merge onto yesterday's counts.
    #[arg(long, value_name = "PATH")]
    delta_out: Option<PathBuf>,
    /// Write the store in the length-prefixed binary form instead of TSV.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct IqpUpdateArgs {
    /// Base counts bundle.
    #[arg(long, value_name = "PATH")]
    base: PathBuf,
    /// One-day delta counts bundle.
    #[arg(long, value_name = "PATH")]
    delta: PathBuf,
    /// Merged counts bundle output path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Also rebuild and write the signal store from the merged counts.
    #[arg(long, value_name = "PATH")]
    store_out: Option<PathBuf>,
    /// Write the store in the length-prefixed binary form instead of TSV.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct IqpLookupArgs {
    /// Signal store path (TSV or binary, detected by content).
    #[arg(long, value_name = "PATH")]
    store: PathBuf,
    /// Item id to look up.
    #[arg(long)]
    item: u64,
    /// Raw query text (normalized before lookup).
    #[arg(long)]
    query: String,
    /// Request context as comma `k=v` pairs (user/country/device/language/
    /// age/gender); omit to leave context-conditioned slots at zero.
    #[arg(long, value_name = "K=V,...")]
    context: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Engagement event log (TSV).
    #[arg(long, value_name = "PATH")]
    events: PathBuf,
    /// Item catalog (TSV).
    #[arg(long, value_name = "PATH")]
    items: PathBuf,
    /// User context table.
    #[arg(long, value_name = "PATH")]
    users: Option<PathBuf>,
    /// Sealed signal store providing interaction features.
    #[arg(long, value_name = "PATH")]
    store: PathBuf,
    /// Checkpoint output path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Per-step loss log (TSV: step, L, L_E, L_S).
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Run batch inference over the catalog and write the snapshot.
    Build(IndexBuildArgs),
}

#[derive(Args)]
struct IndexBuildArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Item catalog (TSV).
    #[arg(long, value_name = "PATH")]
    items: PathBuf,
    /// Signal store whose per-item signals are baked into the index.
    #[arg(long, value_name = "PATH")]
    store: PathBuf,
    /// Snapshot output path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Fail instead of skipping items whose features do not fit the model.
    #[arg(long)]
    strict: bool,
    /// Snapshot build time, epoch seconds (default: the store's as_of).
    #[arg(long, value_name = "EPOCH_SECS")]
    build_time: Option<i64>,
}

#[derive(Args)]
struct ServeArgs {
    /// Forward-index snapshot.
    #[arg(long, value_name = "PATH")]
    index: PathBuf,
    /// Model checkpoint; must match the digest baked into the snapshot.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// TCP port to listen on (0 picks a free port).
    #[arg(long)]
    port: u16,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Args)]
struct ScoreArgs {
    /// Forward-index snapshot.
    #[arg(long, value_name = "PATH")]
    index: PathBuf,
    /// Model checkpoint; must match the digest baked into the snapshot.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Raw query text.
    #[arg(long)]
    query: String,
    /// Comma-separated candidate item ids, or "@all" for every indexed item.
    #[arg(long, default_value = "@all")]
    candidates: String,
    /// How many results to print.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Request context as comma `k=v` pairs.
    #[arg(long, value_name = "K=V,...")]
    context: Option<String>,
    /// Append dot product, pre-sigmoid score, and signal values per line.
    #[arg(long)]
    explain: bool,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// HITS@K over the temporal test split of an event log.
    Hits(EvalHitsArgs),
    /// Session fulfillment rates from a session log.
    Sessions(EvalSessionsArgs),
}

#[derive(Args)]
struct EvalHitsArgs {
    /// Model checkpoint.
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    /// Signal store used for interaction features (the eval-side index).
    #[arg(long, value_name = "PATH")]
    index: PathBuf,
    /// Event log; feeds at or after the split become eval requests.
    #[arg(long, value_name = "PATH")]
    test: PathBuf,
    /// Item catalog (TSV).
    #[arg(long, value_name = "PATH")]
    items: PathBuf,
    /// User context table.
    #[arg(long, value_name = "PATH")]
    users: Option<PathBuf>,
    /// Request log; when given, adds per-popularity-segment rows.
    #[arg(long, value_name = "PATH")]
    requests: Option<PathBuf>,
    /// Rank cutoff.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Test-split start, epoch seconds (default: the store's as_of).
    #[arg(long, value_name = "EPOCH_SECS")]
    split: Option<i64>,
    /// Restrict positives to one action type (e.g. save, long_click).
    #[arg(long)]
    action: Option<String>,
    /// Report output path (stdout when omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSessionsArgs {
    /// Session log (TSV).
    #[arg(long, value_name = "PATH")]
    logs: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Feature family to remove: sequence, interactions, or masknet
    /// (repeatable; all three when omitted).
    #[arg(long = "remove", value_name = "NAME")]
    remove: Vec<String>,
    /// Engagement event log (TSV).
    #[arg(long, value_name = "PATH")]
    events: PathBuf,
    /// Item catalog (TSV).
    #[arg(long, value_name = "PATH")]
    items: PathBuf,
    /// User context table.
    #[arg(long, value_name = "PATH")]
    users: Option<PathBuf>,
    /// Sealed signal store.
    #[arg(long, value_name = "PATH")]
    store: PathBuf,
    /// Rank cutoff for the reported metric.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Report output path (stdout when omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// Embedding dimension of both towers.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Interaction feature count mixed into the final projection.
    #[arg(long, default_value_t = 7)]
    iqp_features: usize,
    /// Cost of the bare dot-product scorer, no interaction features.
    #[arg(long)]
    no_interactions: bool,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        // One line, stderr, stable prefix: scripts match on "error: ".
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("setting worker thread count")?;
    }
    let mut cfg = match &cli.config {
        Some(path) => ConfigMap::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ConfigMap::new(),
    };
    cfg.apply_overrides(&cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed);
    }
    let verbose = cli.verbose;

    match cli.command {
        Command::GenData(args) => cmd_gen_data(&cfg, &args),
        Command::Iqp(IqpCommand::Build(args)) => cmd_iqp_build(&cfg, &args, verbose),
        Command::Iqp(IqpCommand::Update(args)) => cmd_iqp_update(&cfg, &args),
        Command::Iqp(IqpCommand::Lookup(args)) => cmd_iqp_lookup(&args),
        Command::Train(args) => cmd_train(&cfg, &args, verbose),
        Command::Index(IndexCommand::Build(args)) => cmd_index_build(&args),
        Command::Serve(args) => cmd_serve(&args),
        Command::Score(args) => cmd_score(&args),
        Command::Eval(EvalCommand::Hits(args)) => cmd_eval_hits(&args, verbose),
        Command::Eval(EvalCommand::Sessions(args)) => cmd_eval_sessions(&args),
        Command::Ablate(args) => cmd_ablate(&cfg, &args, verbose),
        Command::Flops(args) => cmd_flops(&args),
    }
}

/// Detect store form by content: the binary writer starts with its own magic,
/// anything else is handed to the TSV reader (whose errors name the file).
fn read_store(path: &Path) -> Result<SignalStore> {
    let binary = std::fs::File::open(path)
        .and_then(|mut f| {
            let mut head = [0u8; 6];
            std::io::Read::read_exact(&mut f, &mut head)?;
            Ok(&head == b"IQPB1\0")
        })
        .unwrap_or(false);
    let store = if binary {
        read_signal_store_binary(path)?
    } else {
        read_signal_store_text(path)?
    };
    Ok(store)
}

fn write_store(store: &SignalStore, path: &Path, binary: bool) -> Result<()> {
    if binary {
        write_signal_store_binary(store, path)?;
    } else {
        write_signal_store_text(store, path)?;
    }
    Ok(())
}

fn load_users(path: Option<&Path>) -> Result<BTreeMap<u64, RequestContext>> {
    Ok(match path {
        Some(p) => read_users(p)?,
        None => BTreeMap::new(),
    })
}

fn items_by_id(items: Vec<ItemRecord>) -> BTreeMap<ItemId, ItemRecord> {
    items
        .into_iter()
        .map(|rec| (rec.features.item, rec))
        .collect()
}

fn parse_ctx_flag(text: Option<&str>) -> Result<Option<RequestContext>> {
    match text {
        None => Ok(None),
        Some(t) => parse_context(t)
            .map(Some)
            .map_err(|msg| anyhow!("bad context: {msg}")),
    }
}

/// An index is only scoreable with the checkpoint it was built from.
fn check_model_digest(model_path: &Path, snapshot_digest: &[u8; 32]) -> Result<()> {
    let digest = file_digest(model_path)?;
    if digest != *snapshot_digest {
        bail!(
            "checkpoint digest {} does not match the index's model digest {}",
            &digest_hex(&digest)[..16],
            &digest_hex(snapshot_digest)[..16]
        );
    }
    Ok(())
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gen_data(cfg: &ConfigMap, args: &GenDataArgs) -> Result<()> {
    let syn = SyntheticConfig::from_config_map(cfg)?;
    let data = generate_synthetic_logs(&syn)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_events(&data.events, &args.out.join("events.tsv"))?;
    write_requests(&data.requests, &args.out.join("requests.tsv"))?;
    write_items(&data.items, &args.out.join("items.tsv"))?;
    write_users(&data.users, &args.out.join("users.tsv"))?;
    write_sessions(&data.sessions, &args.out.join("sessions.tsv"))?;
    println!(
        "gen-data\tevents={}\trequests={}\titems={}\tusers={}\tsessions={}\tout={}",
        data.events.len(),
        data.requests.len(),
        data.items.len(),
        data.users.len(),
        data.sessions.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_iqp_build(cfg: &ConfigMap, args: &IqpBuildArgs, verbose: bool) -> Result<()> {
    let iqp_cfg = IqpConfig::from_config_map(cfg)?;
    // The cutoff selects a prefix of the logs; later records belong to
    // training and evaluation, not to the signal store.
    let mut events = read_events(&args.logs)?;
    events.retain(|e| e.timestamp <= args.as_of);
    let mut requests = read_requests(&args.requests)?;
    requests.retain(|r| r.timestamp <= args.as_of);
    let users = load_users(args.users.as_deref())?;
    if verbose {
        eprintln!(
            "counting {} events / {} requests as of {}",
            events.len(),
            requests.len(),
            args.as_of
        );
    }
    let bundle = build_counts_bundle(&events, &requests, &users, &iqp_cfg, args.as_of)?;
    let store = build_signal_store(&bundle, &iqp_cfg)?;
    write_store(&store, &args.out, args.binary)?;
    if let Some(path) = &args.counts_out {
        write_counts_bundle(&bundle, path)?;
    }
    if let Some(path) = &args.delta_out {
        let delta = build_delta_bundle(&events, &requests, &users, &iqp_cfg, args.as_of)?;
        write_counts_bundle(&delta, path)?;
    }
    println!(
        "iqp-build\titems={}\tslots={}\tas_of={}\tout={}",
        store.items.len(),
        store.slots.len(),
        store.as_of,
        args.out.display()
    );
    Ok(())
}

fn cmd_iqp_update(cfg: &ConfigMap, args: &IqpUpdateArgs) -> Result<()> {
    let base = read_counts_bundle(&args.base)?;
    let delta = read_counts_bundle(&args.delta)?;
    let merged = merge_bundle(&base, &delta)?;
    write_counts_bundle(&merged, &args.out)?;
    if let Some(path) = &args.store_out {
        let iqp_cfg = IqpConfig::from_config_map(cfg)?;
        let store = build_signal_store(&merged, &iqp_cfg)?;
        write_store(&store, path, args.binary)?;
    }
    println!(
        "iqp-update\tas_of={}\tout={}",
        merged.as_of,
        args.out.display()
    );
    Ok(())
}

fn cmd_iqp_lookup(args: &IqpLookupArgs) -> Result<()> {
    let store = read_store(&args.store)?;
    let query = normalize_query(&args.query).map_err(|e| anyhow!("bad query: {e}"))?;
    let ctx = parse_ctx_flag(args.context.as_deref())?;
    let features = store.lookup_features(ItemId(args.item), &query, ctx.as_ref());
    for (slot, value) in store.slot_names().iter().zip(&features) {
        println!("{slot}\t{value}");
    }
    Ok(())
}

fn cmd_train(cfg: &ConfigMap, args: &TrainArgs, verbose: bool) -> Result<()> {
    let opts = TrainOptions::from_config_map(cfg)?;
    let model_cfg = ModelConfig::from_config_map(cfg)?;
    let split_time = cfg.get_i64("split_time", i64::MAX)?;
    let downsample = cfg.get_f64("downsample_rate", 1.0)?;

    let events = read_events(&args.events)?;
    let items = items_by_id(read_items(&args.items)?);
    let users = load_users(args.users.as_deref())?;
    let signals = read_store(&args.store)?;
    if model_cfg.use_iqp && model_cfg.iqp_feature_count != signals.feature_count() {
        bail!(
            "config expects {} interaction features but the store provides {}",
            model_cfg.iqp_feature_count,
            signals.feature_count()
        );
    }
    let inputs = DatasetInputs {
        events: &events,
        users: &users,
        items: &items,
        signals: &signals,
    };
    let (train, held_out) =
        build_dataset(&inputs, split_time, downsample, opts.seed, model_cfg.seq_max_len)?;
    if verbose {
        eprintln!(
            "training on {} examples ({} held out past split {})",
            train.len(),
            held_out.len(),
            split_time
        );
    }
    let mut params = ModelParams::init(model_cfg, opts.seed);
    let stats = match &args.metrics {
        Some(path) => train_loop_to_file(&mut params, &train, &opts, path)?,
        None => train_loop(&mut params, &train, &opts, None)?,
    };
    save_checkpoint(&params, &args.out)?;
    println!(
        "train\texamples={}\theld_out={}\tsteps={}\tloss={}\tcheckpoint={}",
        train.len(),
        held_out.len(),
        stats.steps,
        stats.final_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_index_build(args: &IndexBuildArgs) -> Result<()> {
    let params = load_checkpoint(&args.model)?;
    let items = read_items(&args.items)?;
    let signals = read_store(&args.store)?;
    if params.config.use_iqp && params.config.iqp_feature_count != signals.feature_count() {
        bail!(
            "checkpoint expects {} interaction features but the store provides {}",
            params.config.iqp_feature_count,
            signals.feature_count()
        );
    }
    let (entries, skipped) = batch_inference(&items, &params, &signals, args.strict)?;
    let model_digest = file_digest(&args.model)?;
    let iqp_digest = file_digest(&args.store)?;
    let build_time = args.build_time.unwrap_or(signals.as_of);
    let snapshot = build_index(
        entries,
        model_digest,
        iqp_digest,
        build_time,
        params.config.embed_dim,
        signals.slots.clone(),
    )?;
    write_snapshot(&snapshot, &args.out)?;
    println!(
        "index-build\tentries={}\tskipped={}\tmodel_digest={}\tout={}",
        snapshot.len(),
        skipped.len(),
        &digest_hex(&model_digest)[..16],
        args.out.display()
    );
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let snapshot = read_snapshot(&args.index)?;
    let entries = snapshot.len();
    let params = load_checkpoint(&args.model)?;
    let state = ServeState::new(snapshot, params);
    state
        .verify_digest(&args.model)
        .context("refusing to serve: checkpoint does not match the index")?;
    let listener = TcpListener::bind((args.host.as_str(), args.port))
        .with_context(|| format!("binding {}:{}", args.host, args.port))?;
    let addr = listener.local_addr()?;
    println!("serving\taddr={addr}\tentries={entries}");
    std::io::stdout().flush().ok();
    serve_loop(listener, Arc::new(state))?;
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let snapshot = read_snapshot(&args.index)?;
    let params = load_checkpoint(&args.model)?;
    check_model_digest(&args.model, &snapshot.model_digest)?;
    let candidates: Vec<ItemId> = if args.candidates == "@all" {
        snapshot.item_ids()
    } else {
        args.candidates
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map(ItemId)
                    .map_err(|_| anyhow!("bad candidate id {:?}", s.trim()))
            })
            .collect::<Result<_>>()?
    };
    let context = parse_ctx_flag(args.context.as_deref())?.unwrap_or_else(|| {
        let mut ctx = RequestContext::new(0);
        ctx.country = String::new();
        ctx
    });
    let request = PrerankRequest {
        query: args.query.clone(),
        context: context.clone(),
        sequence: Vec::new(),
        candidates,
        n_out: args.n,
    };
    let ranked = prerank(&request, &snapshot, &params)?;
    let query_key = normalize_query(&args.query).map_err(|e| anyhow!("bad query: {e}"))?;
    let mut stdout = std::io::stdout().lock();
    for (item, score) in &ranked {
        if args.explain {
            match explain_candidate(*item, &query_key, &context, &[], &snapshot, &params)? {
                Some(bd) => {
                    let iqp = bd
                        .iqp_features
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(",");
                    writeln!(
                        stdout,
                        "{}\t{}\t{}\t{}\t{}",
                        item.0, score, bd.dot, bd.raw_score, iqp
                    )?;
                }
                None => writeln!(stdout, "{}\t{}", item.0, score)?,
            }
        } else {
            writeln!(stdout, "{}\t{}", item.0, score)?;
        }
    }
    Ok(())
}

fn cmd_eval_hits(args: &EvalHitsArgs, verbose: bool) -> Result<()> {
    let params = load_checkpoint(&args.model)?;
    let signals = read_store(&args.index)?;
    if params.config.use_iqp && params.config.iqp_feature_count != signals.feature_count() {
        bail!(
            "checkpoint expects {} interaction features but the store provides {}",
            params.config.iqp_feature_count,
            signals.feature_count()
        );
    }
    let events = read_events(&args.test)?;
    let items = items_by_id(read_items(&args.items)?);
    let users = load_users(args.users.as_deref())?;
    let split = args.split.unwrap_or(signals.as_of);
    let inputs = DatasetInputs {
        events: &events,
        users: &users,
        items: &items,
        signals: &signals,
    };
    let requests = build_eval_requests(&inputs, split, params.config.seq_max_len);
    if requests.is_empty() {
        bail!("no eval requests at or after split {split}");
    }
    let action = args
        .action
        .as_deref()
        .map(|s| ActionType::from_str(s).map_err(|_| anyhow!("unknown action {s:?}")))
        .transpose()?;
    let metric = match action {
        None => format!("hits@{}", args.k),
        Some(a) => format!("hits@{}:{}", args.k, a.as_str()),
    };
    let overall = evaluate_hits(&params, &signals, &requests, args.k, action)?;
    let mut rows = vec![ReportRow {
        metric: metric.clone(),
        segment: "all".to_string(),
        variant: "model".to_string(),
        value: overall.hits,
        delta_vs_base: 0.0,
    }];
    if let Some(req_path) = &args.requests {
        let segments = segment_queries(&query_frequency(&read_requests(req_path)?));
        for seg in Segment::ALL {
            let subset: Vec<EvalRequest> = requests
                .iter()
                .filter(|r| {
                    segments.get(&r.query).copied().unwrap_or(Segment::Single) == seg
                })
                .cloned()
                .collect();
            if subset.is_empty() {
                continue;
            }
            let report = evaluate_hits(&params, &signals, &subset, args.k, action)?;
            rows.push(ReportRow {
                metric: metric.clone(),
                segment: seg.as_str().to_string(),
                variant: "model".to_string(),
                value: report.hits,
                delta_vs_base: 0.0,
            });
        }
    }
    write_or_print(&rows_to_tsv(&rows), args.out.as_deref())?;
    if verbose {
        eprintln!(
            "evaluated={} skipped={} (no positive)",
            overall.evaluated, overall.skipped
        );
    }
    Ok(())
}

fn cmd_eval_sessions(args: &EvalSessionsArgs) -> Result<()> {
    let sessions = read_sessions(&args.logs)?;
    let sifr_value = sifr(&sessions)?;
    let f1s_value = f1s(&sessions)?;
    println!("sessions\t{}", sessions.len());
    println!("sifr\t{sifr_value}");
    println!("f1s\t{f1s_value}");
    Ok(())
}

fn cmd_ablate(cfg: &ConfigMap, args: &AblateArgs, verbose: bool) -> Result<()> {
    let opts = TrainOptions::from_config_map(cfg)?;
    let model_cfg = ModelConfig::from_config_map(cfg)?;
    if !cfg.contains("split_time") {
        bail!("ablate needs split_time in the config (epoch seconds)");
    }
    let split_time = cfg.get_i64("split_time", 0)?;
    let downsample = cfg.get_f64("downsample_rate", 1.0)?;

    let events = read_events(&args.events)?;
    let items = items_by_id(read_items(&args.items)?);
    let users = load_users(args.users.as_deref())?;
    let signals = read_store(&args.store)?;
    let inputs = DatasetInputs {
        events: &events,
        users: &users,
        items: &items,
        signals: &signals,
    };
    let (train, _) =
        build_dataset(&inputs, split_time, downsample, opts.seed, model_cfg.seq_max_len)?;
    let requests = build_eval_requests(&inputs, split_time, model_cfg.seq_max_len);
    if requests.is_empty() {
        bail!("no eval requests at or after split {split_time}");
    }
    let removals: Vec<AblationTarget> = if args.remove.is_empty() {
        AblationTarget::ALL.to_vec()
    } else {
        args.remove
            .iter()
            .map(|s| AblationTarget::from_str(s).map_err(|e| anyhow!(e)))
            .collect::<Result<_>>()?
    };
    if verbose {
        eprintln!(
            "ablating {} variants over {} train examples / {} eval requests",
            removals.len(),
            train.len(),
            requests.len()
        );
    }
    let data = EvalDataset {
        train: &train,
        requests: &requests,
        signals: &signals,
        opts: &opts,
        k: args.k,
    };
    let rows = ablation_run(&model_cfg, &removals, &data)?;
    write_or_print(&rows_to_tsv(&rows), args.out.as_deref())?;
    Ok(())
}

fn cmd_flops(args: &FlopsArgs) -> Result<()> {
    let mut cfg = ModelConfig::default();
    cfg.embed_dim = args.dim;
    cfg.iqp_feature_count = args.iqp_features;
    println!("{}", flop_count(&cfg, !args.no_interactions));
    Ok(())
}
