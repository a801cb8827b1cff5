//! The `clipsim` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! Reports go to files under `--out`; their paths are printed on stdout and
//! errors are printed on stderr as one JSON object.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::aggregation::{aggregate_learned, Estimator, ProjectionLayer};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::scoring::ScoringNet;
use crate::store::{write_store, FeatureStore, Split, STORE_FILE_NAME};
use crate::synth::generate;
use crate::trainer::{
    corruption_sweep, evaluate_estimator, load_experiment_store, multi_clip_pooling, pooling_csv, prepare_eval,
    train_aggregation, train_embedding_head, train_top_t, EvalSet, ExperimentConfig, PreparedSequence, TopTVariant,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Name of the resolved-configuration echo written next to every output.
pub const CONFIG_ECHO: &str = "config.resolved.toml";

#[derive(Debug, Parser)]
#[command(name = "clipsim", version, about = "Learned clip-similarity aggregation experiments")]
pub struct Cli {
    /// Experiment seed; also seeds the synthetic generator.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "clipsim-out")]
    pub out: PathBuf,
    /// Worker threads for similarity matrices and sweep points.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic feature store.
    Synth,
    /// Train the embedding head, the aggregation network or a top-t% projection.
    Train(TrainArgs),
    /// Evaluate one estimator on the query/gallery splits.
    Eval(EvalArgs),
    /// Untrained mean-pooling baselines at several clip counts.
    Baseline(BaselineArgs),
    /// Full corruption sweep over methods, t values and corruption levels.
    Sweep(StoreArg),
    /// Dump per-clip-pair importance scores for sequence pairs.
    InspectImportance(InspectArgs),
    /// Summarize a feature store.
    StoreInfo(StoreArg),
}

#[derive(Debug, Args)]
pub struct StoreArg {
    /// Feature store (file or directory); defaults to the config, else synthetic.
    #[arg(long)]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Embedding,
    Aggregation,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Learned,
    #[value(name = "topt-e")]
    ToptE,
    #[value(name = "topt-te")]
    ToptTe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMethod {
    Learned,
    #[value(name = "topt-e")]
    ToptE,
    #[value(name = "topt-te")]
    ToptTe,
    Mean,
    #[value(name = "mean-raw")]
    MeanRaw,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long, value_enum, default_value = "aggregation")]
    pub stage: Stage,
    #[arg(long, value_enum, default_value = "learned")]
    pub method: TrainMethod,
    /// Top-t percentage (defaults to `top_t.t`).
    #[arg(long)]
    pub t: Option<f64>,
    /// Frozen embedding head for the aggregation stage.
    #[arg(long)]
    pub embedding_head: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub store: StoreArg,
    /// Scoring-net or projection checkpoint (top-t without one uses the identity).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "learned")]
    pub method: EvalMethod,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub embedding_head: Option<PathBuf>,
    /// Corrupt up to this many clips per evaluation sequence.
    #[arg(long)]
    pub max_corrupt: Option<usize>,
    #[arg(long)]
    pub num_clips: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub store: StoreArg,
    /// Clip counts to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub num_clips: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub store: StoreArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query tracklet id.
    #[arg(long)]
    pub query: String,
    /// Gallery tracklet ids; every gallery sequence when omitted.
    #[arg(long)]
    pub gallery: Vec<String>,
    #[arg(long)]
    pub embedding_head: Option<PathBuf>,
    #[arg(long)]
    pub max_corrupt: Option<usize>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::InvalidArgument(_) | Error::Contract(_) => EXIT_USAGE,
        Error::NonFinite(_) | Error::Divergence { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err.root() {
        Error::InvalidArgument(_) => "invalid-argument",
        Error::Degenerate(_) => "degenerate",
        Error::NonFinite(_) => "non-finite",
        Error::ShapeMismatch(_) => "shape-mismatch",
        Error::Contract(_) => "contract",
        Error::SequenceTooShort { .. } => "sequence-too-short",
        Error::Config(_) => "config",
        Error::BadMagic { .. } => "bad-magic",
        Error::VersionMismatch { .. } => "version-mismatch",
        Error::Truncated { .. } => "truncated",
        Error::InconsistentDim { .. } => "inconsistent-dim",
        Error::Manifest(_) => "manifest",
        Error::Divergence { .. } => "divergence",
        Error::Cell { .. } => "cell",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!(
                "{}",
                json!({ "error": error_kind(&e), "message": e.to_string(), "exit_code": code })
            );
            code
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    println!("{}", path.display());
    Ok(())
}

fn resolve_config(cli: &Cli, store: Option<&StoreArg>, head: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            cfg
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(s) = store.and_then(|s| s.store.clone()) {
        cfg.store = Some(s);
    }
    if let Some(h) = head {
        cfg.embedding_head = Some(h.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    write(&cli.out.join(CONFIG_ECHO), cfg.to_toml())
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::InvalidArgument("--jobs must be positive".into()));
        }
        // Fails only if a pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth => {
            let cfg = resolve_config(cli, None, None)?;
            prepare_out(cli, &cfg)?;
            let store = generate(&cfg.synth)?;
            let path = cli.out.join(STORE_FILE_NAME);
            write_store(&store, &path)?;
            println!("{}", path.display());
            write(&cli.out.join("manifest.json"), pretty(store.manifest())?)
        }
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Baseline(a) => {
            let cfg = resolve_config(cli, Some(&a.store), None)?;
            prepare_out(cli, &cfg)?;
            let store = load_experiment_store(&cfg)?;
            let rows = multi_clip_pooling(&cfg, &store, &a.num_clips)?;
            for r in &rows {
                println!("M = {:2}: mAP l2 {:.4}  raw {:.4}", r.num_clips, r.map_l2, r.map_raw);
            }
            write(&cli.out.join("baseline.csv"), pooling_csv(&rows))?;
            write(&cli.out.join("baseline.json"), pretty(&rows)?)
        }
        Command::Sweep(a) => {
            let mut cfg = resolve_config(cli, Some(a), None)?;
            if cfg.sweep.checkpoint_dir.is_none() {
                cfg.sweep.checkpoint_dir = Some(cli.out.join("checkpoints"));
            }
            prepare_out(cli, &cfg)?;
            let store = load_experiment_store(&cfg)?;
            let report = corruption_sweep(&cfg, &store)?;
            if let Some(h) = &report.headline {
                println!(
                    "M_c^max = {}: learned mAP {:.4} vs {} {:.4} (gap {:+.2} points)",
                    h.max_corrupt, h.learned_map, h.best_baseline, h.best_baseline_map, h.gap_points
                );
            }
            write(&cli.out.join("sweep.csv"), report.to_csv())?;
            write(&cli.out.join("sweep.json"), report.to_json())
        }
        Command::InspectImportance(a) => inspect(cli, a),
        Command::StoreInfo(a) => {
            let cfg = resolve_config(cli, Some(a), None)?;
            let store = load_experiment_store(&cfg)?;
            println!("{}", pretty(&store_info(&store))?);
            Ok(())
        }
    }
}

fn pretty<T: serde::Serialize + ?Sized>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn store_info(store: &FeatureStore) -> serde_json::Value {
    let (train, query, gallery) = store.split_counts();
    let clips: Vec<usize> = store.tracklets().iter().map(|t| t.num_clips()).collect();
    let corrupted: usize = store
        .tracklets()
        .iter()
        .map(|t| (0..t.num_clips()).filter(|&i| t.is_corrupted(i)).count())
        .sum();
    json!({
        "feature_dim": store.feature_dim(),
        "num_identities": store.manifest().num_identities,
        "tracklets": store.len(),
        "splits": { "train": train, "query": query, "gallery": gallery },
        "clips_min": clips.iter().min(),
        "clips_max": clips.iter().max(),
        "corrupted_clips": corrupted,
    })
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(cli, Some(&a.store), a.embedding_head.as_ref())?;
    if a.stage != Stage::Aggregation && a.embedding_head.is_some() {
        return Err(Error::InvalidArgument("--embedding-head conflicts with training a new head".into()));
    }
    let t = a.t.unwrap_or(cfg.top_t.t);
    prepare_out(cli, &cfg)?;
    let store = load_experiment_store(&cfg)?;
    let out = &cli.out;
    if a.stage != Stage::Aggregation {
        let head = train_embedding_head(&cfg, &store, Some(out))?;
        println!("embedding head train accuracy {:.4}", head.train_accuracy);
        let path = out.join("embedding_head.csn");
        head.head.to_checkpoint().save(&path)?;
        println!("{}", path.display());
        let log: String = head
            .log
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<std::result::Result<_, _>>()?;
        write(&out.join("embedding_log.jsonl"), log)?;
        cfg.embedding_head = Some(path);
    }
    if a.stage == Stage::Embedding {
        return Ok(());
    }
    let (ck, log, name) = match a.method {
        TrainMethod::Learned => {
            let o = train_aggregation(&cfg, &store, Some(out))?;
            (o.model.to_checkpoint(), o.log_jsonl(), "learned.csn".to_string())
        }
        TrainMethod::ToptE | TrainMethod::ToptTe => {
            let variant = if a.method == TrainMethod::ToptE {
                TopTVariant::EvalOnly
            } else {
                TopTVariant::TrainEval
            };
            let o = train_top_t(&cfg, &store, variant, t, Some(out))?;
            let name = match variant {
                TopTVariant::EvalOnly => "topt-e.csn".to_string(),
                TopTVariant::TrainEval => format!("topt-te_t{t}.csn"),
            };
            (o.model.to_checkpoint(), o.log_jsonl(), name)
        }
    };
    let path = out.join(name);
    ck.save(&path)?;
    println!("{}", path.display());
    write(&out.join("train_log.jsonl"), log)
}

fn load_checkpoint(path: Option<&PathBuf>, kind: ModelKind) -> Result<Option<Checkpoint>> {
    path.map(|p| {
        let ck = Checkpoint::load(p)?;
        ck.expect_kind(kind)?;
        Ok(ck)
    })
    .transpose()
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut cfg = resolve_config(cli, Some(&a.store), a.embedding_head.as_ref())?;
    if let Some(m) = a.max_corrupt {
        cfg.eval.max_corrupt_clips = m;
    }
    if let Some(m) = a.num_clips {
        cfg.num_clips = m;
    }
    if let Some(t) = a.t {
        cfg.top_t.t = t;
    }
    cfg.validate()?;
    prepare_out(cli, &cfg)?;
    let store = load_experiment_store(&cfg)?;
    let head = crate::trainer::load_head(&cfg)?;
    let normalize = a.method != EvalMethod::MeanRaw;
    let ev = &cfg.eval;
    let set = prepare_eval(
        &store,
        cfg.num_clips,
        head.as_ref(),
        normalize,
        ev.max_corrupt_clips,
        ev.corruption_strength,
        cfg.seed,
    )?;
    let echo = json!({ "method": a.method.to_possible_value().map(|v| v.get_name().to_string()), "config": cfg.to_json() });
    let report = match a.method {
        EvalMethod::Learned => {
            let ck = load_checkpoint(a.checkpoint.as_ref(), ModelKind::ScoringNet)?
                .ok_or_else(|| Error::InvalidArgument("--method learned needs --checkpoint".into()))?;
            let net = ScoringNet::from_checkpoint(&ck)?;
            evaluate_estimator(&set, Estimator::Learned(&net), ev.cross_camera, echo)?
        }
        EvalMethod::ToptE | EvalMethod::ToptTe => {
            let proj = match load_checkpoint(a.checkpoint.as_ref(), ModelKind::Projection)? {
                Some(ck) => ProjectionLayer::from_checkpoint(&ck)?,
                None => ProjectionLayer::identity(set.queries[0].clips[0].len()),
            };
            let est = Estimator::TopT {
                projection: &proj,
                t: cfg.top_t.t,
            };
            evaluate_estimator(&set, est, ev.cross_camera, echo)?
        }
        EvalMethod::Mean | EvalMethod::MeanRaw => evaluate_estimator(&set, Estimator::Mean { normalize }, ev.cross_camera, echo)?,
    };
    println!(
        "mAP {:.4}  CMC@1 {:.4}  CMC@5 {:.4}  CMC@20 {:.4}",
        report.map, report.cmc_at_1, report.cmc_at_5, report.cmc_at_20
    );
    write(&cli.out.join("eval.json"), pretty(&report)?)
}

fn find<'a>(set: &'a EvalSet, id: &str, preferred: Split) -> Result<&'a PreparedSequence> {
    let (first, second) = match preferred {
        Split::Gallery => (&set.gallery, &set.queries),
        _ => (&set.queries, &set.gallery),
    };
    first
        .iter()
        .chain(second.iter())
        .find(|s| s.tracklet_id == id)
        .ok_or_else(|| Error::InvalidArgument(format!("no query or gallery tracklet {id:?}")))
}

fn inspect(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let mut cfg = resolve_config(cli, Some(&a.store), a.embedding_head.as_ref())?;
    if let Some(m) = a.max_corrupt {
        cfg.eval.max_corrupt_clips = m;
    }
    cfg.validate()?;
    prepare_out(cli, &cfg)?;
    let store = load_experiment_store(&cfg)?;
    let head = crate::trainer::load_head(&cfg)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    ck.expect_kind(ModelKind::ScoringNet)?;
    let net = ScoringNet::from_checkpoint(&ck)?;
    let ev = &cfg.eval;
    let set = prepare_eval(&store, cfg.num_clips, head.as_ref(), true, ev.max_corrupt_clips, ev.corruption_strength, cfg.seed)?;
    let q = find(&set, &a.query, Split::Query)?;
    let gallery: Vec<&PreparedSequence> = if a.gallery.is_empty() {
        set.gallery.iter().collect()
    } else {
        a.gallery.iter().map(|g| find(&set, g, Split::Gallery)).collect::<Result<_>>()?
    };
    let mut lines = String::new();
    for g in gallery {
        let tr = aggregate_learned(&q.clips, &g.clips, &net)?;
        let mut order: Vec<usize> = (0..tr.alpha.len()).collect();
        order.sort_by(|&x, &y| tr.alpha[y].total_cmp(&tr.alpha[x]));
        let pairs: Vec<serde_json::Value> = order
            .iter()
            .map(|&k| {
                let (i, j) = tr.pairs[k];
                json!({
                    "step": k,
                    "query_clip": i,
                    "gallery_clip": j,
                    "alpha": tr.alpha[k],
                    "cosine": tr.cosines[k],
                    "query_corrupted": q.corrupted[i],
                    "gallery_corrupted": g.corrupted[j],
                })
            })
            .collect();
        let n = order.len();
        let show: Vec<usize> = if n <= 4 { order.clone() } else { vec![order[0], order[1], order[n - 2], order[n - 1]] };
        println!(
            "{} vs {} (same person: {}): similarity {:.4}",
            q.tracklet_id,
            g.tracklet_id,
            q.label.person_id == g.label.person_id,
            tr.similarity
        );
        for k in show {
            let (i, j) = tr.pairs[k];
            println!("  pair ({i}, {j}) alpha {:.4} cosine {:+.4}", tr.alpha[k], tr.cosines[k]);
        }
        let line = json!({
            "query": q.tracklet_id,
            "gallery": g.tracklet_id,
            "same_person": q.label.person_id == g.label.person_id,
            "similarity": tr.similarity,
            "pairs": pairs,
        });
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    write(&cli.out.join("importance.jsonl"), lines)
}
