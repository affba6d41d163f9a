//! Command-line driver: dataset generation, enrollment, query scenarios,
//! benchmark trials, and cost calculators.

mod dataset;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dataset::{read_dataset, write_dataset, DatasetFile};
use hesearch_core::backend::{HeContext, RotationKeyRegistry, SimParams};
use hesearch_core::compare::degree_for_depth;
use hesearch_core::costs;
use hesearch_core::eval::EngineKind;
use hesearch_core::packing::{self, Layout, LayoutParams};
use hesearch_core::scenarios::{
    self, auto_threshold, CompareConfig, QueryEngine, SyntheticDataset,
};

/// Default series degree for counting-grade comparisons; high enough that
/// accumulated per-slot comparator error stays below the rounding margin
/// on databases of a few thousand entries.
const DEFAULT_DEGREE: usize = 255;

#[derive(Parser)]
#[command(name = "hesearch", about = "Encrypted similarity search simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted matches.
    Gen(GenArgs),
    /// Normalize, diagonal-pack and serialize a dataset.
    Enroll(EnrollArgs),
    /// Run a query scenario against an enrolled database.
    Query(QueryArgs),
    /// Multi-trial benchmark: trial 1 enrolls, later trials deserialize.
    Bench(BenchArgs),
    /// Key-set, operation-count and stream-pool calculators.
    Costs(CostsArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset file.
    #[arg(long, env = "HESEARCH_DATASET")]
    out: PathBuf,
    #[arg(long, default_value_t = 1024)]
    k: usize,
    /// Number of planted matching vectors.
    #[arg(long, default_value_t = 3)]
    km: usize,
    #[arg(long, default_value_t = 512)]
    ell: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// When set, generate gamma^2 planted identities with probe embeddings
    /// for ordered identification instead of query-noise matches.
    #[arg(long, default_value_t = 0)]
    gamma: usize,
}

#[derive(Args)]
struct EnrollArgs {
    #[arg(long, env = "HESEARCH_DATASET")]
    dataset: PathBuf,
    /// Output database directory.
    #[arg(long, env = "HESEARCH_DB")]
    db: PathBuf,
    #[arg(long, value_enum, default_value_t = LayoutArg::Flat)]
    layout: LayoutArg,
    #[arg(long, default_value_t = 1024)]
    num_slots: usize,
    #[arg(long, default_value_t = 23)]
    n1: usize,
    #[arg(long, default_value_t = 13)]
    max_level: u32,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, env = "HESEARCH_DB")]
    db: PathBuf,
    #[arg(long, env = "HESEARCH_DATASET")]
    dataset: PathBuf,
    #[arg(long, value_enum)]
    scenario: Scenario,
    #[arg(long, default_value = "bsgs-diagonal")]
    engine: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Comparison depth budget; maps to a series degree via the lookup
    /// table. Overridden by --degree.
    #[arg(long)]
    kappa: Option<u32>,
    /// Explicit comparator series degree.
    #[arg(long)]
    degree: Option<usize>,
    /// Score threshold; defaults to the midpoint of the measured
    /// match/non-match gap of the dataset.
    #[arg(long)]
    tau: Option<f64>,
    /// Rotation keys to provision: "auto", "baby-only", or a comma list of
    /// signed offsets.
    #[arg(long, default_value = "auto")]
    keys: String,
    /// Append the result record to this file as well as stdout.
    #[arg(long, env = "HESEARCH_REPORT")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, env = "HESEARCH_DATASET")]
    dataset: PathBuf,
    #[arg(long, env = "HESEARCH_DB")]
    db: PathBuf,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = LayoutArg::Flat)]
    layout: LayoutArg,
    #[arg(long, default_value = "bsgs-diagonal")]
    engine: String,
    #[arg(long, default_value_t = 1024)]
    num_slots: usize,
    #[arg(long, default_value_t = 23)]
    n1: usize,
    #[arg(long, default_value_t = 13)]
    max_level: u32,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, env = "HESEARCH_REPORT")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CostsArgs {
    #[command(subcommand)]
    what: CostsCommand,
}

#[derive(Subcommand)]
enum CostsCommand {
    /// Rotation-key census for an engine.
    Keys {
        #[arg(long, default_value = "bsgs-diagonal")]
        engine: String,
        #[arg(long, default_value_t = 512)]
        ell: usize,
        #[arg(long, default_value_t = 23)]
        n1: usize,
        /// Slot-summing span whose power-of-two keys are included
        /// (1 = none).
        #[arg(long, default_value_t = 1)]
        eval_sum_span: usize,
        #[arg(long, default_value_t = hesearch_core::DEFAULT_KEY_BYTES)]
        bytes_per_key: u64,
    },
    /// Closed-form operation counts for an engine.
    Predict {
        #[arg(long, default_value = "bsgs-diagonal")]
        engine: String,
        #[arg(long, default_value_t = 512)]
        ell: usize,
        #[arg(long, default_value_t = 23)]
        n1: usize,
        #[arg(long, default_value_t = 1)]
        groups: usize,
    },
    /// Stream-pool sizing from SM count, free memory and ciphertext size.
    StreamPool {
        #[arg(long)]
        sms: u64,
        #[arg(long)]
        free_bytes: u64,
        #[arg(long, default_value_t = 5 * (1 << 20))]
        ct_bytes: u64,
    },
    /// Run a live similarity pass on a synthetic instance and reconcile
    /// the measured ledger against the prediction.
    Reconcile {
        #[arg(long, default_value = "grouped-bsgs")]
        engine: String,
        #[arg(long, default_value_t = 16)]
        ell: usize,
        #[arg(long, default_value_t = 4)]
        n1: usize,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 32)]
        num_slots: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Flat,
    Replicated,
    PreRotated,
}

impl From<LayoutArg> for Layout {
    fn from(value: LayoutArg) -> Self {
        match value {
            LayoutArg::Flat => Layout::FlatConcat,
            LayoutArg::Replicated => Layout::ReplicatedStride2N,
            LayoutArg::PreRotated => Layout::FlatPreRotated,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scenario {
    Membership,
    Index,
    OrderedId,
    OnlineMembership,
}

impl Scenario {
    fn name(self) -> &'static str {
        match self {
            Scenario::Membership => "membership",
            Scenario::Index => "index",
            Scenario::OrderedId => "ordered-id",
            Scenario::OnlineMembership => "online-membership",
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Enroll(args) => run_enroll(args),
        Command::Query(args) => run_query(args),
        Command::Bench(args) => run_bench(args),
        Command::Costs(args) => run_costs(args),
    };
    match outcome {
        Ok(true) => {}
        Ok(false) => std::process::exit(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn run_gen(args: GenArgs) -> anyhow::Result<bool> {
    let ds = if args.gamma > 0 {
        let batch = scenarios::generate_identification_batch(args.k, args.gamma, args.ell, args.seed)?;
        DatasetFile {
            ell: args.ell,
            seed: args.seed,
            gamma: args.gamma,
            query: vec![0.0; args.ell],
            planted: batch.planted,
            vectors: batch.vectors,
            embeddings: batch.embeddings,
        }
    } else {
        let synth = scenarios::generate_synthetic_dataset(args.k, args.km, args.ell, args.seed)?;
        DatasetFile {
            ell: args.ell,
            seed: args.seed,
            gamma: 0,
            query: synth.query,
            planted: synth.planted,
            vectors: synth.vectors,
            embeddings: Vec::new(),
        }
    };
    write_dataset(&ds, &args.out)?;
    println!(
        "{}",
        json!({
            "command": "gen",
            "path": args.out.display().to_string(),
            "k": ds.k(),
            "km": ds.km(),
            "ell": ds.ell,
            "seed": ds.seed,
            "gamma": ds.gamma,
            "planted": ds.planted,
        })
    );
    Ok(true)
}

fn run_enroll(args: EnrollArgs) -> anyhow::Result<bool> {
    let ds = read_dataset(&args.dataset)?;
    let params = LayoutParams::new(ds.ell, args.num_slots, args.n1, args.layout.into())?;
    let ctx = HeContext::new(SimParams::new(args.num_slots, args.max_level)?)?;
    let db = packing::enroll(&ctx, &ds.vectors, &params)?;
    packing::serialize_db(&db, &args.db)?;
    let file_count = db.diagonal_count();
    let engine = match params.layout {
        Layout::FlatConcat => EngineKind::Hydia,
        Layout::FlatPreRotated => EngineKind::GroupedBsgs,
        Layout::ReplicatedStride2N => EngineKind::SenderBlockPacked,
    };
    let keys = costs::key_set_for(engine, ds.ell, args.n1, 1);
    println!(
        "{}",
        json!({
            "command": "enroll",
            "db": args.db.display().to_string(),
            "layout": params.layout.name(),
            "pre_rotation": db.pre_rotation().code(),
            "k": db.vector_count(),
            "groups": db.group_count(),
            "diagonal_files": file_count,
            "rotation_keys_required": keys.len(),
            "ledger": ctx.ledger(),
        })
    );
    Ok(true)
}

fn parse_keys(
    ctx: &HeContext,
    selector: &str,
    engine: EngineKind,
    ell: usize,
    n1: usize,
) -> anyhow::Result<RotationKeyRegistry> {
    let mut registry = RotationKeyRegistry::new(ctx.num_slots());
    match selector {
        "auto" => {
            ctx.register_keys(&mut registry, costs::key_set_for(engine, ell, n1, ctx.num_slots()));
        }
        "baby-only" => {
            ctx.register_keys(&mut registry, 1..n1 as i64);
        }
        list => {
            let offsets: Vec<i64> = list
                .split(',')
                .map(|s| s.trim().parse::<i64>().map_err(|e| anyhow!("bad key offset '{s}': {e}")))
                .collect::<anyhow::Result<_>>()?;
            ctx.register_keys(&mut registry, offsets);
        }
    }
    Ok(registry)
}

fn comparator_degree(kappa: Option<u32>, degree: Option<usize>) -> anyhow::Result<usize> {
    if let Some(d) = degree {
        return Ok(d);
    }
    if let Some(k) = kappa {
        return Ok(degree_for_depth(k)?);
    }
    Ok(DEFAULT_DEGREE)
}

fn synthetic_view(ds: &DatasetFile) -> SyntheticDataset {
    SyntheticDataset {
        vectors: ds.vectors.clone(),
        query: ds.query.clone(),
        planted: ds.planted.clone(),
        seed: ds.seed,
    }
}

fn emit(record: &serde_json::Value, report: Option<&Path>) -> anyhow::Result<()> {
    let line = record.to_string();
    println!("{line}");
    if let Some(path) = report {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening report {}", path.display()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn run_query(args: QueryArgs) -> anyhow::Result<bool> {
    let ds = read_dataset(&args.dataset)?;
    let header = packing::read_header(&args.db)?;
    let engine_kind = EngineKind::from_str(&args.engine)?;
    if engine_kind.layout() != header.layout {
        bail!(
            "engine '{}' needs a {} database but {} is {}",
            engine_kind,
            engine_kind.layout().name(),
            args.db.display(),
            header.layout.name()
        );
    }
    let ctx = HeContext::new(SimParams::new(header.num_slots, header.max_level)?)?;
    let db = packing::deserialize_db(&ctx, &args.db)?;
    let keys = parse_keys(&ctx, &args.keys, engine_kind, header.ell, header.n1)?;
    let engine = QueryEngine {
        ctx: &ctx,
        engine: engine_kind,
        keys: &keys,
        n1: header.n1,
        workers: args.workers.max(1),
        chunk: header.n1,
    };
    let degree = comparator_degree(args.kappa, args.degree)?;
    let tau = match args.tau {
        Some(t) => t,
        None if args.scenario == Scenario::OrderedId => {
            let batch = scenarios::IdentificationBatch {
                vectors: ds.vectors.clone(),
                planted: ds.planted.clone(),
                embeddings: ds.embeddings.clone(),
            };
            scenarios::auto_threshold_for_batch(&batch, ds.gamma)?
        }
        None => auto_threshold(&synthetic_view(&ds))?,
    };
    let cmp = CompareConfig { tau, degree };
    let started = ctx.ledger();

    let (decoded, expected, pass) = match args.scenario {
        Scenario::Membership => {
            let bundle = scenarios::single_query(&ctx, &ds.query)?;
            let result = scenarios::membership_query(&engine, &db, &bundle, &cmp)?;
            let pass = result.decoded_count == ds.km() as i64;
            (
                json!({"count": result.decoded_count, "raw_slot0": result.raw_slot0}),
                json!({"count": ds.km()}),
                pass,
            )
        }
        Scenario::Index => {
            let bundle = scenarios::single_query(&ctx, &ds.query)?;
            let result = scenarios::index_query(&engine, &db, &bundle, &cmp)?;
            let pass = result.matched_indices == ds.planted;
            (
                json!({"matched": result.matched_indices}),
                json!({"matched": ds.planted}),
                pass,
            )
        }
        Scenario::OrderedId => {
            if ds.gamma < 2 {
                bail!("dataset has no identification batch; regenerate with gen --gamma");
            }
            let result =
                scenarios::ordered_identification(&engine, &db, &ds.embeddings, ds.gamma, &cmp)?;
            let expected: Vec<(usize, usize)> =
                ds.planted.iter().copied().enumerate().collect();
            let mut expected_sorted = expected;
            expected_sorted.sort_unstable();
            let pass = result.assignments == expected_sorted
                && result.queries_issued == 2 * ds.gamma;
            (
                json!({
                    "assignments": result.assignments,
                    "queries_issued": result.queries_issued,
                }),
                json!({"assignments": expected_sorted, "queries_issued": 2 * ds.gamma}),
                pass,
            )
        }
        Scenario::OnlineMembership => {
            let bundle = scenarios::online_scaled_query(&ctx, &ds.query, db.group_count())?;
            let (result, run) = scenarios::online_aggregated_membership(&engine, &db, &bundle, &cmp)?;
            let pass = (result.decoded_count > 0) == (ds.km() > 0);
            (
                json!({
                    "count": result.decoded_count,
                    "raw_slot0": result.raw_slot0,
                    "merge_adds": run.merge_adds,
                    "similarity_mults": run.similarity_mults,
                    "comparisons": run.comparator_invocations,
                }),
                json!({"positive": ds.km() > 0}),
                pass,
            )
        }
    };

    let record = json!({
        "command": "query",
        "scenario": args.scenario.name(),
        "engine": engine_kind.name(),
        "ell": header.ell,
        "num_slots": header.num_slots,
        "k": ds.k(),
        "km": ds.km(),
        "gamma": ds.gamma,
        "seed": ds.seed,
        "tau": tau,
        "degree": degree,
        "workers": args.workers,
        "decoded": decoded,
        "expected": expected,
        "pass": pass,
        "ledger": ctx.ledger().since(&started),
    });
    emit(&record, args.report.as_deref())?;
    Ok(pass)
}

fn run_bench(args: BenchArgs) -> anyhow::Result<bool> {
    let ds = read_dataset(&args.dataset)?;
    let engine_kind = EngineKind::from_str(&args.engine)?;
    let layout: Layout = args.layout.into();
    if engine_kind.layout() != layout {
        bail!("engine '{engine_kind}' needs the {} layout", engine_kind.layout().name());
    }
    let degree = args.degree.unwrap_or(DEFAULT_DEGREE);
    let tau = match args.tau {
        Some(t) => t,
        None => auto_threshold(&synthetic_view(&ds))?,
    };
    let cmp = CompareConfig { tau, degree };
    let params = LayoutParams::new(ds.ell, args.num_slots, args.n1, layout)?;

    let mut all_pass = true;
    let mut query_ledgers = Vec::new();
    for trial in 1..=args.trials.max(1) {
        let ctx = HeContext::new(SimParams::new(args.num_slots, args.max_level)?)?;
        let db = if trial == 1 {
            let db = packing::enroll(&ctx, &ds.vectors, &params)?;
            packing::serialize_db(&db, &args.db)?;
            db
        } else {
            packing::deserialize_db(&ctx, &args.db)?
        };
        let keys = parse_keys(&ctx, "auto", engine_kind, ds.ell, args.n1)?;
        let engine = QueryEngine {
            ctx: &ctx,
            engine: engine_kind,
            keys: &keys,
            n1: args.n1,
            workers: args.workers.max(1),
            chunk: args.n1,
        };
        let enroll_snapshot = ctx.ledger();
        let bundle = scenarios::single_query(&ctx, &ds.query)?;
        let membership = scenarios::membership_query(&engine, &db, &bundle, &cmp)?;
        let index = scenarios::index_query(&engine, &db, &bundle, &cmp)?;
        let query_ledger = ctx.ledger().since(&enroll_snapshot);

        // Correctness: membership positive iff planted matches exist, and
        // the index set equals the planted set exactly.
        let membership_ok = (membership.decoded_count > 0) == (ds.km() > 0);
        let index_ok = index.matched_indices == ds.planted;
        let pass = membership_ok && index_ok;
        all_pass &= pass;
        if trial > 1 {
            query_ledgers.push(query_ledger);
        }
        let record = json!({
            "command": "bench",
            "trial": trial,
            "includes_enrollment": trial == 1,
            "engine": engine_kind.name(),
            "scenario": "membership+index",
            "membership_count": membership.decoded_count,
            "index_matches": index.matched_indices,
            "pass": pass,
            "ledger_trial": ctx.ledger(),
            "ledger_queries": query_ledger,
        });
        emit(&record, args.report.as_deref())?;
    }

    let stable = query_ledgers.windows(2).all(|w| w[0] == w[1]);
    let summary = json!({
        "command": "bench-summary",
        "trials": args.trials,
        "aggregated_trials": query_ledgers.len(),
        "query_ledgers_stable": stable,
        "pass": all_pass && stable,
    });
    emit(&summary, args.report.as_deref())?;
    Ok(all_pass && stable)
}

fn run_costs(args: CostsArgs) -> anyhow::Result<bool> {
    match args.what {
        CostsCommand::Keys { engine, ell, n1, eval_sum_span, bytes_per_key } => {
            let engine = EngineKind::from_str(&engine)?;
            let set = costs::key_set_for(engine, ell, n1, eval_sum_span);
            println!(
                "{}",
                json!({
                    "command": "costs-keys",
                    "engine": engine.name(),
                    "ell": ell,
                    "n1": n1,
                    "eval_sum_span": eval_sum_span,
                    "count": set.len(),
                    "memory_bytes": set.len() as u64 * bytes_per_key,
                    "offsets": set.iter().collect::<Vec<_>>(),
                })
            );
            Ok(true)
        }
        CostsCommand::Predict { engine, ell, n1, groups } => {
            let engine = EngineKind::from_str(&engine)?;
            let p = costs::predict_costs(engine, ell, n1, groups);
            println!("{}", json!({"command": "costs-predict", "prediction": p}));
            Ok(true)
        }
        CostsCommand::StreamPool { sms, free_bytes, ct_bytes } => {
            let s = costs::stream_pool_size(sms, free_bytes, ct_bytes);
            println!(
                "{}",
                json!({
                    "command": "costs-stream-pool",
                    "sms": sms,
                    "free_bytes": free_bytes,
                    "ct_bytes": ct_bytes,
                    "pool_size": s,
                })
            );
            Ok(true)
        }
        CostsCommand::Reconcile { engine, ell, n1, groups, num_slots, seed } => {
            let engine_kind = EngineKind::from_str(&engine)?;
            let report = reconcile_live(engine_kind, ell, n1, groups, num_slots, seed)?;
            let pass = report.pass();
            println!("{}", json!({"command": "costs-reconcile", "report": report, "pass": pass}));
            Ok(pass)
        }
    }
}

/// Enroll a small synthetic instance, run the similarity engine once, and
/// reconcile the measured ledger against the closed-form prediction.
fn reconcile_live(
    engine_kind: EngineKind,
    ell: usize,
    n1: usize,
    groups: usize,
    num_slots: usize,
    seed: u64,
) -> anyhow::Result<costs::ReconcileReport> {
    let k = match engine_kind {
        EngineKind::SenderBlockPacked => {
            // `groups` aggregates of M/2 vector groups each.
            let m = num_slots / ell;
            groups * (m / 2) * ell
        }
        _ => groups * num_slots,
    };
    let data = scenarios::generate_synthetic_dataset(k, 0, ell, seed)?;
    let ctx = HeContext::new(SimParams::new(num_slots, 13)?)?;
    let params = LayoutParams::new(ell, num_slots, n1, engine_kind.layout())?;
    let db = packing::enroll(&ctx, &data.vectors, &params)?;
    anyhow::ensure!(db.group_count() == groups, "instance produced {} groups", db.group_count());
    let keys = parse_keys(&ctx, "auto", engine_kind, ell, n1)?;
    let engine = QueryEngine {
        ctx: &ctx,
        engine: engine_kind,
        keys: &keys,
        n1,
        workers: 1,
        chunk: n1,
    };
    let bundle = scenarios::single_query(&ctx, &data.query)?;
    let before = ctx.ledger();
    engine.similarity(&db, &bundle)?;
    let measured = costs::MeasuredRun {
        scenario: costs::ScenarioDesc {
            engine: engine_kind.name(),
            ell,
            n1,
            n2: ell.div_ceil(n1),
            groups,
        },
        ledger: ctx.ledger().since(&before),
    };
    let prediction = costs::predict_costs(engine_kind, ell, n1, groups);
    Ok(costs::reconcile(&prediction, &measured)?)
}
