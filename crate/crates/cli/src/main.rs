//! Command-line interface for the melody-matching engine.
//!
//! Subcommands: `simulate` (synthetic database + queries), `train`
//! (parameter estimation from a manifest), `score` (one target/query
//! pair), `rank` (database ranking), and `eval` (retrieval metrics from
//! rank outputs). All outputs are JSON, written atomically; `rank` emits
//! JSON lines. The environment variable `MM_SEED` overrides `--seed`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use melmatch::evalrank::{
    self, AlignmentPolicy, Database, RankOptions, RocCurve, ScoreMethod,
};
use melmatch::events::QuantizationConfig;
use melmatch::files;
use melmatch::lattice::{forward, viterbi, ScoringContext};
use melmatch::model::build_target_model;
use melmatch::simulate::{
    build_corpus_stats, generate_database, sample_query, CorpusStats, SimulationConfig,
};
use melmatch::training::{train, TrainingOptions, TrainingPair};
use melmatch::{ErrorModelParams, ModelVariant};

#[derive(Parser)]
#[command(name = "melmatch", version, about = "Melody matching for sung queries")]
struct Cli {
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic database, query set, training manifest, and
    /// ground truth.
    Simulate(SimulateArgs),
    /// Estimate error-model parameters from a training manifest.
    Train(TrainArgs),
    /// Score a single target/query pair.
    Score(ScoreArgs),
    /// Rank a database against a query.
    Rank(RankArgs),
    /// Compute retrieval metrics from rank outputs and ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    Restricted,
    Local,
    Cumulative,
}

impl From<VariantArg> for ModelVariant {
    fn from(v: VariantArg) -> ModelVariant {
        match v {
            VariantArg::Full => ModelVariant::Full,
            VariantArg::Restricted => ModelVariant::Restricted,
            VariantArg::Local => ModelVariant::Local,
            VariantArg::Cumulative => ModelVariant::Cumulative,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignmentArg {
    /// Maximum log-likelihood over all start alignments.
    Max,
    /// Score the first alignment only.
    First,
}

impl From<AlignmentArg> for AlignmentPolicy {
    fn from(a: AlignmentArg) -> Self {
        match a {
            AlignmentArg::Max => AlignmentPolicy::Max,
            AlignmentArg::First => AlignmentPolicy::First,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Base RNG seed (overridden by MM_SEED).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    db_size: usize,
    #[arg(long, default_value_t = 20)]
    target_len_min: usize,
    #[arg(long, default_value_t = 24)]
    target_len_max: usize,
    /// Number of queries to sample from the database.
    #[arg(long, default_value_t = 20)]
    query_count: usize,
    #[arg(long, default_value_t = 8)]
    query_len_min: usize,
    #[arg(long = "query-len", default_value_t = 12)]
    query_len_max: usize,
    /// Generative error-model parameters (defaults when omitted).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Note files to harvest corpus statistics from (built-in defaults
    /// when omitted).
    #[arg(long)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON list of {target, query, start_index} entries; paths resolve
    /// relative to the manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Starting parameters (defaults when omitted).
    #[arg(long)]
    init_params: Option<PathBuf>,
    #[arg(long)]
    out_params: PathBuf,
    #[arg(long)]
    out_report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    variant: VariantArg,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    /// Maximum join order of default starting parameters.
    #[arg(long, default_value_t = 2)]
    l: usize,
    /// Maximum elaboration order of default starting parameters.
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// IOI quantization bins of default starting parameters.
    #[arg(long, default_value_t = 29)]
    q: usize,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    query: PathBuf,
    /// Use the most likely single path instead of the full likelihood.
    #[arg(long)]
    viterbi: bool,
    #[arg(long, value_enum, default_value = "max")]
    alignment: AlignmentArg,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    params: PathBuf,
    /// Database file: a JSON array of note-event arrays.
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    query: PathBuf,
    /// Number of results to report.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    viterbi: bool,
    /// Branch-and-bound pruning against the running top-k floor
    /// (requires --viterbi).
    #[arg(long)]
    prune: bool,
    #[arg(long, value_enum, default_value = "max")]
    alignment: AlignmentArg,
    /// Label stamped into each output line.
    #[arg(long)]
    query_id: Option<String>,
    /// Output path for JSON lines (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Concatenated rank outputs (JSON lines with query_id labels).
    #[arg(long)]
    results: PathBuf,
    /// Ground truth written by simulate.
    #[arg(long)]
    truth: PathBuf,
    /// Metrics JSON output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export the ROC curve as CSV.
    #[arg(long)]
    roc_csv: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RankLine {
    #[serde(skip_serializing_if = "Option::is_none")]
    query_id: Option<String>,
    target_id: usize,
    /// Unscorable targets serialize as null and read back as negative
    /// infinity (JSON has no -inf).
    #[serde(with = "null_as_neg_inf")]
    log_likelihood: f64,
    rank: usize,
}

mod null_as_neg_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthEntry {
    query_id: String,
    query: String,
    target_id: usize,
    /// 1-based start alignment within the target.
    start_index: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let run = match cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Score(args) => cmd_score(args),
        Cmd::Rank(args) => cmd_rank(args),
        Cmd::Eval(args) => cmd_eval(args),
    };
    match run {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn cfg_for(params: &ErrorModelParams) -> QuantizationConfig {
    QuantizationConfig { q: params.q, ..QuantizationConfig::default() }
}

fn load_params(path: &Path) -> Result<ErrorModelParams> {
    ErrorModelParams::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_simulate(mut args: SimulateArgs) -> Result<ExitCode> {
    if let Ok(seed) = std::env::var("MM_SEED") {
        args.seed = seed.parse().context("MM_SEED must be an integer")?;
    }
    if args.target_len_min < 1 || args.target_len_min > args.target_len_max {
        bail!("target length range {}..{} is invalid", args.target_len_min, args.target_len_max);
    }
    if args.query_len_min < 1 || args.query_len_min > args.query_len_max {
        bail!("query length range {}..{} is invalid", args.query_len_min, args.query_len_max);
    }
    if args.db_size == 0 && args.query_count > 0 {
        bail!("cannot sample queries from an empty database");
    }
    let params = match &args.params {
        Some(p) => load_params(p)?,
        None => ErrorModelParams::default(),
    };
    let cfg = cfg_for(&params);
    let stats = if args.corpus.is_empty() {
        CorpusStats::builtin_default(cfg.q)
    } else {
        let corpus: Vec<_> = args
            .corpus
            .iter()
            .map(|p| files::load_raw_notes(p))
            .collect::<melmatch::error::Result<_>>()?;
        build_corpus_stats(&corpus, &cfg)?
    };
    let sim = SimulationConfig {
        seed: args.seed,
        database_size: args.db_size,
        target_len: (args.target_len_min, args.target_len_max),
        query_len: (args.query_len_min, args.query_len_max),
    };
    let raw_db = generate_database(&stats, &cfg, &sim)?;
    files::save_database(&args.out_dir.join("db.json"), &raw_db)?;
    let targets: Vec<_> = raw_db
        .iter()
        .map(|t| melmatch::events::quantize_target_sequence(t, &cfg))
        .collect::<melmatch::error::Result<_>>()?;

    let mut picker = StdRng::seed_from_u64(args.seed.wrapping_add(0x9E37_79B9));
    let mut truth = Vec::new();
    let mut manifest = Vec::new();
    let mut written_targets = std::collections::HashSet::new();
    for i in 0..args.query_count {
        let target_id = picker.gen_range(0..raw_db.len());
        let len = picker.gen_range(args.query_len_min..=args.query_len_max);
        let max_start = targets[target_id].len().saturating_sub(len);
        let start = if max_start == 0 { 0 } else { picker.gen_range(0..=max_start) };
        let seed = args.seed.wrapping_add(1_000_003u64.wrapping_mul(i as u64 + 1));
        let sampled = sample_query(&targets[target_id], &params, &cfg, start, len, seed)?;
        let query_id = format!("q{i:04}");
        let qpath = format!("queries/{query_id}.json");
        files::save_notes(&args.out_dir.join(&qpath), &sampled.raw)?;
        let tpath = format!("targets/t{target_id:04}.json");
        if written_targets.insert(target_id) {
            // Target files hold a single note array, not a database.
            let single: Vec<files::NoteFileEntry> = raw_db[target_id]
                .iter()
                .map(|n| files::NoteFileEntry::Symbolic {
                    pitch: n.note_number.round() as i64,
                    ioi_ms: n.ioi_ms,
                })
                .collect();
            files::write_json_atomic(&args.out_dir.join(&tpath), &single)?;
        }
        manifest.push(files::ManifestEntry {
            target: tpath,
            query: qpath.clone(),
            start_index: start + 1,
        });
        truth.push(TruthEntry {
            query_id,
            query: qpath,
            target_id,
            start_index: start + 1,
        });
    }
    files::write_json_atomic(&args.out_dir.join("manifest.json"), &manifest)?;
    files::write_json_atomic(&args.out_dir.join("truth.json"), &truth)?;
    println!(
        "{}",
        serde_json::json!({
            "db": args.out_dir.join("db.json"),
            "targets": raw_db.len(),
            "queries": args.query_count,
            "seed": args.seed,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let init = match &args.init_params {
        Some(p) => load_params(p)?,
        None => ErrorModelParams::default_with(args.l, args.m, args.q),
    };
    let cfg = cfg_for(&init);
    let manifest = files::load_manifest(&args.manifest)?;
    if manifest.is_empty() {
        bail!("manifest {} is empty", args.manifest.display());
    }
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for entry in &manifest {
        if entry.start_index == 0 {
            bail!("start_index is 1-based; got 0 for {}", entry.query);
        }
        let target = files::load_target_events(&base.join(&entry.target), &cfg)?;
        let query = files::load_query_events(&base.join(&entry.query), &cfg)?;
        pairs.push(TrainingPair { target, query, start: entry.start_index - 1 });
    }
    let options = TrainingOptions {
        variant: args.variant.into(),
        tol: args.tol,
        max_iter: args.max_iter,
        floor: args.floor,
    };
    let report = train(&pairs, &init, &options)?;
    report.final_params.save(&args.out_params)?;
    if let Some(out) = &args.out_report {
        files::write_json_atomic(out, &report)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "converged": report.converged,
            "iterations": report.iterations,
            "final_log_likelihood": report.log_likelihood_trace.last(),
            "skipped_queries": report.skipped_queries,
        })
    );
    Ok(if report.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_score(args: ScoreArgs) -> Result<ExitCode> {
    let params = load_params(&args.params)?;
    let cfg = cfg_for(&params);
    let target = files::load_target_events(&args.target, &cfg)?;
    let query = files::load_query_events(&args.query, &cfg)?;
    let model = build_target_model(&target, params.l_max, params.m_max, cfg, 0)?;
    let ctx = ScoringContext::new(&model, &params)?;
    let starts: Vec<usize> = match args.alignment {
        AlignmentArg::Max => (0..target.len()).collect(),
        AlignmentArg::First => vec![0],
    };
    let mut best = f64::NEG_INFINITY;
    let mut best_start = 0;
    for start in starts {
        let ll = if args.viterbi {
            viterbi(&ctx, &query, start)?.log_prob
        } else {
            forward(&ctx, &query, start)?.log_likelihood
        };
        if ll > best {
            best = ll;
            best_start = start;
        }
    }
    println!(
        "{}",
        serde_json::json!({
            "log_likelihood": best,
            "best_start_index": best_start + 1,
            "method": if args.viterbi { "viterbi" } else { "forward" },
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_rank(args: RankArgs) -> Result<ExitCode> {
    if args.prune && !args.viterbi {
        bail!("--prune requires --viterbi");
    }
    let params = load_params(&args.params)?;
    let cfg = cfg_for(&params);
    let targets = files::load_database(&args.db, &cfg)?;
    let db = Database::build(targets, params.l_max, params.m_max, cfg)?;
    let query = files::load_query_events(&args.query, &cfg)?;
    let options = RankOptions {
        k: args.k,
        method: if args.viterbi {
            ScoreMethod::Viterbi { prune: args.prune }
        } else {
            ScoreMethod::Forward
        },
        alignment: args.alignment.into(),
    };
    let result = evalrank::rank_database(&params, &db, &query, &options)?;
    if result.unscorable {
        eprintln!("warning: query has zero probability under every target");
    }
    let mut out = String::new();
    for e in &result.entries {
        let line = RankLine {
            query_id: args.query_id.clone(),
            target_id: e.target_id,
            log_likelihood: e.log_likelihood,
            rank: e.rank,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    match &args.out {
        Some(path) => files::write_text_atomic(path, &out)?,
        None => print!("{out}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let truth: Vec<TruthEntry> = files::read_json(&args.truth)?;
    let text = std::fs::read_to_string(&args.results)
        .with_context(|| format!("reading {}", args.results.display()))?;
    let mut by_query: std::collections::BTreeMap<String, Vec<RankLine>> =
        std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parsed: RankLine = serde_json::from_str(line)
            .with_context(|| format!("parsing rank line: {line}"))?;
        let id = parsed
            .query_id
            .clone()
            .context("rank lines must carry --query-id labels for evaluation")?;
        by_query.entry(id).or_default().push(parsed);
    }
    let mut ranks = Vec::new();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for t in &truth {
        let lines = by_query
            .get(&t.query_id)
            .with_context(|| format!("no rank lines for {}", t.query_id))?;
        let hit = lines.iter().find(|l| l.target_id == t.target_id).with_context(|| {
            format!(
                "correct target {} missing from rank output for {}; \
                 re-run rank with --k equal to the database size",
                t.target_id, t.query_id
            )
        })?;
        ranks.push(hit.rank);
        positives.push(hit.log_likelihood);
        for l in lines {
            if l.target_id != t.target_id {
                negatives.push(l.log_likelihood);
            }
        }
    }
    let metrics = evalrank::evaluate(&ranks, &positives, &negatives)?;
    if let Some(csv) = &args.roc_csv {
        files::write_text_atomic(csv, &RocCurve { points: metrics.roc.clone() }.to_csv())?;
    }
    let json = serde_json::to_string_pretty(&metrics)?;
    match &args.out {
        Some(path) => files::write_text_atomic(path, &json)?,
        None => println!("{json}"),
    }
    Ok(ExitCode::SUCCESS)
}
