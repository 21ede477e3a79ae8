//! Command implementations behind the `fedsel` binary.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fedsel::config::{LoadedConfig, PerformanceMetric, PolicyKind, RunConfig};
use fedsel::output::{read_metrics, run_to_dir, write_atomic, Manifest, CHECKPOINT_DIR, METRICS_FILE};
use fedsel::sim::{metric_of, prepare_data, rounds_to_target, Checkpoint};
use serde::Serialize;
use serde_json::Value;

/// Environment variable naming the default root for run directories.
pub const OUT_ENV: &str = "FEDSEL_OUT";

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fedsel", version, about = "Federated learning client-selection simulator")]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Emit log records as JSON lines.
    #[arg(long, global = true)]
    pub json_logs: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation and write metrics, checkpoints and a manifest.
    Run(RunArgs),
    /// Show the client partition a config produces.
    Partition(PartitionArgs),
    /// Compare finished runs.
    Compare(CompareArgs),
    /// Summarize a checkpoint file or the latest checkpoint of a run.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides any field, e.g. `--set agent.eps_end=0.35`. The value is
    /// parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// random, full or flash-rl.
    #[arg(long)]
    pub policy: Option<String>,
    /// Overrides `total_rounds`.
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Run directory. Defaults to `<FEDSEL_OUT or runs>/<policy>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Where to write the plan JSON. Printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Accuracy,
    MacroF1,
}

impl From<MetricArg> for PerformanceMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Accuracy => PerformanceMetric::Accuracy,
            MetricArg::MacroF1 => PerformanceMetric::MacroF1,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories; the first is the baseline for latency reduction.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Targets for the rounds-to-target columns.
    #[arg(long = "target")]
    pub targets: Vec<f64>,
    #[arg(long, value_enum, default_value = "accuracy")]
    pub metric: MetricArg,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// A checkpoint JSON file or a run directory.
    pub path: PathBuf,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            error: error.into(),
        }
    }
}

impl From<fedsel::Error> for Failure {
    fn from(e: fedsel::Error) -> Self {
        use fedsel::Error::*;
        match e {
            Config(_) | InfeasiblePartition(_) | InvalidArgument(_) => Failure::usage(e),
            _ => Failure::runtime(e),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn init_logging(quiet: bool, json: bool) {
    let level = if quiet { "warn" } else { "info" };
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level));
    if json {
        builder.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    let _ = builder.try_init();
}

pub fn execute(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Partition(a) => cmd_partition(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

// ---------------------------------------------------------------------------
// config loading
// ---------------------------------------------------------------------------

/// Set `path` (dot separated) inside `root`, creating objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(anyhow!("bad override path `{path}`"));
    }
    for key in &keys[..keys.len() - 1] {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("override `{path}`: `{key}` is not inside an object"))?;
        cur = map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let map = cur
        .as_object_mut()
        .ok_or_else(|| anyhow!("override `{path}` does not point into an object"))?;
    map.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_set(spec: &str) -> anyhow::Result<(&str, Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not PATH=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.trim(), value))
}

/// Read the config file and apply overrides in order: `--set`, then the
/// dedicated flags. Overridden fields count as explicitly given.
fn load_config(args: &ConfigArgs, extra: &[(&str, Value)]) -> Result<LoadedConfig, Failure> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))
        .map_err(Failure::usage)?;
    let mut raw: Value = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not valid JSON", args.config.display()))
        .map_err(Failure::usage)?;
    if !raw.is_object() {
        return Err(Failure::usage(anyhow!("config must be a JSON object")));
    }
    for spec in &args.sets {
        let (path, value) = parse_set(spec).map_err(Failure::usage)?;
        set_path(&mut raw, path, value).map_err(Failure::usage)?;
    }
    if let Some(seed) = args.seed {
        raw["seed"] = seed.into();
    }
    for (path, value) in extra {
        set_path(&mut raw, path, value.clone()).map_err(Failure::usage)?;
    }
    Ok(RunConfig::from_value(raw)?)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

pub fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{}-seed{}", cfg.policy.name(), cfg.seed))
}

pub fn cmd_run(args: &RunArgs) -> CmdResult {
    let mut extra = Vec::new();
    if let Some(p) = &args.policy {
        let kind = PolicyKind::parse(p).ok_or_else(|| {
            Failure::usage(anyhow!("unknown policy `{p}`; expected random, full or flash-rl"))
        })?;
        extra.push(("policy", serde_json::to_value(kind).map_err(Failure::runtime)?));
    }
    if let Some(r) = args.rounds {
        extra.push(("total_rounds", r.into()));
    }
    let loaded = load_config(&args.config, &extra)?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| default_run_dir(&loaded.config));
    let cfg = loaded.config.clone();
    log::info!(
        "running {} for {} rounds (N={}, U={}, seed {}) into {}",
        cfg.policy.name(),
        cfg.total_rounds,
        cfg.num_clients,
        cfg.clients_per_round,
        cfg.seed,
        dir.display()
    );
    let result = run_to_dir(loaded, &dir)?;
    match result.records.last() {
        Some(last) => log::info!(
            "done: accuracy {:.4}, macro-F1 {:.4}, cumulative latency {:.4}s",
            last.global_accuracy,
            last.global_macro_f1,
            last.cumulative_latency
        ),
        None => log::info!("no rounds requested; wrote manifest only"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// partition
// ---------------------------------------------------------------------------

/// Fixed-width per-client label histogram.
pub fn histogram_table(hist: &[Vec<usize>]) -> String {
    let classes = hist.first().map_or(0, Vec::len);
    let mut out = String::new();
    let _ = write!(out, "{:>6} {:>6} {:>6}", "client", "size", "labels");
    for c in 0..classes {
        let _ = write!(out, " {:>5}", format!("y{c}"));
    }
    out.push('\n');
    for (k, h) in hist.iter().enumerate() {
        let size: usize = h.iter().sum();
        let labels = h.iter().filter(|&&n| n > 0).count();
        let _ = write!(out, "{k:>6} {size:>6} {labels:>6}");
        for n in h {
            let _ = write!(out, " {n:>5}");
        }
        out.push('\n');
    }
    out
}

pub fn cmd_partition(args: &PartitionArgs) -> CmdResult {
    let loaded = load_config(&args.config, &[])?;
    let prepared = prepare_data(&loaded.config)?;
    let plan_json = prepared.plan.to_json()?;
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))
                    .map_err(Failure::runtime)?;
            }
            write_atomic(path, plan_json.as_bytes())?;
            log::info!("wrote partition plan to {}", path.display());
        }
        None => println!("{plan_json}"),
    }
    let hist = prepared.plan.label_histograms(&prepared.train);
    // Keep stdout clean for the plan JSON when no file was given.
    if args.out.is_some() {
        print!("{}", histogram_table(&hist));
    } else {
        eprint!("{}", histogram_table(&hist));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: String,
    pub policy: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_metric: f64,
    pub cumulative_latency: f64,
    /// Relative to the first run, in percent.
    pub latency_reduction_pct: f64,
    /// One entry per requested target.
    pub rounds_to_target: Vec<Option<usize>>,
}

fn load_run(dir: &Path) -> Result<(Manifest, Vec<fedsel::sim::RoundRecord>), Failure> {
    let manifest = Manifest::read(dir)
        .with_context(|| format!("{} is not a run directory", dir.display()))
        .map_err(Failure::usage)?;
    let metrics = dir.join(METRICS_FILE);
    let records = read_metrics(&metrics)
        .with_context(|| format!("{} has an unreadable metrics file", dir.display()))
        .map_err(Failure::usage)?;
    if records.is_empty() {
        return Err(Failure::usage(anyhow!("{} has no completed rounds", dir.display())));
    }
    Ok((manifest, records))
}

pub fn compare_runs(
    dirs: &[PathBuf],
    targets: &[f64],
    metric: PerformanceMetric,
) -> Result<Vec<ComparisonRow>, Failure> {
    if dirs.len() < 2 {
        return Err(Failure::usage(anyhow!(
            "compare needs at least two run directories, got {}",
            dirs.len()
        )));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    let mut baseline_latency = None;
    let mut dataset = None;
    for dir in dirs {
        let (manifest, records) = load_run(dir)?;
        let data = serde_json::to_value(&manifest.config.dataset).map_err(Failure::runtime)?;
        match &dataset {
            None => dataset = Some(data),
            Some(first) if *first != data => {
                return Err(Failure::usage(anyhow!(
                    "{} was run on a different dataset than {}",
                    dir.display(),
                    dirs[0].display()
                )))
            }
            Some(_) => {}
        }
        let last = records.last().expect("checked non-empty");
        let base = *baseline_latency.get_or_insert(last.cumulative_latency);
        let reduction = if base > 0.0 {
            100.0 * (1.0 - last.cumulative_latency / base)
        } else {
            0.0
        };
        rows.push(ComparisonRow {
            run: dir.display().to_string(),
            policy: manifest.policy,
            seed: manifest.seed,
            rounds: records.len(),
            final_metric: metric_of(last, metric),
            cumulative_latency: last.cumulative_latency,
            latency_reduction_pct: reduction,
            rounds_to_target: targets
                .iter()
                .map(|&t| rounds_to_target(&records, metric, t))
                .collect(),
        });
    }
    if rows.iter().any(|r| r.rounds != rows[0].rounds) {
        log::warn!("runs have different round counts; latency totals are not like for like");
    }
    Ok(rows)
}

fn header(targets: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = [
        "run",
        "policy",
        "seed",
        "rounds",
        "final_metric",
        "cumulative_latency",
        "latency_reduction_pct",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(targets.iter().map(|t| format!("rounds_to_{t}")));
    h
}

fn cells(row: &ComparisonRow) -> Vec<String> {
    let mut c = vec![
        row.run.clone(),
        row.policy.clone(),
        row.seed.to_string(),
        row.rounds.to_string(),
        format!("{:.4}", row.final_metric),
        format!("{:.6}", row.cumulative_latency),
        format!("{:.2}", row.latency_reduction_pct),
    ];
    c.extend(
        row.rounds_to_target
            .iter()
            .map(|r| r.map_or_else(|| "-".to_string(), |n| n.to_string())),
    );
    c
}

pub fn comparison_csv(rows: &[ComparisonRow], targets: &[f64]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(targets))?;
    for row in rows {
        w.write_record(cells(row))?;
    }
    w.into_inner().map_err(|e| anyhow!("flushing csv: {e}"))
}

pub fn comparison_text(rows: &[ComparisonRow], targets: &[f64]) -> String {
    let mut table = vec![header(targets)];
    table.extend(rows.iter().map(cells));
    let widths: Vec<usize> = (0..table[0].len())
        .map(|i| table.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &table {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn cmd_compare(args: &CompareArgs) -> CmdResult {
    let metric = args.metric.into();
    let rows = compare_runs(&args.runs, &args.targets, metric)?;
    print!("{}", comparison_text(&rows, &args.targets));
    if let Some(path) = &args.csv {
        let bytes = comparison_csv(&rows, &args.targets).map_err(Failure::runtime)?;
        write_atomic(path, &bytes)?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

fn latest_checkpoint(dir: &Path) -> Result<PathBuf, Failure> {
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let entries = std::fs::read_dir(&ckpt_dir)
        .with_context(|| format!("{} has no checkpoints", dir.display()))
        .map_err(Failure::usage)?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    // Zero-padded names sort by round.
    files.sort();
    files
        .pop()
        .ok_or_else(|| Failure::usage(anyhow!("{} is empty", ckpt_dir.display())))
}

pub fn checkpoint_summary(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    let norm = ckpt.global.0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let _ = writeln!(out, "round               {}", ckpt.round);
    let _ = writeln!(out, "cumulative latency  {:.6}s", ckpt.cumulative_latency);
    let _ = writeln!(out, "global parameters   {} (l2 norm {:.4})", ckpt.global.0.len(), norm);
    let mut ranked: Vec<(usize, f64)> = ckpt.reputation.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top: Vec<String> = ranked
        .iter()
        .take(5)
        .map(|(k, r)| format!("{k}:{r:.4}"))
        .collect();
    let _ = writeln!(out, "clients             {}", ckpt.reputation.len());
    let _ = writeln!(out, "top reputation      {}", top.join(" "));
    match &ckpt.agent {
        Some(a) => {
            let _ = writeln!(out, "agent steps         {}", a.step_counter);
            let _ = writeln!(out, "agent rounds seen   {}", a.rounds_seen);
            let _ = writeln!(
                out,
                "epsilon schedule    {} -> {} over {} rounds",
                a.epsilon.eps_init, a.epsilon.eps_end, a.epsilon.decay_rounds
            );
            let _ = writeln!(out, "pca components      {}", a.projector.components.len());
        }
        None => {
            let _ = writeln!(out, "agent               none");
        }
    }
    out
}

pub fn cmd_inspect(args: &InspectArgs) -> CmdResult {
    let path = if args.path.is_dir() {
        latest_checkpoint(&args.path)?
    } else {
        args.path.clone()
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::usage)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a checkpoint", path.display()))
        .map_err(Failure::usage)?;
    println!("checkpoint          {}", path.display());
    print!("{}", checkpoint_summary(&ckpt));
    Ok(())
}
