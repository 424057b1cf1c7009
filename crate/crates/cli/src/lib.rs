//! The `fairgkd` command line: configuration loading and merging, the five
//! subcommands, and the mapping from errors to exit codes.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use fairgkd_core::graph::{generate_synthetic, load_dataset, write_dataset, DatasetMeta, Graph, GraphError, SplitConfig, SynthConfig, ViewKind};
use fairgkd_core::metrics::MetricsReport;
use fairgkd_core::models::BackboneKind;
use fairgkd_core::pipeline::{
    evaluate_checkpoint, read_seed_metrics, run_baseline, run_experiment, run_hash, seed_dir, write_atomic,
    ErrorCategory, PipelineError, SoftLoss, TrainConfig, DOCUMENTED_DEFAULTS,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "FAIRGKD_OUT";
pub const DEFAULT_OUT: &str = "runs";
/// Name of the resolved-configuration snapshot written next to the reports.
pub const SNAPSHOT: &str = "config.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Pipeline(PipelineError::Data(e))
    }
}

impl CliError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            CliError::Usage(_) => ErrorCategory::Usage,
            CliError::Pipeline(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        exit_code(self.category())
    }
}

pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Usage => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Training => 3,
    }
}

/// Where the graph comes from. At most one of `dataset` and `synthetic`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset descriptor (TOML), relative to the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthConfig>,
    /// Seed of the synthetic generator.
    pub graph_seed: u64,
    /// Overrides the descriptor's standardisation flag.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standardize: Option<bool>,
    /// Overrides the split ratios of the descriptor or generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitConfig>,
}

/// The configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message().trim_end())))
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(d) = cfg.data.dataset.as_mut() {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if let Some(o) = cfg.out.as_mut() {
            if o.is_relative() {
                *o = base.join(&*o);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load_graph(&self) -> Result<Graph, CliError> {
        let d = &self.data;
        match (&d.dataset, &d.synthetic) {
            (Some(_), Some(_)) => Err(CliError::Usage("data.dataset and data.synthetic are mutually exclusive".into())),
            (Some(path), None) => {
                let mut meta = DatasetMeta::from_toml_file(path)?;
                if let Some(s) = d.standardize {
                    meta.standardize = s;
                }
                if let Some(s) = d.splits {
                    meta.splits = s;
                }
                let base = path.parent().unwrap_or(Path::new(""));
                let (edges, attrs) = meta.resolve_files(base)?;
                Ok(load_dataset(&edges, &attrs, &meta)?)
            }
            (None, synthetic) => {
                if d.standardize.is_some() {
                    return Err(CliError::Usage("data.standardize applies to dataset files only".into()));
                }
                let mut params = synthetic.clone().unwrap_or_default();
                if let Some(s) = d.splits {
                    params.splits = s;
                }
                Ok(generate_synthetic(&params, d.graph_seed)?)
            }
        }
    }
}

const AFTER_HELP: &str = "Flags override the config file, which overrides the built-in defaults.\n\
Exit codes: 0 success, 1 usage, 2 data error, 3 training failure.";

#[derive(Debug, Parser)]
#[command(name = "fairgkd", version, about = "Fair graph neural networks by distillation from partial-data experts")]
#[command(after_help = AFTER_HELP, after_long_help = defaults_table())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate a dataset, then print its summary
    Prepare,
    /// Generate the synthetic biased graph and write it as dataset files
    Synth,
    /// Train the backbone on partial or full graph data
    Baseline,
    /// Run the full distillation pipeline and write reports and artifacts
    Train,
    /// Recompute test metrics from stored student checkpoints
    Evaluate,
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// Configuration file (TOML) [default: none] [repo]
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset descriptor, replacing the synthetic graph [default: synthetic graph] [repo]
    #[arg(long, global = true, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// First run seed; the generator seed for `synth` [default: 0] [repo]
    #[arg(long, global = true, value_name = "N", conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated run seeds [default: seed..seed+runs] [repo]
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Number of runs [default: 10] [paper]
    #[arg(long, global = true, value_name = "N")]
    pub runs: Option<usize>,
    /// Output root; the FAIRGKD_OUT environment variable sits between this flag and the config file [default: runs] [repo]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Baseline strategy: full, nodes-only, topology-only or all [default: all] [repo]
    #[arg(long, global = true, value_name = "NAME")]
    pub strategy: Option<String>,
    /// GNN backbone: gcn or gin [default: gcn] [paper]
    #[arg(long, global = true, value_name = "NAME")]
    pub backbone: Option<BackboneKind>,
    /// Keep the sensitive attribute in the student's input [default: false] [paper]
    #[arg(long, global = true)]
    pub with_sensitive: bool,
    /// Soft loss: ntxent or mse [default: ntxent] [paper]
    #[arg(long, global = true, value_name = "NAME")]
    pub soft_loss: Option<SoftLoss>,
    /// Training epochs per stage [default: 1000] [paper]
    #[arg(long, global = true, value_name = "N")]
    pub epochs: Option<usize>,
}

fn defaults_table() -> String {
    let mut s = String::from(AFTER_HELP);
    s.push_str("\n\nConfig keys under [train] (default, provenance):\n");
    for (key, default, provenance) in DOCUMENTED_DEFAULTS {
        let _ = writeln!(s, "  {key:<16} {default:<28} [{provenance}]");
    }
    s.push_str("\nConfig keys under [data]: dataset | synthetic, graph_seed (0), standardize, splits [repo]\n");
    s.push_str("Top-level key: out (runs) [repo]");
    s
}

/// Parses a strategy list for the `baseline` command.
pub fn parse_strategy(name: &str) -> Result<Vec<ViewKind>, CliError> {
    if name == "all" {
        return Ok(ViewKind::ALL.to_vec());
    }
    ViewKind::ALL
        .into_iter()
        .find(|k| k.as_str() == name)
        .map(|k| vec![k])
        .ok_or_else(|| CliError::Usage(format!("unknown strategy {name:?} (expected full, nodes-only, topology-only or all)")))
}

/// A fully resolved invocation.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: CliConfig,
    pub out: PathBuf,
}

/// Merges flags over the environment, the config file and the defaults.
pub fn resolve(common: &CommonArgs, command: &Command, env_out: Option<OsString>) -> Result<Resolved, CliError> {
    let mut config = match &common.config {
        Some(p) => CliConfig::from_file(p)?,
        None => CliConfig::default(),
    };
    let out = common
        .out
        .clone()
        .or_else(|| env_out.filter(|s| !s.is_empty()).map(PathBuf::from))
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    if let Some(d) = &common.dataset {
        config.data.dataset = Some(d.clone());
        config.data.synthetic = None;
    }
    let t = &mut config.train;
    match command {
        Command::Synth => {
            if let Some(s) = common.seed {
                config.data.graph_seed = s;
            }
        }
        _ => {
            if let Some(s) = common.seed {
                t.seed = s;
                t.seeds = None;
            }
        }
    }
    if let Some(s) = &common.seeds {
        t.seeds = Some(s.clone());
    }
    if let Some(r) = common.runs {
        t.runs = r;
        if common.seeds.is_none() {
            t.seeds = None;
        }
    }
    if let Some(b) = common.backbone {
        t.backbone = b;
    }
    if common.with_sensitive {
        t.with_sensitive = true;
    }
    if let Some(s) = common.soft_loss {
        t.soft_loss = s;
    }
    if let Some(e) = common.epochs {
        t.epochs = e;
    }
    t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    // pin the seed list so snapshots replay exactly
    t.seeds = Some(t.seed_list());
    config.out = None;
    Ok(Resolved { config, out })
}

/// Writes the resolved configuration, with absolute dataset paths.
fn write_snapshot(r: &Resolved) -> Result<(), CliError> {
    let mut snap = r.config.clone();
    if let Some(d) = snap.data.dataset.as_mut() {
        *d = fs::canonicalize(&*d).map_err(|source| PipelineError::Io {
            path: d.clone(),
            source,
        })?;
    }
    write_atomic(&r.out.join(SNAPSHOT), snap.to_toml().as_bytes())?;
    Ok(())
}

/// Output of a command: what to print on stdout.
pub type Outcome = Result<String, CliError>;

pub fn cmd_prepare(r: &Resolved) -> Outcome {
    let g = r.config.load_graph()?;
    let mut s = String::new();
    let labelled: Vec<u8> = g.labels().iter().flatten().copied().collect();
    let positive = labelled.iter().filter(|&&y| y == 1).count();
    let _ = writeln!(s, "nodes = {}", g.num_nodes());
    let _ = writeln!(s, "edges = {}", g.num_edges());
    let _ = writeln!(s, "attributes = {}", g.num_attributes());
    let _ = writeln!(s, "labelled = {}", labelled.len());
    let _ = writeln!(s, "positive = {positive}");
    let _ = writeln!(s, "negative = {}", labelled.len() - positive);
    for a in g.sensitive_attributes() {
        let ones = a.values.iter().filter(|&&v| v == 1).count();
        let _ = writeln!(s, "group.{}.0 = {}", a.name, a.values.len() - ones);
        let _ = writeln!(s, "group.{}.1 = {ones}", a.name);
    }
    let sp = g.splits();
    let _ = writeln!(s, "split = {}/{}/{}", sp.train.len(), sp.val.len(), sp.test.len());
    let _ = writeln!(s, "digest = {}", fairgkd_core::pipeline::graph_digest(&g));
    Ok(s)
}

pub fn cmd_synth(r: &Resolved) -> Outcome {
    if r.config.data.dataset.is_some() {
        return Err(CliError::Usage("synth generates a graph; drop data.dataset / --dataset".into()));
    }
    let g = r.config.load_graph()?;
    let splits = r.config.data.splits.unwrap_or(r.config.data.synthetic.clone().unwrap_or_default().splits);
    write_dataset(&g, &r.out, "synthetic", splits)?;
    Ok(format!(
        "wrote {} ({} nodes, {} edges)\n",
        r.out.join("meta.toml").display(),
        g.num_nodes(),
        g.num_edges()
    ))
}

fn write_reports_summary(s: &mut String, reports: &[&MetricsReport]) -> Result<(), CliError> {
    for (i, rep) in reports.iter().enumerate() {
        let csv = rep.summary_csv().map_err(PipelineError::from)?;
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            let _ = writeln!(s, "{header}");
        }
        for l in lines {
            let _ = writeln!(s, "{l}");
        }
    }
    Ok(())
}

pub fn cmd_baseline(r: &Resolved, strategy: Option<&str>) -> Outcome {
    let kinds = parse_strategy(strategy.unwrap_or("all"))?;
    let g = r.config.load_graph()?;
    write_snapshot(r)?;
    let mut reports = Vec::new();
    for k in kinds {
        reports.push(run_baseline(&g, k, &r.config.train, Some(&r.out))?.report);
    }
    let mut s = String::new();
    write_reports_summary(&mut s, &reports.iter().collect::<Vec<_>>())?;
    Ok(s)
}

pub fn cmd_train(r: &Resolved) -> Outcome {
    let g = r.config.load_graph()?;
    write_snapshot(r)?;
    let outcome = run_experiment(&g, &r.config.train, Some(&r.out))?;
    let mut s = String::new();
    write_reports_summary(&mut s, &[&outcome.student, &outcome.vanilla])?;
    Ok(s)
}

/// Recomputes the student's test metrics from every seed's checkpoint and
/// checks them against the stored ones.
pub fn cmd_evaluate(r: &Resolved) -> Outcome {
    let g = r.config.load_graph()?;
    let cfg = &r.config.train;
    let hash = run_hash(cfg, &g);
    let mut runs = Vec::new();
    let mut mismatched = Vec::new();
    for seed in cfg.seed_list() {
        let dir = seed_dir(&r.out, seed);
        let stored = read_seed_metrics(&dir)?;
        if stored.config_hash != hash {
            return Err(CliError::Usage(format!(
                "{}: trained with config {} but the current config hashes to {hash}",
                dir.display(),
                stored.config_hash
            )));
        }
        let m = evaluate_checkpoint(&g, cfg, &dir, seed)?;
        if m != stored.student {
            mismatched.push(seed);
        }
        runs.push(m);
    }
    let report = MetricsReport::new("evaluation", &hash, runs).map_err(PipelineError::from)?;
    let json = report.to_json().map_err(PipelineError::from)?;
    write_atomic(&r.out.join("evaluation.json"), json.as_bytes())?;
    if !mismatched.is_empty() {
        return Err(PipelineError::Invariant(format!("recomputed metrics differ from the stored ones for seeds {mismatched:?}")).into());
    }
    let mut s = String::new();
    write_reports_summary(&mut s, &[&report])?;
    Ok(s)
}

/// Loads `<out>/config.toml` when `evaluate` is called without `--config`.
fn evaluate_defaults(common: &CommonArgs, env_out: Option<OsString>) -> CommonArgs {
    let out = common
        .out
        .clone()
        .or_else(|| env_out.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let snapshot = out.join(SNAPSHOT);
    CommonArgs {
        config: common.config.clone().or_else(|| snapshot.exists().then_some(snapshot)),
        out: Some(out),
        ..common.clone()
    }
}

pub fn execute(cli: &Cli, env_out: Option<OsString>) -> Outcome {
    let common = match cli.command {
        Command::Evaluate => evaluate_defaults(&cli.common, env_out.clone()),
        _ => cli.common.clone(),
    };
    if common.strategy.is_some() && !matches!(cli.command, Command::Baseline) {
        return Err(CliError::Usage("--strategy only applies to the baseline command".into()));
    }
    let r = resolve(&common, &cli.command, env_out)?;
    match cli.command {
        Command::Prepare => cmd_prepare(&r),
        Command::Synth => cmd_synth(&r),
        Command::Baseline => cmd_baseline(&r, common.strategy.as_deref()),
        Command::Train => cmd_train(&r),
        Command::Evaluate => cmd_evaluate(&r),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => exit_code(ErrorCategory::Usage),
            };
        }
    };
    match execute(&cli, std::env::var_os(OUT_ENV)) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category().as_str());
            e.exit_code()
        }
    }
}
