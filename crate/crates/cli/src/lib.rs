//! Command implementations behind the `poolal` binary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use poolal::analytics::{export_bundle, LoadedRun, PoolRuns, RunSummary};
use poolal::dataset::registry;
use poolal::engine::{load_trajectory, save_trajectory};
use poolal::llm::{ClientSpec, LlmSettings, MatcherSpec, ReportSource};
use poolal::surrogate::ModelOptions;
use poolal::{
    make_proposer, run_active_learning, Dataset, DatasetRef, Error, PromptFormat, ProposerKind,
    RunConfig, Trajectory, TrajectoryHeader,
};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUN: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_CONFIG, error: error.into() }
    }

    pub fn run(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: EXIT_RUN, error: error.into() }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn classify(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Schema(_) | Error::CsvParse { .. } | Error::EmptyDataset => {
            Failure::config(e)
        }
        Error::Client(poolal::ClientError::MissingCredential(_)) => Failure::config(e),
        other => Failure::run(other),
    }
}

/// Parses `synthetic:<kind>:<n>[:<seed>]`, `registry:<name>:<csv path>`, or a
/// path to a JSON dataset description.
pub fn parse_dataset_arg(arg: &str) -> anyhow::Result<DatasetRef> {
    if arg.starts_with("synthetic:") {
        return Ok(arg.parse()?);
    }
    if let Some(rest) = arg.strip_prefix("registry:") {
        let (name, path) = rest
            .split_once(':')
            .ok_or_else(|| anyhow!("expected registry:<name>:<csv path>, got '{arg}'"))?;
        let mut spec = registry()
            .into_iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                let names: Vec<String> = registry().into_iter().map(|s| s.name).collect();
                anyhow!("unknown registry dataset '{name}'; known: {}", names.join(", "))
            })?;
        spec.csv_path = PathBuf::from(path);
        return Ok(DatasetRef::Csv(spec));
    }
    let text = fs::read_to_string(arg).with_context(|| format!("reading dataset description {arg}"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing dataset description {arg}"))
}

/// Parses `replay:<path>`, `constant:<text>` or `http`.
pub fn parse_client_arg(arg: &str, endpoint: Option<&str>, model: Option<&str>) -> anyhow::Result<ClientSpec> {
    if let Some(path) = arg.strip_prefix("replay:") {
        return Ok(ClientSpec::Replay { path: path.into() });
    }
    if let Some(text) = arg.strip_prefix("constant:") {
        return Ok(ClientSpec::Constant { text: text.into() });
    }
    if arg == "http" {
        return Ok(ClientSpec::Http {
            endpoint: endpoint.ok_or_else(|| anyhow!("--client http needs --llm-endpoint"))?.into(),
            model: model.ok_or_else(|| anyhow!("--client http needs --llm-model"))?.into(),
            api_key_env: poolal::llm::LLM_API_KEY_ENV.into(),
        });
    }
    Err(anyhow!("unknown client '{arg}'; expected replay:<path>, constant:<text> or http"))
}

/// Run file: a dataset plus the run configuration fields at top level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFile {
    #[serde(default)]
    pub dataset: Option<DatasetRef>,
    #[serde(flatten)]
    pub config: RunConfig,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run file; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// synthetic:<kind>:<n>[:<seed>], registry:<name>:<csv> or a JSON file.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub proposer: Option<ProposerKind>,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_initial: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub repeat: Option<u32>,
    #[arg(long)]
    pub prompt_format: Option<PromptFormat>,
    /// replay:<fixtures.jsonl>, constant:<text> or http.
    #[arg(long)]
    pub client: Option<String>,
    #[arg(long)]
    pub llm_endpoint: Option<String>,
    #[arg(long)]
    pub llm_model: Option<String>,
    /// offline or rerank.
    #[arg(long)]
    pub matcher: Option<String>,
    #[arg(long)]
    pub rerank_endpoint: Option<String>,
    #[arg(long)]
    pub rerank_model: Option<String>,
    /// Build observation reports from a fixed template instead of the model.
    #[arg(long)]
    pub offline_reports: bool,
    #[arg(long)]
    pub requests_per_minute: Option<u32>,
    /// Trajectory file to write.
    #[arg(long, default_value = "trajectory.jsonl")]
    pub out: PathBuf,
}

fn apply_llm_flags(llm: &mut LlmSettings, args: &RunArgs) -> anyhow::Result<()> {
    if let Some(c) = &args.client {
        llm.client = Some(parse_client_arg(c, args.llm_endpoint.as_deref(), args.llm_model.as_deref())?);
    }
    match args.matcher.as_deref() {
        None => {}
        Some("offline") | Some("offline_nearest") => llm.matcher = MatcherSpec::OfflineNearest,
        Some("rerank") => {
            llm.matcher = MatcherSpec::Rerank {
                endpoint: args
                    .rerank_endpoint
                    .clone()
                    .ok_or_else(|| anyhow!("--matcher rerank needs --rerank-endpoint"))?,
                model: args
                    .rerank_model
                    .clone()
                    .ok_or_else(|| anyhow!("--matcher rerank needs --rerank-model"))?,
                api_key_env: poolal::llm::RERANK_API_KEY_ENV.into(),
            }
        }
        Some(other) => return Err(anyhow!("unknown matcher '{other}'; expected offline or rerank")),
    }
    if args.offline_reports {
        llm.report_source = ReportSource::OfflineTemplate;
    }
    if args.requests_per_minute.is_some() {
        llm.requests_per_minute = args.requests_per_minute;
    }
    Ok(())
}

/// Merges the run file (if any) with command-line overrides.
pub fn resolve_run(args: &RunArgs) -> anyhow::Result<(DatasetRef, RunConfig)> {
    let (mut source, mut config) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: RunFile =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            (file.dataset, file.config)
        }
        None => {
            let proposer = args
                .proposer
                .ok_or_else(|| anyhow!("proposer: required (--proposer or a run file)"))?;
            (None, RunConfig::new(proposer, 0.0, 42))
        }
    };
    if let Some(d) = &args.dataset {
        source = Some(parse_dataset_arg(d)?);
    }
    let source = source.ok_or_else(|| anyhow!("dataset: required (--dataset or a run file)"))?;
    if let Some(p) = args.proposer {
        config.proposer = p;
    }
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.n_initial {
        config.n_initial = n;
    }
    if args.max_iterations.is_some() {
        config.max_iterations = args.max_iterations;
    }
    if let Some(r) = args.repeat {
        config.repeat_index = r;
    }
    if let Some(f) = args.prompt_format {
        config.prompt_format = f;
    }
    apply_llm_flags(&mut config.llm, args)?;
    Ok((source, config))
}

fn partial_path(out: &Path) -> PathBuf {
    let stem = out
        .file_name()
        .and_then(|s| s.to_str())
        .map(|s| s.trim_end_matches(".jsonl"))
        .unwrap_or("trajectory");
    out.with_file_name(format!("{stem}.partial.jsonl"))
}

/// Writes to a sibling temp file and renames, so readers never see half a file.
fn save_atomic(path: &Path, header: &TrajectoryHeader, trajectory: &Trajectory) -> poolal::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    save_trajectory(&tmp, header, trajectory)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Validates, runs and persists one configuration.
pub fn execute_run(
    config: &RunConfig,
    source: &DatasetRef,
    dataset: &Dataset,
    out: &Path,
) -> CliResult<Trajectory> {
    config.validate(dataset.len()).map_err(classify)?;
    let mut proposer = make_proposer(config).map_err(classify)?;
    let header = TrajectoryHeader::new(config, dataset, Some(source.clone()));
    match run_active_learning(dataset, config, &mut proposer) {
        Ok(t) => {
            save_atomic(out, &header, &t).map_err(Failure::run)?;
            Ok(t)
        }
        Err(Error::Aborted { partial, reason }) => {
            let path = partial_path(out);
            save_atomic(&path, &header, &partial).map_err(Failure::run)?;
            Err(Failure::run(anyhow!(
                "run aborted after {} steps: {reason} (partial trajectory in {})",
                partial.steps.len(),
                path.display()
            )))
        }
        Err(e) => Err(classify(e)),
    }
}

pub fn summary_line(config: &RunConfig, t: &Trajectory, dataset: &Dataset) -> String {
    let best = poolal::analytics::running_best(&t.observed_values(), dataset.goal);
    let status = match t.reached_optimum_at {
        Some(k) => format!("optimum found at step {k}"),
        None => "optimum not found".to_owned(),
    };
    format!(
        "{} alpha={} seed={} repeat={}: {status}, {} steps, data fraction {:.3}, best {}",
        config.proposer,
        config.alpha,
        config.seed,
        config.repeat_index,
        t.steps.len(),
        t.data_fraction_used,
        best.last().copied().unwrap_or(f64::NAN)
    )
}

pub fn cmd_run(args: &RunArgs) -> CliResult<Trajectory> {
    let (source, config) = resolve_run(args).map_err(Failure::config)?;
    let dataset = source.load().map_err(classify)?;
    let t = execute_run(&config, &source, &dataset, &args.out)?;
    println!("{}", summary_line(&config, &t, &dataset));
    Ok(t)
}

fn default_alphas() -> Vec<f64> {
    vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
}

fn default_seeds() -> Vec<u64> {
    vec![38, 39, 40, 41, 42]
}

fn default_repeats() -> BTreeMap<u64, u32> {
    BTreeMap::from([(42, 5)])
}

fn default_formats() -> Vec<PromptFormat> {
    vec![PromptFormat::Parameter]
}

fn one() -> usize {
    1
}

/// Factorial grid over proposers, alphas, seeds, repeats and prompt formats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dataset: DatasetRef,
    pub proposers: Vec<ProposerKind>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Repeats per seed for LLM runs; other seeds run once.
    #[serde(default = "default_repeats")]
    pub repeats_at_seed: BTreeMap<u64, u32>,
    #[serde(default = "default_formats")]
    pub prompt_formats: Vec<PromptFormat>,
    /// Worker threads; defaults to the number of cores.
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default = "one")]
    pub n_initial: usize,
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub llm: LlmSettings,
}

impl SweepConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.proposers.is_empty() {
            return Err(anyhow!("proposers: must not be empty"));
        }
        if self.alphas.is_empty() {
            return Err(anyhow!("alphas: must not be empty"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a >= 0.0) || !a.is_finite()) {
            return Err(anyhow!("alphas: entries must be finite and >= 0, got {a}"));
        }
        if self.seeds.is_empty() {
            return Err(anyhow!("seeds: must not be empty"));
        }
        if self.prompt_formats.is_empty() {
            return Err(anyhow!("prompt_formats: must not be empty"));
        }
        if let Some((s, _)) = self.repeats_at_seed.iter().find(|(_, &c)| c == 0) {
            return Err(anyhow!("repeats_at_seed: count for seed {s} must be >= 1"));
        }
        if self.parallelism == Some(0) {
            return Err(anyhow!("parallelism: must be >= 1"));
        }
        Ok(())
    }

    /// Every run of the grid. Alpha is dropped for proposers that ignore it,
    /// and prompt formats and repeats only multiply LLM runs.
    pub fn expand(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &proposer in &self.proposers {
            let alphas = if proposer.uses_alpha() { self.alphas.clone() } else { vec![0.0] };
            let formats = if proposer == ProposerKind::Llm {
                self.prompt_formats.clone()
            } else {
                vec![PromptFormat::Parameter]
            };
            for &format in &formats {
                for &alpha in &alphas {
                    for &seed in &self.seeds {
                        let repeats = if proposer == ProposerKind::Llm {
                            self.repeats_at_seed.get(&seed).copied().unwrap_or(1)
                        } else {
                            1
                        };
                        for repeat in 0..repeats {
                            let mut c = RunConfig::new(proposer, alpha, seed);
                            c.repeat_index = repeat;
                            c.prompt_format = format;
                            c.n_initial = self.n_initial;
                            c.max_iterations = self.max_iterations;
                            c.model = self.model;
                            c.llm = self.llm.clone();
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

/// File stem for a run: readable prefix plus a digest prefix.
pub fn run_id(config: &RunConfig) -> String {
    let mut id = format!("{}-a{}-s{}-r{}", config.proposer, config.alpha, config.seed, config.repeat_index);
    if config.proposer == ProposerKind::Llm {
        id.push('-');
        id.push_str(&config.prompt_format.to_string());
    }
    id.push('-');
    id.push_str(&config.digest()[..12]);
    id
}

pub const RUNS_DIR: &str = "runs";
pub const FAILURES_CSV: &str = "failures.csv";

#[derive(Debug, Default)]
pub struct SweepReport {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub summaries: Vec<RunSummary>,
}

fn already_done(path: &Path, config: &RunConfig) -> bool {
    match load_trajectory(path) {
        Ok((header, _)) => header.run_config_digest == config.digest(),
        Err(_) => false,
    }
}

fn thread_pool(threads: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(Failure::run)
}

pub fn cmd_sweep(config_path: &Path, out_dir: &Path) -> CliResult<SweepReport> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))
        .map_err(Failure::config)?;
    let sweep: SweepConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", config_path.display()))
        .map_err(Failure::config)?;
    run_sweep(&sweep, out_dir)
}

pub fn run_sweep(sweep: &SweepConfig, out_dir: &Path) -> CliResult<SweepReport> {
    sweep.validate().map_err(Failure::config)?;
    let dataset = sweep.dataset.load().map_err(classify)?;
    let runs = sweep.expand();
    for c in &runs {
        c.validate(dataset.len()).map_err(classify)?;
    }
    let runs_dir = out_dir.join(RUNS_DIR);
    fs::create_dir_all(&runs_dir).map_err(Failure::run)?;

    let mut report = SweepReport::default();
    let mut pending = Vec::new();
    for c in runs {
        let id = run_id(&c);
        let path = runs_dir.join(format!("{id}.jsonl"));
        if already_done(&path, &c) {
            report.skipped.push(id);
        } else {
            pending.push((id, path, c));
        }
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers = sweep.parallelism.unwrap_or(cores).max(1);
    let llm_workers = if sweep.llm.requests_per_minute.is_some() { workers } else { 1 };
    let (llm_runs, other_runs): (Vec<_>, Vec<_>) =
        pending.into_iter().partition(|(_, _, c)| c.proposer == ProposerKind::Llm);

    let execute = |(id, path, c): &(String, PathBuf, RunConfig)| {
        let r = execute_run(c, &sweep.dataset, &dataset, path);
        match &r {
            Ok(t) => log::info!("{id}: {}", summary_line(c, t, &dataset)),
            Err(f) => log::warn!("{id}: {f}"),
        }
        (id.clone(), r.map(|_| ()).map_err(|f| f.to_string()))
    };
    let mut results = Vec::new();
    results.extend(thread_pool(workers)?.install(|| other_runs.par_iter().map(execute).collect::<Vec<_>>()));
    results.extend(thread_pool(llm_workers)?.install(|| llm_runs.par_iter().map(execute).collect::<Vec<_>>()));
    for (id, r) in results {
        match r {
            Ok(()) => report.executed.push(id),
            Err(msg) => report.failed.push((id, msg)),
        }
    }
    report.failed.sort();

    let mut w = csv::Writer::from_path(out_dir.join(FAILURES_CSV)).map_err(Failure::run)?;
    w.write_record(["run_id", "error"]).map_err(Failure::run)?;
    for (id, msg) in &report.failed {
        w.write_record([id, msg]).map_err(Failure::run)?;
    }
    w.flush().map_err(Failure::run)?;

    if report.executed.len() + report.skipped.len() > 0 {
        report.summaries = report_dir(&runs_dir, out_dir)?;
    }
    println!(
        "sweep: {} executed, {} skipped (already complete), {} failed",
        report.executed.len(),
        report.skipped.len(),
        report.failed.len()
    );
    if !report.failed.is_empty() {
        return Err(Failure {
            code: EXIT_PARTIAL,
            error: anyhow!(
                "{} of {} runs failed; see {}",
                report.failed.len(),
                report.executed.len() + report.skipped.len() + report.failed.len(),
                out_dir.join(FAILURES_CSV).display()
            ),
        });
    }
    Ok(report)
}

fn collect_trajectory_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_trajectory_files(&path, out)?;
        } else if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if name.ends_with(".jsonl") && !name.ends_with(".partial.jsonl") {
                out.push(path);
            }
        }
    }
    Ok(())
}

/// Loads every complete trajectory under `dir` and writes the analytics
/// bundle to `out`. Unreadable files are skipped with a warning.
pub fn report_dir(dir: &Path, out: &Path) -> CliResult<Vec<RunSummary>> {
    let mut files = Vec::new();
    collect_trajectory_files(dir, &mut files)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(Failure::config)?;
    files.sort();

    let mut datasets: HashMap<String, Option<Dataset>> = HashMap::new();
    let mut pools: BTreeMap<String, PoolRuns> = BTreeMap::new();
    for path in &files {
        let (header, trajectory) = match load_trajectory(path) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let digest = header.dataset_digest.clone();
        let ds = datasets.entry(digest.clone()).or_insert_with(|| {
            let source = header.dataset.as_ref()?;
            match source.load() {
                Ok(ds) if ds.digest() == digest => Some(ds),
                Ok(_) => {
                    log::warn!("dataset for {} changed since the run", header.dataset_name);
                    None
                }
                Err(e) => {
                    log::warn!("cannot load dataset {}: {e}", header.dataset_name);
                    None
                }
            }
        });
        let Some(ds) = ds.clone() else {
            log::warn!("skipping {}: pool unavailable", path.display());
            continue;
        };
        let run_id = path
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.trim_end_matches(".jsonl").to_owned())
            .unwrap_or_default();
        pools
            .entry(digest)
            .or_insert_with(|| PoolRuns { dataset: ds, runs: Vec::new() })
            .runs
            .push(LoadedRun { run_id, header, trajectory });
    }
    if pools.is_empty() {
        return Err(Failure::config(anyhow!("no readable trajectories under {}", dir.display())));
    }
    let pools: Vec<PoolRuns> = pools.into_values().collect();
    let (summaries, _) = export_bundle(out, &pools).map_err(Failure::run)?;
    Ok(summaries)
}

pub fn cmd_report(dir: &Path, out: &Path) -> CliResult<Vec<RunSummary>> {
    let summaries = report_dir(dir, out)?;
    println!("report: {} runs exported to {}", summaries.len(), out.display());
    Ok(summaries)
}
