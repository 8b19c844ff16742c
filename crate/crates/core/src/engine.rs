//! The pool-based active-learning loop.
//!
//! A run draws `n_initial` seed points, then asks its proposer for exactly
//! one unlabeled candidate per iteration, looks up the stored target and
//! appends a [`StepRecord`]. It stops as soon as the pool optimum has been
//! observed or the iteration cap is hit.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DatasetRef, Goal};
use crate::error::{Error, Result};
use crate::llm::LlmSettings;
use crate::rng::{self, Purpose};
use crate::surrogate::ModelOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerKind {
    Gpr,
    Rfr,
    Gbt,
    Bnn,
    #[serde(alias = "random")]
    RandomWalk,
    Llm,
}

impl ProposerKind {
    pub fn uses_alpha(self) -> bool {
        !matches!(self, ProposerKind::RandomWalk | ProposerKind::Llm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProposerKind::Gpr => "gpr",
            ProposerKind::Rfr => "rfr",
            ProposerKind::Gbt => "gbt",
            ProposerKind::Bnn => "bnn",
            ProposerKind::RandomWalk => "random_walk",
            ProposerKind::Llm => "llm",
        }
    }
}

impl fmt::Display for ProposerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProposerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gpr" => Ok(ProposerKind::Gpr),
            "rfr" | "rf" => Ok(ProposerKind::Rfr),
            "gbt" | "xgb" | "xgboost" => Ok(ProposerKind::Gbt),
            "bnn" => Ok(ProposerKind::Bnn),
            "random_walk" | "random" | "randomwalk" => Ok(ProposerKind::RandomWalk),
            "llm" => Ok(ProposerKind::Llm),
            other => Err(Error::Config(format!("unknown proposer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFormat {
    #[default]
    Parameter,
    Report,
}

impl FromStr for PromptFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parameter" | "parameters" => Ok(PromptFormat::Parameter),
            "report" => Ok(PromptFormat::Report),
            other => Err(Error::Config(format!("unknown prompt format '{other}'"))),
        }
    }
}

impl fmt::Display for PromptFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptFormat::Parameter => "parameter",
            PromptFormat::Report => "report",
        })
    }
}

fn one() -> usize {
    1
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub proposer: ProposerKind,
    /// UCB trade-off; ignored by the random-walk and LLM proposers.
    #[serde(default)]
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub repeat_index: u32,
    #[serde(default = "one")]
    pub n_initial: usize,
    /// Cap on recorded steps, initial observations included. Defaults to the pool size.
    #[serde(default)]
    pub max_iterations: Option<usize>,
    #[serde(default)]
    pub prompt_format: PromptFormat,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub llm: LlmSettings,
}

impl RunConfig {
    pub fn new(proposer: ProposerKind, alpha: f64, seed: u64) -> Self {
        RunConfig {
            proposer,
            alpha,
            seed,
            repeat_index: 0,
            n_initial: 1,
            max_iterations: None,
            prompt_format: PromptFormat::Parameter,
            model: ModelOptions::default(),
            llm: LlmSettings::default(),
        }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha: must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.n_initial < 1 || self.n_initial >= pool_size {
            return Err(Error::Config(format!(
                "n_initial: must satisfy 1 <= n_initial < pool size ({pool_size}), got {}",
                self.n_initial
            )));
        }
        if let Some(m) = self.max_iterations {
            if m < self.n_initial {
                return Err(Error::Config(format!(
                    "max_iterations: must be >= n_initial ({}), got {m}",
                    self.n_initial
                )));
            }
        }
        self.model.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub candidate_id: usize,
    pub observed_value: f64,
    pub running_best: f64,
    pub proposal_text: Option<String>,
    pub match_score: Option<f64>,
    pub surrogate_diag: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub run_config_digest: String,
    pub steps: Vec<StepRecord>,
    pub reached_optimum_at: Option<usize>,
    pub data_fraction_used: f64,
}

impl Trajectory {
    pub fn candidate_ids(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.candidate_id).collect()
    }

    pub fn observed_values(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.observed_value).collect()
    }
}

/// What a proposer sees when asked for the next candidate.
pub struct ProposalContext<'a> {
    pub dataset: &'a Dataset,
    /// Observed ids in observation order.
    pub observed: &'a [usize],
    /// Unobserved ids in ascending order.
    pub unlabeled: &'a [usize],
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalOutcome {
    pub candidate_id: usize,
    pub proposal_text: Option<String>,
    pub match_score: Option<f64>,
    pub diag: BTreeMap<String, f64>,
}

impl ProposalOutcome {
    pub fn id(candidate_id: usize) -> Self {
        ProposalOutcome {
            candidate_id,
            ..Default::default()
        }
    }
}

/// Picks one unlabeled candidate per call.
pub trait Proposer {
    fn propose(&mut self, ctx: &ProposalContext<'_>) -> Result<ProposalOutcome>;
}

impl<P: Proposer + ?Sized> Proposer for Box<P> {
    fn propose(&mut self, ctx: &ProposalContext<'_>) -> Result<ProposalOutcome> {
        (**self).propose(ctx)
    }
}

/// `n_initial` distinct ids drawn by partial Fisher-Yates on the
/// initialization stream of `seed`. Depends only on the pool size, so every
/// proposer and every alpha sharing a seed starts from the same points.
pub fn select_initial(dataset: &Dataset, seed: u64, n_initial: usize) -> Result<Vec<usize>> {
    let n = dataset.len();
    if n_initial < 1 || n_initial >= n {
        return Err(Error::Config(format!(
            "n_initial must satisfy 1 <= n_initial < {n}, got {n_initial}"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Initialization, 0);
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..n_initial {
        let j = rng.random_range(i..n);
        ids.swap(i, j);
    }
    ids.truncate(n_initial);
    Ok(ids)
}

/// Per-dimension z-scores of `query` using the mean and population standard
/// deviation of `reference`. Zero-variance dimensions use divisor 1, so they
/// map to 0 for queries equal to the reference value.
pub fn standardize_features(reference: &[Vec<f64>], query: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let scaler = Scaler::fit(reference)?;
    scaler.transform(query)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(reference: &[Vec<f64>]) -> Result<Self> {
        let first = reference
            .first()
            .ok_or_else(|| Error::Input("standardization reference is empty".into()))?;
        let d = first.len();
        let n = reference.len() as f64;
        let mut mean = vec![0.0; d];
        for row in reference {
            if row.len() != d {
                return Err(Error::Shape {
                    expected: d,
                    got: row.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in reference {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Scaler { mean, scale })
    }

    pub fn transform_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Shape {
                expected: self.mean.len(),
                got: x.len(),
            });
        }
        Ok(x
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    pub fn transform(&self, query: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        query.iter().map(|x| self.transform_one(x)).collect()
    }
}

/// True iff some observed value equals the pool optimum exactly.
pub fn check_stopping(trajectory: &Trajectory, dataset: &Dataset) -> bool {
    let optimum = dataset.optimum();
    trajectory.steps.iter().any(|s| s.observed_value == optimum)
}

/// Runs the loop to completion.
///
/// A proposer error or protocol violation aborts the run with
/// [`Error::Aborted`], which carries the steps recorded so far.
pub fn run_active_learning<P: Proposer + ?Sized>(
    dataset: &Dataset,
    config: &RunConfig,
    proposer: &mut P,
) -> Result<Trajectory> {
    dataset.validate()?;
    config.validate(dataset.len())?;
    let n = dataset.len();
    let max_steps = config.max_iterations.unwrap_or(n).min(n);
    let optimum = dataset.optimum();
    let goal = dataset.goal;

    let mut traj = Trajectory {
        run_config_digest: config.digest(),
        steps: Vec::new(),
        reached_optimum_at: None,
        data_fraction_used: 0.0,
    };
    let mut observed: Vec<usize> = Vec::with_capacity(n);
    let mut seen: HashSet<usize> = HashSet::with_capacity(n);

    let record = |traj: &mut Trajectory,
                      observed: &mut Vec<usize>,
                      seen: &mut HashSet<usize>,
                      outcome: ProposalOutcome| {
        let id = outcome.candidate_id;
        let value = dataset.candidates[id].target;
        let iteration = traj.steps.len();
        let running_best = match traj.steps.last() {
            Some(prev) if !goal.better(value, prev.running_best) => prev.running_best,
            _ => value,
        };
        traj.steps.push(StepRecord {
            iteration,
            candidate_id: id,
            observed_value: value,
            running_best,
            proposal_text: outcome.proposal_text,
            match_score: outcome.match_score,
            surrogate_diag: (!outcome.diag.is_empty()).then_some(outcome.diag),
        });
        if value == optimum && traj.reached_optimum_at.is_none() {
            traj.reached_optimum_at = Some(iteration);
        }
        observed.push(id);
        seen.insert(id);
        traj.data_fraction_used = observed.len() as f64 / n as f64;
    };

    for id in select_initial(dataset, config.seed, config.n_initial)? {
        record(&mut traj, &mut observed, &mut seen, ProposalOutcome::id(id));
    }

    while traj.reached_optimum_at.is_none() && traj.steps.len() < max_steps {
        let unlabeled: Vec<usize> = (0..n).filter(|i| !seen.contains(i)).collect();
        let ctx = ProposalContext {
            dataset,
            observed: &observed,
            unlabeled: &unlabeled,
            iteration: traj.steps.len(),
        };
        let outcome = match proposer.propose(&ctx) {
            Ok(o) => o,
            Err(e) => {
                return Err(Error::Aborted {
                    reason: e.to_string(),
                    partial: Box::new(traj),
                })
            }
        };
        let id = outcome.candidate_id;
        if id >= n || seen.contains(&id) {
            let reason = if id >= n {
                format!("proposer returned id {id} outside the pool of {n}")
            } else {
                format!("proposer returned already-observed id {id}")
            };
            return Err(Error::Aborted {
                reason: Error::Protocol(reason).to_string(),
                partial: Box::new(traj),
            });
        }
        record(&mut traj, &mut observed, &mut seen, outcome);
    }
    Ok(traj)
}

/// First line of a persisted trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub run_config_digest: String,
    pub config: RunConfig,
    #[serde(default)]
    pub dataset: Option<DatasetRef>,
    pub dataset_name: String,
    pub dataset_digest: String,
    pub pool_size: usize,
    pub goal: Goal,
    pub pool_optimum: f64,
}

impl TrajectoryHeader {
    pub fn new(config: &RunConfig, dataset: &Dataset, source: Option<DatasetRef>) -> Self {
        TrajectoryHeader {
            run_config_digest: config.digest(),
            config: config.clone(),
            dataset: source,
            dataset_name: dataset.name.clone(),
            dataset_digest: dataset.digest(),
            pool_size: dataset.len(),
            goal: dataset.goal,
            pool_optimum: dataset.optimum(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: TrajectoryHeader,
}

/// Writes the header object followed by one object per step.
pub fn write_trajectory<W: Write>(
    mut out: W,
    header: &TrajectoryHeader,
    trajectory: &Trajectory,
) -> Result<()> {
    serde_json::to_writer(
        &mut out,
        &HeaderLine {
            header: header.clone(),
        },
    )?;
    out.write_all(b"\n")?;
    for step in &trajectory.steps {
        serde_json::to_writer(&mut out, step)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_trajectory(path: &Path, header: &TrajectoryHeader, trajectory: &Trajectory) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trajectory(std::io::BufWriter::new(file), header, trajectory)
}

/// Reads a trajectory file back. Optimum bookkeeping is recomputed from the
/// header's pool metadata.
pub fn read_trajectory<R: BufRead>(input: R) -> Result<(TrajectoryHeader, Trajectory)> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Input("trajectory file is empty".into()))??;
    let header = serde_json::from_str::<HeaderLine>(&first)?.header;
    let mut steps = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let step: StepRecord = serde_json::from_str(&line)?;
        if step.iteration != steps.len() {
            return Err(Error::Input(format!(
                "step {} out of order (expected {})",
                step.iteration,
                steps.len()
            )));
        }
        steps.push(step);
    }
    let reached_optimum_at = steps
        .iter()
        .position(|s| s.observed_value == header.pool_optimum);
    let traj = Trajectory {
        run_config_digest: header.run_config_digest.clone(),
        data_fraction_used: steps.len() as f64 / header.pool_size as f64,
        steps,
        reached_optimum_at,
    };
    Ok((header, traj))
}

pub fn load_trajectory(path: &Path) -> Result<(TrajectoryHeader, Trajectory)> {
    let file = std::fs::File::open(path)?;
    read_trajectory(std::io::BufReader::new(file))
}
