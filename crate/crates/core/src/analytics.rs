//! Post-processing over finished trajectories: running best, distance
//! travelled, PCA coordinates, summaries and spread across runs, plus CSV
//! exports of each.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Goal};
use crate::engine::{PromptFormat, ProposerKind, Scaler, Trajectory, TrajectoryHeader};
use crate::error::{Error, Result};

/// Prefix max for `Maximize`, prefix min for `Minimize`.
pub fn running_best(values: &[f64], goal: Goal) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let next = match out.last() {
            Some(&b) if !goal.better(v, b) => b,
            _ => v,
        };
        out.push(next);
    }
    out
}

/// Cumulative L2 path length through `ids` in full-pool standardized space.
/// Entry 0 is 0.
pub fn cumulative_l2(ids: &[usize], dataset: &Dataset) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::Input("empty trajectory".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::Input(format!("candidate id {bad} outside pool of {}", dataset.len())));
    }
    let scaler = Scaler::fit(&dataset.features())?;
    let z: Vec<Vec<f64>> = ids
        .iter()
        .map(|&i| scaler.transform_one(&dataset.candidates[i].features))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0];
    for w in z.windows(2) {
        let step = w[0]
            .iter()
            .zip(&w[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        out.push(out.last().unwrap() + step);
    }
    Ok(out)
}

/// Distance curve up to (and including) the step where the optimum was found.
pub fn distance_to_optimum(trajectory: &Trajectory, dataset: &Dataset) -> Result<Vec<f64>> {
    let ids = trajectory.candidate_ids();
    let end = trajectory.reached_optimum_at.map_or(ids.len(), |k| k + 1);
    cumulative_l2(&ids[..end], dataset)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// Unit-length principal directions, one per row of length `d`.
    pub components: Vec<Vec<f64>>,
    /// Per-candidate coordinates in pool order.
    pub projected: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

/// Eigenvector sign convention: the largest-magnitude entry is positive.
/// Magnitudes equal up to rounding count as tied; the first of them decides.
fn canonical_sign(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let Some(k) = v.iter().position(|x| x.abs() >= max * (1.0 - 1e-9)) else {
        return;
    };
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects the pool onto its first `k` principal components, computed from
/// the population covariance of full-pool standardized features.
pub fn pca_project(dataset: &Dataset, k: usize) -> Result<Pca> {
    let n = dataset.len();
    let d = dataset.n_features();
    if n < 2 {
        return Err(Error::Input("PCA needs at least 2 candidates".into()));
    }
    if k == 0 || k > d {
        return Err(Error::Input(format!("PCA rank {k} not in 1..={d}")));
    }
    let z = Scaler::fit(&dataset.features())?.transform(&dataset.features())?;
    let zm = DMatrix::from_fn(n, d, |i, j| z[i][j]);
    let cov = (zm.transpose() * &zm) / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        canonical_sign(&mut v);
        components.push(v);
        explained_variance.push(eig.eigenvalues[c].max(0.0));
    }
    let projected = z
        .iter()
        .map(|row| {
            components
                .iter()
                .map(|c| c.iter().zip(row).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        components,
        projected,
        explained_variance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub dataset: String,
    pub proposer: ProposerKind,
    pub alpha: f64,
    pub seed: u64,
    pub repeat_index: u32,
    pub prompt_format: PromptFormat,
    pub n_initial: usize,
    pub pool_size: usize,
    pub reached_optimum: bool,
    /// Step index at which the optimum was observed, or the last step.
    pub iterations_to_optimum: usize,
    pub data_fraction: f64,
    pub final_best: f64,
    pub cumulative_distance: Vec<f64>,
    pub mean_match_score: Option<f64>,
}

pub fn summarize(
    run_id: &str,
    header: &TrajectoryHeader,
    trajectory: &Trajectory,
    dataset: &Dataset,
) -> Result<RunSummary> {
    if trajectory.steps.is_empty() {
        return Err(Error::Input(format!("run {run_id} has no steps")));
    }
    let iterations = trajectory
        .reached_optimum_at
        .unwrap_or(trajectory.steps.len() - 1);
    let scores: Vec<f64> = trajectory.steps.iter().filter_map(|s| s.match_score).collect();
    let mean_match_score = if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    };
    let best = running_best(&trajectory.observed_values(), header.goal);
    Ok(RunSummary {
        run_id: run_id.to_owned(),
        dataset: header.dataset_name.clone(),
        proposer: header.config.proposer,
        alpha: header.config.alpha,
        seed: header.config.seed,
        repeat_index: header.config.repeat_index,
        prompt_format: header.config.prompt_format,
        n_initial: header.config.n_initial,
        pool_size: header.pool_size,
        reached_optimum: trajectory.reached_optimum_at.is_some(),
        iterations_to_optimum: iterations,
        data_fraction: (iterations + 1) as f64 / header.pool_size as f64,
        final_best: *best.last().unwrap(),
        cumulative_distance: distance_to_optimum(trajectory, dataset)?,
        mean_match_score,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Dataset,
    Proposer,
    Alpha,
    Seed,
    RepeatIndex,
    PromptFormat,
}

impl GroupKey {
    pub fn name(self) -> &'static str {
        match self {
            GroupKey::Dataset => "dataset",
            GroupKey::Proposer => "proposer",
            GroupKey::Alpha => "alpha",
            GroupKey::Seed => "seed",
            GroupKey::RepeatIndex => "repeat_index",
            GroupKey::PromptFormat => "prompt_format",
        }
    }

    fn value(self, s: &RunSummary) -> String {
        match self {
            GroupKey::Dataset => s.dataset.clone(),
            GroupKey::Proposer => s.proposer.to_string(),
            GroupKey::Alpha => s.alpha.to_string(),
            GroupKey::Seed => s.seed.to_string(),
            GroupKey::RepeatIndex => s.repeat_index.to_string(),
            GroupKey::PromptFormat => match s.prompt_format {
                PromptFormat::Parameter => "parameter".into(),
                PromptFormat::Report => "report".into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variability {
    pub group: Vec<(String, String)>,
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single run.
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn describe(values: &[f64]) -> Option<(f64, f64, f64, f64, f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((
        mean,
        std,
        v[0],
        quantile(&v, 0.25),
        quantile(&v, 0.5),
        quantile(&v, 0.75),
        v[v.len() - 1],
    ))
}

/// Spread of iterations-to-optimum within each group, groups in key order.
pub fn variability_stats(summaries: &[RunSummary], group_by: &[GroupKey]) -> Vec<Variability> {
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for s in summaries {
        let key = group_by.iter().map(|g| g.value(s)).collect();
        groups
            .entry(key)
            .or_default()
            .push(s.iterations_to_optimum as f64);
    }
    groups
        .into_iter()
        .map(|(key, values)| {
            let (mean, std, min, q1, median, q3, max) = describe(&values).expect("non-empty group");
            Variability {
                group: group_by
                    .iter()
                    .map(|g| g.name().to_owned())
                    .zip(key)
                    .collect(),
                count: values.len(),
                mean,
                std,
                min,
                q1,
                median,
                q3,
                max,
            }
        })
        .collect()
}

/// A trajectory loaded for reporting, tagged with its file stem.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub run_id: String,
    pub header: TrajectoryHeader,
    pub trajectory: Trajectory,
}

/// Runs sharing one pool.
#[derive(Debug, Clone)]
pub struct PoolRuns {
    pub dataset: Dataset,
    pub runs: Vec<LoadedRun>,
}

pub const RUNNING_BEST_CSV: &str = "running_best.csv";
pub const DISTANCE_CSV: &str = "distance.csv";
pub const PCA_COORDINATES_CSV: &str = "pca_coordinates.csv";
pub const PCA_EDGES_CSV: &str = "pca_edges.csv";
pub const VARIABILITY_CSV: &str = "variability.csv";
pub const SIMILARITY_CSV: &str = "similarity.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(dir.join(name))?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the summary table, one row per run.
pub fn write_summary_csv(path: &Path, summaries: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "run_id",
        "dataset",
        "proposer",
        "alpha",
        "seed",
        "repeat_index",
        "prompt_format",
        "n_initial",
        "pool_size",
        "reached_optimum",
        "iterations_to_optimum",
        "data_fraction",
        "final_best",
        "cumulative_distance",
        "mean_match_score",
    ])?;
    for s in summaries {
        let fmt = match s.prompt_format {
            PromptFormat::Parameter => "parameter",
            PromptFormat::Report => "report",
        };
        w.write_record([
            s.run_id.clone(),
            s.dataset.clone(),
            s.proposer.to_string(),
            s.alpha.to_string(),
            s.seed.to_string(),
            s.repeat_index.to_string(),
            fmt.to_owned(),
            s.n_initial.to_string(),
            s.pool_size.to_string(),
            s.reached_optimum.to_string(),
            s.iterations_to_optimum.to_string(),
            s.data_fraction.to_string(),
            s.final_best.to_string(),
            s.cumulative_distance.last().copied().unwrap_or(0.0).to_string(),
            opt(s.mean_match_score),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_variability_csv(path: &Path, rows: &[Variability]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "count", "mean", "std", "min", "q1", "median", "q3", "max"])?;
    for r in rows {
        let group = r
            .group
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            group,
            r.count.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.min.to_string(),
            r.q1.to_string(),
            r.median.to_string(),
            r.q3.to_string(),
            r.max.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every export family into `dir` and returns the summaries.
pub fn export_bundle(dir: &Path, pools: &[PoolRuns]) -> Result<(Vec<RunSummary>, Vec<PathBuf>)> {
    fs::create_dir_all(dir)?;
    let mut best = writer(dir, RUNNING_BEST_CSV)?;
    best.write_record(["run_id", "dataset", "proposer", "alpha", "seed", "repeat_index", "iteration", "candidate_id", "observed_value", "running_best"])?;
    let mut dist = writer(dir, DISTANCE_CSV)?;
    dist.write_record(["run_id", "dataset", "proposer", "alpha", "seed", "repeat_index", "iteration", "cumulative_distance"])?;
    let mut coords = writer(dir, PCA_COORDINATES_CSV)?;
    coords.write_record(["dataset", "candidate_id", "pc1", "pc2", "target", "explained_variance_1", "explained_variance_2"])?;
    let mut edges = writer(dir, PCA_EDGES_CSV)?;
    edges.write_record(["run_id", "dataset", "proposer", "step", "from_id", "to_id", "from_pc1", "from_pc2", "to_pc1", "to_pc2"])?;
    let mut sim = writer(dir, SIMILARITY_CSV)?;
    sim.write_record(["run_id", "dataset", "proposer", "prompt_format", "seed", "repeat_index", "iteration", "match_score"])?;

    let mut summaries = Vec::new();
    for pool in pools {
        let ds = &pool.dataset;
        let k = ds.n_features().min(2);
        let pca = if ds.len() >= 2 { Some(pca_project(ds, k)?) } else { None };
        if let Some(p) = &pca {
            let ev = |i: usize| opt(p.explained_variance.get(i).copied());
            for (id, xy) in p.projected.iter().enumerate() {
                coords.write_record([
                    ds.name.clone(),
                    id.to_string(),
                    xy[0].to_string(),
                    opt(xy.get(1).copied()),
                    ds.candidates[id].target.to_string(),
                    ev(0),
                    ev(1),
                ])?;
            }
        }
        for run in &pool.runs {
            let s = summarize(&run.run_id, &run.header, &run.trajectory, ds)?;
            let cfg = &run.header.config;
            let tag = [
                run.run_id.clone(),
                ds.name.clone(),
                cfg.proposer.to_string(),
                cfg.alpha.to_string(),
                cfg.seed.to_string(),
                cfg.repeat_index.to_string(),
            ];
            let values = run.trajectory.observed_values();
            let rb = running_best(&values, run.header.goal);
            for (i, step) in run.trajectory.steps.iter().enumerate() {
                let mut rec = tag.to_vec();
                rec.extend([
                    i.to_string(),
                    step.candidate_id.to_string(),
                    step.observed_value.to_string(),
                    rb[i].to_string(),
                ]);
                best.write_record(&rec)?;
            }
            for (i, d) in s.cumulative_distance.iter().enumerate() {
                let mut rec = tag.to_vec();
                rec.extend([i.to_string(), d.to_string()]);
                dist.write_record(&rec)?;
            }
            if let Some(p) = &pca {
                let ids = run.trajectory.candidate_ids();
                for (step, w) in ids.windows(2).enumerate() {
                    let (a, b) = (&p.projected[w[0]], &p.projected[w[1]]);
                    edges.write_record([
                        run.run_id.clone(),
                        ds.name.clone(),
                        cfg.proposer.to_string(),
                        (step + 1).to_string(),
                        w[0].to_string(),
                        w[1].to_string(),
                        a[0].to_string(),
                        opt(a.get(1).copied()),
                        b[0].to_string(),
                        opt(b.get(1).copied()),
                    ])?;
                }
            }
            let fmt = match cfg.prompt_format {
                PromptFormat::Parameter => "parameter",
                PromptFormat::Report => "report",
            };
            for (i, step) in run.trajectory.steps.iter().enumerate() {
                if let Some(score) = step.match_score {
                    sim.write_record([
                        run.run_id.clone(),
                        ds.name.clone(),
                        cfg.proposer.to_string(),
                        fmt.to_owned(),
                        cfg.seed.to_string(),
                        cfg.repeat_index.to_string(),
                        i.to_string(),
                        score.to_string(),
                    ])?;
                }
            }
            summaries.push(s);
        }
    }
    for w in [&mut best, &mut dist, &mut coords, &mut edges, &mut sim] {
        w.flush()?;
    }
    write_summary_csv(&dir.join(SUMMARY_CSV), &summaries)?;
    let rows = variability_stats(
        &summaries,
        &[GroupKey::Dataset, GroupKey::Proposer, GroupKey::PromptFormat, GroupKey::Alpha, GroupKey::Seed],
    );
    write_variability_csv(&dir.join(VARIABILITY_CSV), &rows)?;
    let files = [
        RUNNING_BEST_CSV,
        DISTANCE_CSV,
        PCA_COORDINATES_CSV,
        PCA_EDGES_CSV,
        VARIABILITY_CSV,
        SIMILARITY_CSV,
        SUMMARY_CSV,
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect();
    Ok((summaries, files))
}
