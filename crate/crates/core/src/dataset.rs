//! Candidate pools: CSV loading, the benchmark registry and synthetic pools
//! with analytically known optima.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Goal {
    Maximize,
    Minimize,
}

impl Goal {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Goal::Maximize => a > b,
            Goal::Minimize => a < b,
        }
    }

    pub fn verb(self) -> &'static str {
        match self {
            Goal::Maximize => "maximize",
            Goal::Minimize => "minimize",
        }
    }
}

/// One row of the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub features: Vec<f64>,
    pub target: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub candidates: Vec<Candidate>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub goal: Goal,
    #[serde(default)]
    pub context: String,
}

impl Dataset {
    /// Builds a dataset from row-major features and targets, assigning ids in order.
    pub fn new(
        name: impl Into<String>,
        feature_names: Vec<String>,
        target_name: impl Into<String>,
        goal: Goal,
        rows: Vec<(Vec<f64>, f64)>,
    ) -> Result<Self> {
        let candidates = rows
            .into_iter()
            .enumerate()
            .map(|(id, (features, target))| Candidate {
                id,
                features,
                target,
                report_text: None,
            })
            .collect();
        let ds = Dataset {
            name: name.into(),
            candidates,
            feature_names,
            target_name: target_name.into(),
            goal,
            context: String::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = context.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.feature_names.len();
        for (i, c) in self.candidates.iter().enumerate() {
            if c.id != i {
                return Err(Error::Schema(format!(
                    "candidate at position {i} has id {}; ids must be 0..n in order",
                    c.id
                )));
            }
            if c.features.len() != d {
                return Err(Error::Shape {
                    expected: d,
                    got: c.features.len(),
                });
            }
            if !c.target.is_finite() || c.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("candidate {i} has a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.candidates.iter().map(|c| c.features.clone()).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.target).collect()
    }

    /// Best target value in the pool under the dataset goal.
    pub fn optimum(&self) -> f64 {
        let mut best = self.candidates[0].target;
        for c in &self.candidates[1..] {
            if self.goal.better(c.target, best) {
                best = c.target;
            }
        }
        best
    }

    /// Lowest id attaining the optimum.
    pub fn optimum_id(&self) -> usize {
        let opt = self.optimum();
        self.candidates
            .iter()
            .find(|c| c.target == opt)
            .map(|c| c.id)
            .expect("optimum is attained")
    }

    /// "name=value" rendering used in prompts and as rerank documents.
    pub fn parameter_string(&self, id: usize) -> String {
        self.feature_names
            .iter()
            .zip(&self.candidates[id].features)
            .map(|(name, v)| format!("{name}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// SHA-256 over the numeric content and metadata, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0]);
        for f in &self.feature_names {
            h.update(f.as_bytes());
            h.update([0]);
        }
        h.update(self.target_name.as_bytes());
        h.update([self.goal as u8]);
        for c in &self.candidates {
            for v in &c.features {
                h.update(v.to_le_bytes());
            }
            h.update(c.target.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the pool back out in the loader's dialect. Values use the
    /// shortest decimal rendering that round-trips exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push(self.target_name.clone());
        w.write_record(&header)?;
        for c in &self.candidates {
            let mut row: Vec<String> = c.features.iter().map(|v| v.to_string()).collect();
            row.push(c.target.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub csv_path: PathBuf,
    pub target_column: String,
    pub goal: Goal,
    /// Defaults to every non-target column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_columns: Option<Vec<String>>,
    #[serde(default)]
    pub context: String,
    /// Row count the file is expected to have, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_rows: Option<usize>,
}

pub fn load_csv(spec: &DatasetSpec) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(&spec.csv_path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::EmptyDataset);
    }
    let column = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let target_idx = column(&spec.target_column)?;
    let feature_names: Vec<String> = match &spec.feature_columns {
        Some(cols) => {
            if cols.iter().any(|c| c == &spec.target_column) {
                return Err(Error::Schema(format!(
                    "target column '{}' is also listed as a feature",
                    spec.target_column
                )));
            }
            cols.clone()
        }
        None => header
            .iter()
            .filter(|h| *h != &spec.target_column)
            .cloned()
            .collect(),
    };
    let feature_idx = feature_names
        .iter()
        .map(|n| column(n))
        .collect::<Result<Vec<_>>>()?;

    let parse = |record: &csv::StringRecord, row: usize, idx: usize| -> Result<f64> {
        let cell = record.get(idx).unwrap_or("");
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Err(Error::CsvParse {
                row,
                column: header[idx].clone(),
                message: format!("'{cell}' is not finite"),
            }),
            Err(e) => Err(Error::CsvParse {
                row,
                column: header[idx].clone(),
                message: format!("'{cell}': {e}"),
            }),
        }
    };

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // data rows are numbered from 1, the header is row 0
        let row = i + 1;
        let features = feature_idx
            .iter()
            .map(|&j| parse(&record, row, j))
            .collect::<Result<Vec<_>>>()?;
        let target = parse(&record, row, target_idx)?;
        rows.push((features, target));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(expected) = spec.expected_rows {
        if rows.len() != expected {
            log::warn!(
                "{}: expected {expected} rows, found {}",
                spec.name,
                rows.len()
            );
        }
    }
    Ok(Dataset::new(
        spec.name.clone(),
        feature_names,
        spec.target_column.clone(),
        spec.goal,
        rows,
    )?
    .with_context(spec.context.clone()))
}

/// The four benchmark pools. `csv_path` is left empty for the user to fill in.
pub fn registry() -> Vec<DatasetSpec> {
    let entry = |name: &str, rows: usize, target: &str, goal: Goal, context: &str| DatasetSpec {
        name: name.to_owned(),
        csv_path: PathBuf::new(),
        target_column: target.to_owned(),
        goal,
        feature_columns: None,
        context: context.to_owned(),
        expected_rows: Some(rows),
    };
    vec![
        entry(
            "matbench_steels",
            312,
            "Yield Strength",
            Goal::Maximize,
            "Steel alloys described by their elemental composition (weight fractions). \
             The goal is to find the alloy composition with the highest yield strength.",
        ),
        entry(
            "P3HT/CNT",
            323,
            "Electrical Conductivity",
            Goal::Maximize,
            "Thin films of poly(3-hexylthiophene) blended with carbon nanotubes and dopants. \
             Inputs are the fractions of each component; the goal is the highest electrical conductivity.",
        ),
        entry(
            "Perovskite",
            139,
            "Instability Index",
            Goal::Minimize,
            "Mixed-cation halide perovskite films aged under heat, humidity and illumination. \
             Inputs are the cation fractions; the goal is the lowest instability index.",
        ),
        entry(
            "Membrane",
            73,
            "Elastic Modulus",
            Goal::Maximize,
            "Porous polymer membranes made by non-solvent induced phase separation. \
             Inputs are polymer concentration and processing conditions; the goal is the highest elastic modulus.",
        ),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Quadratic2D,
    PlateauMix,
    Linear1D,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quadratic2d" => Ok(SyntheticKind::Quadratic2D),
            "plateaumix" | "plateau" => Ok(SyntheticKind::PlateauMix),
            "linear1d" | "linear" => Ok(SyntheticKind::Linear1D),
            other => Err(Error::Config(format!("unknown synthetic pool kind '{other}'"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Quadratic2D => "quadratic2d",
            SyntheticKind::PlateauMix => "plateaumix",
            SyntheticKind::Linear1D => "linear1d",
        })
    }
}

/// Deterministic test pools.
///
/// * `Quadratic2D`: `y = -(x1^2 + x2^2)` on a jittered square grid over
///   `[-1, 1]^2`. The grid node nearest the center is pinned to the origin,
///   so the unique maximum is `y = 0` at `(0, 0)`.
/// * `Linear1D`: `y = x` on jittered, distinct points of `[0, 1]`.
/// * `PlateauMix`: 2-D points whose target is the plateau level of their
///   cell; the top level is shared by two separated cells.
pub fn synthetic_pool(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::Config(format!(
            "synthetic pools need at least 4 points, got {n}"
        )));
    }
    let mut rng = rng::stream(seed, rng::Purpose::Initialization, 0x5eed);
    let name = format!("synthetic:{kind}:{n}");
    match kind {
        SyntheticKind::Linear1D => {
            let step = 1.0 / (n - 1) as f64;
            let rows = (0..n)
                .map(|i| {
                    let jitter = if i == 0 || i == n - 1 {
                        0.0
                    } else {
                        rng.random_range(-0.25..0.25) * step
                    };
                    let x = i as f64 * step + jitter;
                    (vec![x], x)
                })
                .collect();
            Ok(Dataset::new(name, vec!["x".into()], "y", Goal::Maximize, rows)?
                .with_context("A one-dimensional response that increases linearly with x."))
        }
        SyntheticKind::Quadratic2D => {
            let side = (n as f64).sqrt().ceil() as usize;
            let step = 2.0 / (side.max(2) - 1) as f64;
            let center = (side - 1) / 2;
            // visit grid nodes center-out so the origin is always included
            let mut nodes: Vec<(usize, usize)> =
                (0..side).flat_map(|i| (0..side).map(move |j| (i, j))).collect();
            nodes.sort_by_key(|&(i, j)| {
                let di = i.abs_diff(center);
                let dj = j.abs_diff(center);
                (di * di + dj * dj, i, j)
            });
            let offset = center as f64 * step - 1.0;
            let rows = nodes
                .into_iter()
                .take(n)
                .enumerate()
                .map(|(k, (i, j))| {
                    let (x1, x2) = if k == 0 {
                        (0.0, 0.0)
                    } else {
                        (
                            i as f64 * step - 1.0 - offset + rng.random_range(-0.3..0.3) * step,
                            j as f64 * step - 1.0 - offset + rng.random_range(-0.3..0.3) * step,
                        )
                    };
                    (vec![x1, x2], 0.0 - (x1 * x1 + x2 * x2))
                })
                .collect::<Vec<_>>();
            let mut rows = rows;
            shuffle(&mut rows, &mut rng);
            Ok(
                Dataset::new(name, vec!["x1".into(), "x2".into()], "y", Goal::Maximize, rows)?
                    .with_context(
                        "A smooth two-dimensional response surface with a single peak.",
                    ),
            )
        }
        SyntheticKind::PlateauMix => {
            let rows = (0..n)
                .map(|_| {
                    let x1: f64 = rng.random_range(0.0..1.0);
                    let x2: f64 = rng.random_range(0.0..1.0);
                    (vec![x1, x2], plateau_level(x1, x2))
                })
                .collect::<Vec<_>>();
            let mut rows = rows;
            // guarantee both top plateaus are populated
            rows[0] = (vec![0.1, 0.1], plateau_level(0.1, 0.1));
            rows[1] = (vec![0.9, 0.9], plateau_level(0.9, 0.9));
            shuffle(&mut rows, &mut rng);
            Ok(
                Dataset::new(name, vec!["x1".into(), "x2".into()], "y", Goal::Maximize, rows)?
                    .with_context("A piecewise-constant response with two equally good plateaus."),
            )
        }
    }
}

fn plateau_level(x1: f64, x2: f64) -> f64 {
    let cell = |v: f64| ((v * 4.0).floor() as usize).min(3);
    match (cell(x1), cell(x2)) {
        (0, 0) | (3, 3) => 3.0,
        (a, b) if a == b => 2.0,
        (a, b) if a.abs_diff(b) == 1 => 1.0,
        _ => 0.0,
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Where a run's pool comes from. Serialized into run configs under "dataset".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetRef {
    Csv(DatasetSpec),
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetRef {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetRef::Csv(spec) => load_csv(spec),
            DatasetRef::Synthetic { kind, n, seed } => synthetic_pool(*kind, *n, *seed),
        }
    }
}

impl FromStr for DatasetRef {
    type Err = Error;

    /// Accepts `synthetic:<kind>:<n>[:<seed>]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["synthetic", kind, n, rest @ ..] if rest.len() <= 1 => {
                let n = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad pool size '{n}'")))?;
                let seed = match rest.first() {
                    Some(s) => s
                        .parse()
                        .map_err(|_| Error::Config(format!("bad pool seed '{s}'")))?,
                    None => 0,
                };
                Ok(DatasetRef::Synthetic {
                    kind: kind.parse()?,
                    n,
                    seed,
                })
            }
            _ => Err(Error::Config(format!(
                "cannot parse dataset '{s}'; expected synthetic:<kind>:<n>[:<seed>]"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn spec(path: PathBuf, target: &str) -> DatasetSpec {
        DatasetSpec {
            name: "t".into(),
            csv_path: path,
            target_column: target.into(),
            goal: Goal::Maximize,
            feature_columns: None,
            context: String::new(),
            expected_rows: None,
        }
    }

    #[test]
    fn loads_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "a,b,y\n1,2,3\n4,5,6\n7,8,9.5\n");
        let ds = load_csv(&spec(p, "y")).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
        assert_eq!(ds.candidates[2].target, 9.5);
        assert_eq!(ds.candidates[1].id, 1);
    }

    #[test]
    fn missing_target_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "a,b,y\n1,2,3\n");
        assert!(matches!(load_csv(&spec(p, "z")), Err(Error::Schema(_))));
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "a,b,y\n1,2,3\n4,oops,6\n");
        match load_csv(&spec(p, "y")) {
            Err(Error::CsvParse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "");
        assert!(matches!(load_csv(&spec(p.clone(), "y")), Err(Error::EmptyDataset)));
        let p = write(&dir, "b.csv", "a,y\n");
        assert!(matches!(load_csv(&spec(p, "y")), Err(Error::EmptyDataset)));
    }

    #[test]
    fn explicit_feature_columns_must_exclude_target() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "a,b,y\n1,2,3\n");
        let mut s = spec(p, "y");
        s.feature_columns = Some(vec!["a".into(), "y".into()]);
        assert!(matches!(load_csv(&s), Err(Error::Schema(_))));
        s.feature_columns = Some(vec!["b".into()]);
        let ds = load_csv(&s).unwrap();
        assert_eq!(ds.feature_names, vec!["b"]);
        assert_eq!(ds.candidates[0].features, vec![2.0]);
    }

    #[test]
    fn perovskite_shaped_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("Cs,FA,MA,Instability Index\n");
        for i in 0..139 {
            let cs = (i % 7) as f64 / 10.0;
            let fa = (i % 5) as f64 / 10.0;
            body.push_str(&format!("{cs},{fa},{},{}\n", 1.0 - cs - fa, i as f64 * 0.37 + 1.0));
        }
        let p = write(&dir, "perovskite.csv", &body);
        let mut s = registry()[2].clone();
        s.csv_path = p;
        let ds = load_csv(&s).unwrap();
        assert_eq!(ds.len(), 139);
        assert_eq!(ds.goal, Goal::Minimize);
        assert_eq!(ds.optimum(), 1.0);
    }

    #[test]
    fn registry_matches_benchmark_table() {
        let r = registry();
        assert_eq!(r.len(), 4);
        let rows: Vec<_> = r.iter().map(|s| s.expected_rows.unwrap()).collect();
        assert_eq!(rows, vec![312, 323, 139, 73]);
        let goals: Vec<_> = r.iter().map(|s| s.goal).collect();
        assert_eq!(
            goals,
            vec![Goal::Maximize, Goal::Maximize, Goal::Minimize, Goal::Maximize]
        );
        let targets: Vec<_> = r.iter().map(|s| s.target_column.as_str()).collect();
        assert_eq!(
            targets,
            vec![
                "Yield Strength",
                "Electrical Conductivity",
                "Instability Index",
                "Elastic Modulus"
            ]
        );
        assert_eq!(r[0].name, "matbench_steels");
        assert!(r.iter().all(|s| !s.context.is_empty()));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_pool(SyntheticKind::Quadratic2D, 37, 3).unwrap();
        let p = dir.path().join("q.csv");
        ds.write_csv(&p).unwrap();
        let back = load_csv(&spec(p, "y")).unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.targets(), ds.targets());
    }

    #[test]
    fn linear_optimum_is_largest_x() {
        let ds = synthetic_pool(SyntheticKind::Linear1D, 10, 1).unwrap();
        let best = ds
            .candidates
            .iter()
            .max_by(|a, b| a.features[0].total_cmp(&b.features[0]))
            .unwrap();
        assert_eq!(ds.optimum_id(), best.id);
    }

    #[test]
    fn quadratic_optimum_is_origin() {
        for n in [4, 9, 50, 200] {
            let ds = synthetic_pool(SyntheticKind::Quadratic2D, n, 7).unwrap();
            assert_eq!(ds.len(), n);
            assert_eq!(ds.optimum(), 0.0);
            let opt = &ds.candidates[ds.optimum_id()];
            assert_eq!(opt.features, vec![0.0, 0.0]);
            let n_opt = ds.candidates.iter().filter(|c| c.target == 0.0).count();
            assert_eq!(n_opt, 1);
        }
    }

    #[test]
    fn plateau_has_two_top_plateaus() {
        let ds = synthetic_pool(SyntheticKind::PlateauMix, 40, 5).unwrap();
        assert_eq!(ds.optimum(), 3.0);
        let tops: Vec<_> = ds.candidates.iter().filter(|c| c.target == 3.0).collect();
        assert!(tops.len() >= 2);
        assert!(tops.iter().any(|c| c.features[0] < 0.25));
        assert!(tops.iter().any(|c| c.features[0] >= 0.75));
    }

    #[test]
    fn synthetic_is_pure_and_validated() {
        for kind in [SyntheticKind::Quadratic2D, SyntheticKind::PlateauMix, SyntheticKind::Linear1D] {
            assert_eq!(synthetic_pool(kind, 30, 9).unwrap(), synthetic_pool(kind, 30, 9).unwrap());
        }
        assert!(matches!(
            synthetic_pool(SyntheticKind::Linear1D, 3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_ref_parses() {
        let r: DatasetRef = "synthetic:quadratic2d:100".parse().unwrap();
        assert_eq!(
            r,
            DatasetRef::Synthetic {
                kind: SyntheticKind::Quadratic2D,
                n: 100,
                seed: 0
            }
        );
        assert!("synthetic:nope:10".parse::<DatasetRef>().is_err());
        assert!("file.csv".parse::<DatasetRef>().is_err());
    }
}
