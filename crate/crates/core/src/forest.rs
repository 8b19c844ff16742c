//! CART regression trees and the bagged random forest built from them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::Prediction;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature_index: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature_index,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature_index] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }
}

/// Midpoint between two sorted distinct values, kept strictly below `hi`.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid < hi {
        mid
    } else {
        lo
    }
}

/// Indices of `rows` sorted by feature `f`, ties by index.
pub(crate) fn sorted_by_feature(x: &[Vec<f64>], rows: &[usize], f: usize) -> Vec<usize> {
    let mut order = rows.to_vec();
    order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
    order
}

pub(crate) fn check_training_set(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Fit("empty training set".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Shape {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d = x[0].len();
    for row in x {
        if row.len() != d {
            return Err(Error::Shape {
                expected: d,
                got: row.len(),
            });
        }
    }
    Ok(d)
}

pub(crate) fn check_query(x: &[Vec<f64>], d: usize) -> Result<()> {
    for row in x {
        if row.len() != d {
            return Err(Error::Shape {
                expected: d,
                got: row.len(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
        }
    }
}

/// Best variance-reduction split of `rows`: (feature, threshold, left rows, right rows).
/// Scans features in index order and thresholds in ascending order, replacing
/// the incumbent only on strict improvement.
fn best_cart_split(
    x: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    min_leaf: usize,
) -> Option<(usize, f64, Vec<usize>, Vec<usize>)> {
    let n = rows.len();
    let d = x[rows[0]].len();
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let parent = total * total / n as f64;
    let mut best: Option<(f64, usize, usize, f64)> = None;
    for f in 0..d {
        let order = sorted_by_feature(x, rows, f);
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += y[order[k]];
            let n_left = k + 1;
            let n_right = n - n_left;
            if n_left < min_leaf || n_right < min_leaf {
                continue;
            }
            let lo = x[order[k]][f];
            let hi = x[order[k + 1]][f];
            if lo >= hi {
                continue;
            }
            let right_sum = total - left_sum;
            // reduction in sum of squared errors
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64
                - parent;
            if best.is_none_or(|(g, ..)| gain > g) {
                best = Some((gain, f, n_left, midpoint(lo, hi)));
            }
        }
    }
    let (gain, f, n_left, threshold) = best?;
    if gain <= 0.0 {
        return None;
    }
    let best_order = sorted_by_feature(x, rows, f);
    let (left, right) = best_order.split_at(n_left);
    Some((f, threshold, left.to_vec(), right.to_vec()))
}

fn grow_cart(x: &[Vec<f64>], y: &[f64], rows: Vec<usize>, depth: usize, cfg: &TreeConfig) -> TreeNode {
    let n = rows.len();
    let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let constant = rows.iter().all(|&i| y[i] == y[rows[0]]);
    let depth_ok = cfg.max_depth.is_none_or(|m| depth < m);
    if constant || n < cfg.min_samples_split.max(2) || !depth_ok {
        return TreeNode::Leaf { value: mean };
    }
    match best_cart_split(x, y, &rows, cfg.min_samples_leaf.max(1)) {
        None => TreeNode::Leaf { value: mean },
        Some((feature_index, threshold, left, right)) => TreeNode::Split {
            feature_index,
            threshold,
            left: Box::new(grow_cart(x, y, left, depth + 1, cfg)),
            right: Box::new(grow_cart(x, y, right, depth + 1, cfg)),
        },
    }
}

/// Fits one regression tree on the given (possibly repeated) row indices.
pub fn fit_tree(x: &[Vec<f64>], y: &[f64], rows: Vec<usize>, cfg: &TreeConfig) -> Result<TreeNode> {
    check_training_set(x, y)?;
    if rows.is_empty() {
        return Err(Error::Fit("empty training set".into()));
    }
    Ok(grow_cart(x, y, rows, 0, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub bootstrap: bool,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 400,
            bootstrap: true,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeNode>,
    pub n_features: usize,
}

pub fn fit_forest(x: &[Vec<f64>], y: &[f64], config: &ForestConfig) -> Result<ForestModel> {
    let d = check_training_set(x, y)?;
    if config.n_trees == 0 {
        return Err(Error::Config("n_trees must be >= 1".into()));
    }
    let tree_cfg = TreeConfig {
        max_depth: config.max_depth,
        min_samples_split: config.min_samples_split,
        min_samples_leaf: config.min_samples_leaf,
    };
    let n = x.len();
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let rows = if config.bootstrap {
                let mut rng = rng::stream(config.seed, Purpose::Bootstrap, t as u64);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow_cart(x, y, rows, 0, &tree_cfg)
        })
        .collect();
    Ok(ForestModel { trees, n_features: d })
}

impl ForestModel {
    /// Per-tree predictions for one query.
    pub fn tree_predictions(&self, x: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(x)).collect()
    }
}

/// Ensemble mean and population standard deviation across trees.
pub fn predict_forest(model: &ForestModel, x: &[Vec<f64>]) -> Result<Vec<Prediction>> {
    check_query(x, model.n_features)?;
    Ok(x
        .iter()
        .map(|q| Prediction::from_samples(&model.tree_predictions(q)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_trees: usize, bootstrap: bool, seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees,
            bootstrap,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn single_point_gives_leaves() {
        let m = fit_forest(&[vec![1.0, 2.0]], &[3.5], &cfg(10, true, 0)).unwrap();
        assert!(m.trees.iter().all(|t| *t == TreeNode::Leaf { value: 3.5 }));
        let p = predict_forest(&m, &[vec![0.0, 0.0], vec![9.0, -9.0]]).unwrap();
        assert!(p.iter().all(|p| p.mean == 3.5 && p.std == 0.0));
    }

    #[test]
    fn unbootstrapped_tree_memorizes() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![(i * 7 % 12) as f64, (i % 3) as f64]).collect();
        let y: Vec<f64> = (0..12).map(|i| ((i * 5) % 11) as f64 - 3.0).collect();
        let m = fit_forest(&x, &y, &cfg(1, false, 0)).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(m.trees[0].predict(xi), *yi);
        }
    }

    #[test]
    fn root_split_matches_exhaustive_enumeration() {
        let x = vec![vec![0.3], vec![1.7], vec![2.2], vec![4.0]];
        let y = vec![1.0, 1.4, 5.0, 6.5];
        // oracle: every midpoint, within-group SSE
        let sse = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m).powi(2)).sum::<f64>()
        };
        let xs = [0.3, 1.7, 2.2, 4.0];
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..3 {
            let thr = (xs[k] + xs[k + 1]) / 2.0;
            let cost = sse(&y[..=k]) + sse(&y[k + 1..]);
            if cost < best.0 {
                best = (cost, thr);
            }
        }
        assert_eq!(best.1, (1.7 + 2.2) / 2.0);
        let tree = fit_tree(&x, &y, (0..4).collect(), &TreeConfig::default()).unwrap();
        match tree {
            TreeNode::Split { feature_index, threshold, .. } => {
                assert_eq!(feature_index, 0);
                assert!((threshold - best.1).abs() < 1e-12);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn equal_gain_ties_prefer_lowest_feature() {
        // both features separate the targets identically
        let x = vec![vec![0.0, 10.0], vec![1.0, 11.0]];
        let y = vec![0.0, 1.0];
        let tree = fit_tree(&x, &y, vec![0, 1], &TreeConfig::default()).unwrap();
        match tree {
            TreeNode::Split { feature_index, threshold, .. } => {
                assert_eq!(feature_index, 0);
                assert_eq!(threshold, 0.5);
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn two_tree_arithmetic() {
        let model = ForestModel {
            trees: vec![TreeNode::Leaf { value: 1.0 }, TreeNode::Leaf { value: 3.0 }],
            n_features: 1,
        };
        let p = predict_forest(&model, &[vec![0.0]]).unwrap()[0];
        assert_eq!(p.mean, 2.0);
        assert_eq!(p.std, 1.0);
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<Vec<f64>> = (0..25)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.91).cos()])
            .collect();
        let y = x.iter().map(|r| r[0] * 2.0 - r[1] * r[1]).collect();
        (x, y)
    }

    #[test]
    fn mean_matches_independent_tree_iteration() {
        let (x, y) = toy();
        let m = fit_forest(&x, &y, &cfg(30, true, 11)).unwrap();
        let q = vec![vec![0.1, 0.2], vec![-0.7, 0.9]];
        let preds = predict_forest(&m, &q).unwrap();
        for (qi, p) in q.iter().zip(preds) {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for t in &m.trees {
                let v = t.predict(qi);
                sum += v;
                sq += v * v;
            }
            let mean = sum / 30.0;
            let var = sq / 30.0 - mean * mean;
            assert!((p.mean - mean).abs() < 1e-12);
            assert!((p.std - var.max(0.0).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn predictions_bounded_and_order_invariant() {
        let (x, y) = toy();
        let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let m = fit_forest(&x, &y, &cfg(50, true, 3)).unwrap();
        let queries: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 10.0 - 2.0, 1.0 - i as f64 / 20.0]).collect();
        let p = predict_forest(&m, &queries).unwrap();
        assert!(p.iter().all(|p| p.mean >= lo - 1e-12 && p.mean <= hi + 1e-12));

        let mut reversed = m.clone();
        reversed.trees.reverse();
        let p2 = predict_forest(&reversed, &queries).unwrap();
        for (a, b) in p.iter().zip(&p2) {
            assert!((a.mean - b.mean).abs() < 1e-12);
            assert!((a.std - b.std).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (x, y) = toy();
        assert_eq!(
            fit_forest(&x, &y, &cfg(20, true, 5)).unwrap(),
            fit_forest(&x, &y, &cfg(20, true, 5)).unwrap()
        );
        assert_ne!(
            fit_forest(&x, &y, &cfg(20, true, 5)).unwrap(),
            fit_forest(&x, &y, &cfg(20, true, 6)).unwrap()
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(fit_forest(&[], &[], &cfg(1, true, 0)), Err(Error::Fit(_))));
        let m = fit_forest(&[vec![1.0, 2.0]], &[1.0], &cfg(1, true, 0)).unwrap();
        assert!(matches!(predict_forest(&m, &[vec![1.0]]), Err(Error::Shape { .. })));
        let tree = TreeNode::Split {
            feature_index: 0,
            threshold: 1.0,
            left: Box::new(TreeNode::Leaf { value: -1.0 }),
            right: Box::new(TreeNode::Leaf { value: 1.0 }),
        };
        assert_eq!(tree.predict(&[1.0]), -1.0);
        assert_eq!(tree.predict(&[1.0000001]), 1.0);
        assert_eq!(tree.depth(), 1);
    }
}
