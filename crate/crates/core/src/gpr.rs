//! Gaussian-process regression with a scaled RBF plus white-noise kernel.
//!
//! Hyperparameters `(c, l, noise)` are fitted by maximizing the log marginal
//! likelihood in log space with a projected quasi-Newton ascent inside the
//! box bounds, from the fixed start `(1, 1, 1)` and a few seeded restarts.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::Prediction;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const SCALE_BOUNDS: (f64, f64) = (1e-5, 1e5);
pub const LENGTH_BOUNDS: (f64, f64) = (1e-3, 1e3);
pub const NOISE_BOUNDS: (f64, f64) = (1e-3, 1e6);

/// Diagonal jitter schedule, relative to the mean diagonal.
const JITTER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub scale_c: f64,
    pub length_l: f64,
    pub noise_n: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            scale_c: 1.0,
            length_l: 1.0,
            noise_n: 1.0,
        }
    }
}

impl KernelParams {
    pub fn in_bounds(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        inside(self.scale_c, SCALE_BOUNDS)
            && inside(self.length_l, LENGTH_BOUNDS)
            && inside(self.noise_n, NOISE_BOUNDS)
    }

    pub fn to_log(self) -> [f64; 3] {
        [self.scale_c.ln(), self.length_l.ln(), self.noise_n.ln()]
    }

    pub fn from_log(theta: [f64; 3]) -> Self {
        KernelParams {
            scale_c: theta[0].exp(),
            length_l: theta[1].exp(),
            noise_n: theta[2].exp(),
        }
    }

    /// Prior variance of a new observation.
    pub fn prior_variance(&self) -> f64 {
        self.scale_c + self.noise_n
    }
}

fn log_bounds() -> [(f64, f64); 3] {
    [SCALE_BOUNDS, LENGTH_BOUNDS, NOISE_BOUNDS].map(|(lo, hi)| (lo.ln(), hi.ln()))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

fn check_dims(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    let d = a.first().or(b.first()).map_or(0, Vec::len);
    for row in a.iter().chain(b) {
        if row.len() != d {
            return Err(Error::Shape {
                expected: d,
                got: row.len(),
            });
        }
    }
    Ok(())
}

/// `K[i][j] = c * exp(-|a_i - b_j|^2 / (2 l^2)) + noise * [same_inputs && i == j]`.
pub fn kernel_matrix(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    params: &KernelParams,
    same_inputs: bool,
) -> Result<DMatrix<f64>> {
    check_dims(a, b)?;
    let two_l2 = 2.0 * params.length_l * params.length_l;
    let mut k = DMatrix::from_fn(a.len(), b.len(), |i, j| {
        params.scale_c * (-sq_dist(&a[i], &b[j]) / two_l2).exp()
    });
    if same_inputs {
        for i in 0..a.len().min(b.len()) {
            k[(i, i)] += params.noise_n;
        }
    }
    Ok(k)
}

/// Cholesky factor of `k`, escalating diagonal jitter on failure.
fn cholesky(k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok(c);
    }
    let n = k.nrows();
    let mean_diag = k.diagonal().sum() / n.max(1) as f64;
    for rel in JITTER {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += rel * mean_diag;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok(c);
        }
    }
    Err(Error::Numerical(
        "kernel matrix is not positive definite after jitter escalation".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lml {
    pub value: f64,
    /// Gradient with respect to `(ln c, ln l, ln noise)`.
    pub gradient: [f64; 3],
}

/// `-0.5 y^T K^-1 y - 0.5 log|K| - n/2 log 2pi` and its log-space gradient
/// `0.5 tr((a a^T - K^-1) dK/dtheta)` with `a = K^-1 y`.
pub fn log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], params: &KernelParams) -> Result<Lml> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Fit("empty training set".into()));
    }
    let n = x.len();
    let k = kernel_matrix(x, x, params, true)?;
    let chol = cholesky(k)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = -0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();

    let k_inv = chol.inverse();
    // W = a a^T - K^-1
    let w = &alpha * alpha.transpose() - k_inv;
    let l2 = params.length_l * params.length_l;
    let mut g = [0.0; 3];
    for i in 0..n {
        for j in 0..n {
            let d2 = sq_dist(&x[i], &x[j]);
            let rbf = params.scale_c * (-d2 / (2.0 * l2)).exp();
            g[0] += w[(i, j)] * rbf;
            g[1] += w[(i, j)] * rbf * d2 / l2;
        }
        g[2] += w[(i, i)] * params.noise_n;
    }
    Ok(Lml {
        value,
        gradient: g.map(|v| 0.5 * v),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GprOptions {
    /// Random restarts in addition to the fixed start.
    pub restarts: usize,
    pub max_steps: usize,
    /// Standardize targets before fitting; predictions are mapped back.
    pub standardize_targets: bool,
}

impl Default for GprOptions {
    fn default() -> Self {
        GprOptions {
            restarts: 4,
            max_steps: 200,
            standardize_targets: false,
        }
    }
}

fn project(theta: [f64; 3]) -> [f64; 3] {
    let b = log_bounds();
    [0, 1, 2].map(|i| theta[i].clamp(b[i].0, b[i].1))
}

/// Projected BFGS ascent with backtracking. Only accepts steps that increase
/// the objective, so the result is never worse than the start.
fn ascend(x: &[Vec<f64>], y: &[f64], start: [f64; 3], max_steps: usize) -> Result<([f64; 3], f64)> {
    let bounds = log_bounds();
    let eval = |t: [f64; 3]| log_marginal_likelihood(x, y, &KernelParams::from_log(t));
    let mut theta = project(start);
    let mut cur = eval(theta)?;
    let mut hinv = nalgebra::Matrix3::<f64>::identity();
    for _ in 0..max_steps {
        let g = nalgebra::Vector3::from(cur.gradient);
        // variables pinned at a bound with the gradient pushing outward stay fixed
        let free = [0, 1, 2].map(|i| {
            let at_lo = theta[i] <= bounds[i].0 + 1e-12 && g[i] < 0.0;
            let at_hi = theta[i] >= bounds[i].1 - 1e-12 && g[i] > 0.0;
            !(at_lo || at_hi)
        });
        let mut gf = g;
        for i in 0..3 {
            if !free[i] {
                gf[i] = 0.0;
            }
        }
        if gf.norm() < 1e-8 {
            break;
        }
        let mut dir = hinv * gf;
        for i in 0..3 {
            if !free[i] {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&gf) <= 0.0 {
            hinv = nalgebra::Matrix3::identity();
            dir = gf;
        }
        // cap the step at one e-fold per coordinate
        let max = dir.amax();
        if max > 1.0 {
            dir /= max;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = project([0, 1, 2].map(|i| theta[i] + step * dir[i]));
            if let Ok(next) = eval(trial) {
                let moved: f64 = (0..3).map(|i| (trial[i] - theta[i]) * gf[i]).sum();
                if next.value.is_finite() && next.value >= cur.value + 1e-4 * moved && next.value > cur.value {
                    accepted = Some((trial, next));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, next)) = accepted else {
            break;
        };
        let s = nalgebra::Vector3::from([0, 1, 2].map(|i| trial[i] - theta[i]));
        // ascent on f is descent on -f: y = -(g_new - g_old)
        let yk = -(nalgebra::Vector3::from(next.gradient) - g);
        let sy = s.dot(&yk);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let id = nalgebra::Matrix3::<f64>::identity();
            hinv = (id - rho * s * yk.transpose()) * hinv * (id - rho * yk * s.transpose())
                + rho * s * s.transpose();
        }
        let converged = (next.value - cur.value).abs() < 1e-10 * (1.0 + cur.value.abs());
        theta = trial;
        cur = next;
        if converged {
            break;
        }
    }
    Ok((theta, cur.value))
}

/// Maximum-likelihood kernel parameters within the box bounds.
pub fn fit_gpr(x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<KernelParams> {
    fit_gpr_with(x, y, seed, &GprOptions::default())
}

pub fn fit_gpr_with(x: &[Vec<f64>], y: &[f64], seed: u64, opts: &GprOptions) -> Result<KernelParams> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Fit(format!(
            "need matching non-empty inputs, got {} rows and {} targets",
            x.len(),
            y.len()
        )));
    }
    let y = if opts.standardize_targets {
        TargetScaler::fit(y).apply(y)
    } else {
        y.to_vec()
    };
    let bounds = log_bounds();
    let mut rng = rng::stream(seed, Purpose::Restarts, 0);
    let mut starts = vec![KernelParams::default().to_log()];
    for _ in 0..opts.restarts {
        starts.push([0, 1, 2].map(|i| rng.random_range(bounds[i].0..=bounds[i].1)));
    }
    let mut best: Option<([f64; 3], f64)> = None;
    let mut last_err = None;
    for start in starts {
        match ascend(x, &y, start, opts.max_steps) {
            Ok((theta, value)) => {
                if best.is_none_or(|(_, b)| value > b) {
                    best = Some((theta, value));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((theta, _)) => {
            let mut p = KernelParams::from_log(theta);
            // exp(ln(v)) can land one ulp outside the box
            p.scale_c = p.scale_c.clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1);
            p.length_l = p.length_l.clamp(LENGTH_BOUNDS.0, LENGTH_BOUNDS.1);
            p.noise_n = p.noise_n.clamp(NOISE_BOUNDS.0, NOISE_BOUNDS.1);
            Ok(p)
        }
        None => Err(Error::Fit(format!(
            "all restarts failed: {}",
            last_err.map_or_else(String::new, |e| e.to_string())
        ))),
    }
}

#[derive(Debug, Clone, Copy)]
struct TargetScaler {
    mean: f64,
    scale: f64,
}

impl TargetScaler {
    fn fit(y: &[f64]) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        TargetScaler {
            mean,
            scale: if sd > 0.0 { sd } else { 1.0 },
        }
    }

    fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.mean) / self.scale).collect()
    }
}

/// Posterior mean `k^T K^-1 y` and std `sqrt(c + noise - k^T K^-1 k)`.
pub fn predict_gpr(
    x_train: &[Vec<f64>],
    y_train: &[f64],
    params: &KernelParams,
    x_query: &[Vec<f64>],
) -> Result<Vec<Prediction>> {
    if x_train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if x_train.len() != y_train.len() {
        return Err(Error::Shape {
            expected: x_train.len(),
            got: y_train.len(),
        });
    }
    check_dims(x_train, x_query)?;
    let chol = cholesky(kernel_matrix(x_train, x_train, params, true)?)?;
    let alpha = chol.solve(&DVector::from_column_slice(y_train));
    let ks = kernel_matrix(x_train, x_query, params, false)?;
    let v = chol.solve(&ks);
    let prior = params.prior_variance();
    Ok((0..x_query.len())
        .map(|q| {
            let k = ks.column(q);
            let mean = k.dot(&alpha);
            let var = (prior - k.dot(&v.column(q))).clamp(0.0, prior);
            Prediction::new(mean, var.sqrt())
        })
        .collect())
}

/// Prediction path used by the proposer: honours target standardization.
pub fn predict_gpr_with(
    x_train: &[Vec<f64>],
    y_train: &[f64],
    params: &KernelParams,
    x_query: &[Vec<f64>],
    opts: &GprOptions,
) -> Result<Vec<Prediction>> {
    if !opts.standardize_targets {
        return predict_gpr(x_train, y_train, params, x_query);
    }
    let ts = TargetScaler::fit(y_train);
    let preds = predict_gpr(x_train, &ts.apply(y_train), params, x_query)?;
    Ok(preds
        .into_iter()
        .map(|p| Prediction::new(p.mean * ts.scale + ts.mean, p.std * ts.scale))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_instance(seed: u64, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let y = x.iter().map(|r| r[0].sin() + 0.3 * rng.random_range(-1.0..1.0)).collect();
        (x, y)
    }

    #[test]
    fn kernel_diagonal_and_decay() {
        let p = KernelParams { scale_c: 2.0, length_l: 0.5, noise_n: 0.1 };
        let a = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let k = kernel_matrix(&a, &a, &p, true).unwrap();
        assert!((k[(0, 0)] - 2.1).abs() < 1e-15);
        assert!((k[(1, 1)] - 2.1).abs() < 1e-15);
        let far = kernel_matrix(&[vec![0.0]], &[vec![1e3]], &p, false).unwrap();
        assert_eq!(far[(0, 0)], 0.0);
        assert!(kernel_matrix(&a, &[vec![1.0]], &p, false).is_err());
    }

    #[test]
    fn kernel_matches_scalar_formula() {
        let p = KernelParams { scale_c: 1.7, length_l: 0.8, noise_n: 0.05 };
        let a = vec![vec![0.1, -0.3], vec![0.9, 0.4], vec![-1.2, 0.0]];
        let k = kernel_matrix(&a, &a, &p, true).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dx = a[i][0] - a[j][0];
                let dy = a[i][1] - a[j][1];
                let mut v = 1.7 * (-(dx * dx + dy * dy) / (2.0 * 0.64)).exp();
                if i == j {
                    v += 0.05;
                }
                assert!((k[(i, j)] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_lml() {
        let p = KernelParams { scale_c: 0.7, length_l: 2.0, noise_n: 0.2 };
        let l = log_marginal_likelihood(&[vec![3.0]], &[0.0], &p).unwrap();
        let expected = -0.5 * (0.9f64).ln() - 0.5 * (2.0 * PI).ln();
        assert!((l.value - expected).abs() < 1e-14);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (x, y) = random_instance(seed, 5, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..0.0)];
            let g = log_marginal_likelihood(&x, &y, &KernelParams::from_log(theta)).unwrap().gradient;
            for i in 0..3 {
                let h = 1e-5;
                let mut tp = theta;
                let mut tm = theta;
                tp[i] += h;
                tm[i] -= h;
                let fp = log_marginal_likelihood(&x, &y, &KernelParams::from_log(tp)).unwrap().value;
                let fm = log_marginal_likelihood(&x, &y, &KernelParams::from_log(tm)).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (g[i] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-5, "seed {seed} param {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn fit_improves_on_fixed_start_and_stays_in_bounds() {
        for seed in 0..4 {
            let (x, y) = random_instance(seed, 12, 2);
            let p = fit_gpr(&x, &y, seed).unwrap();
            assert!(p.in_bounds());
            let fitted = log_marginal_likelihood(&x, &y, &p).unwrap().value;
            let start = log_marginal_likelihood(&x, &y, &KernelParams::default()).unwrap().value;
            assert!(fitted >= start);
        }
    }

    #[test]
    fn zero_targets_drive_scale_to_lower_bound() {
        let (x, _) = random_instance(3, 10, 2);
        let y = vec![0.0; 10];
        let p = fit_gpr(&x, &y, 1).unwrap();
        assert!(p.in_bounds());
        assert!(p.scale_c < 1e-3, "{p:?}");
        assert!(p.noise_n < 1e-2, "{p:?}");
    }

    #[test]
    fn pure_noise_is_absorbed_by_noise_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let y: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mean = y.iter().sum::<f64>() / 30.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
        let p = fit_gpr(&x, &y, 5).unwrap();
        assert!(p.noise_n >= 0.9 * var, "{p:?} var {var}");
    }

    #[test]
    fn interpolates_with_small_noise() {
        let x = vec![vec![-1.0], vec![0.0], vec![1.5]];
        let y = vec![0.3, -0.8, 1.1];
        let p = KernelParams { scale_c: 1.0, length_l: 1.0, noise_n: 1e-3 };
        let preds = predict_gpr(&x, &y, &p, &x).unwrap();
        for (pr, t) in preds.iter().zip(&y) {
            assert!((pr.mean - t).abs() < 1e-2);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let x = vec![vec![0.0], vec![0.5]];
        let p = KernelParams { scale_c: 2.0, length_l: 0.3, noise_n: 0.1 };
        let pr = predict_gpr(&x, &[1.0, 2.0], &p, &[vec![1e4]]).unwrap()[0];
        assert!(pr.mean.abs() < 1e-12);
        assert!((pr.std.powi(2) - 2.1).abs() < 1e-12);
    }

    #[test]
    fn two_point_posterior_matches_hand_solution() {
        let p = KernelParams { scale_c: 1.3, length_l: 0.7, noise_n: 0.2 };
        let (x1, x2, q) = (0.0f64, 1.0f64, 0.4f64);
        let y = [0.5, -1.0];
        let k = |a: f64, b: f64| 1.3 * (-(a - b).powi(2) / (2.0 * 0.49)).exp();
        let (a, b, d) = (k(x1, x1) + 0.2, k(x1, x2), k(x2, x2) + 0.2);
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let ks = [k(q, x1), k(q, x2)];
        let w = [
            inv[0][0] * ks[0] + inv[0][1] * ks[1],
            inv[1][0] * ks[0] + inv[1][1] * ks[1],
        ];
        let mean = w[0] * y[0] + w[1] * y[1];
        let var = 1.5 - (w[0] * ks[0] + w[1] * ks[1]);
        let pr = predict_gpr(&[vec![x1], vec![x2]], &y, &p, &[vec![q]]).unwrap()[0];
        assert!((pr.mean - mean).abs() < 1e-10);
        assert!((pr.std * pr.std - var).abs() < 1e-10);
    }

    #[test]
    fn variance_bounded_and_permutation_invariant() {
        let (x, y) = random_instance(9, 8, 2);
        let p = KernelParams { scale_c: 0.8, length_l: 0.6, noise_n: 0.05 };
        let (q, _) = random_instance(10, 20, 2);
        let a = predict_gpr(&x, &y, &p, &q).unwrap();
        let mut idx: Vec<usize> = (0..8).collect();
        idx.reverse();
        idx.swap(0, 3);
        let xp: Vec<_> = idx.iter().map(|&i| x[i].clone()).collect();
        let yp: Vec<_> = idx.iter().map(|&i| y[i]).collect();
        let b = predict_gpr(&xp, &yp, &p, &q).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!(u.std * u.std <= 0.85 + 1e-12);
            assert!((u.mean - v.mean).abs() < 1e-10);
            assert!((u.std - v.std).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_point_never_increases_variance() {
        let (x, y) = random_instance(4, 6, 2);
        let p = KernelParams { scale_c: 1.0, length_l: 0.9, noise_n: 0.1 };
        let (q, _) = random_instance(5, 15, 2);
        let before = predict_gpr(&x, &y, &p, &q).unwrap();
        let mut x2 = x.clone();
        let mut y2 = y.clone();
        x2.push(x[2].clone());
        y2.push(y[2]);
        let after = predict_gpr(&x2, &y2, &p, &q).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!(a.std <= b.std + 1e-12);
        }
    }

    #[test]
    fn target_standardization_round_trips_scale() {
        let (x, y) = random_instance(2, 10, 1);
        let y: Vec<f64> = y.iter().map(|v| 1000.0 + 50.0 * v).collect();
        let opts = GprOptions { standardize_targets: true, ..Default::default() };
        let p = fit_gpr_with(&x, &y, 0, &opts).unwrap();
        let pr = predict_gpr_with(&x, &y, &p, &x, &opts).unwrap();
        for (a, t) in pr.iter().zip(&y) {
            assert!((a.mean - t).abs() < 100.0);
        }
    }
}
