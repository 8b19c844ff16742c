//! Mean-field variational Bayesian neural network.
//!
//! Every weight and bias has an independent Gaussian posterior
//! `N(mu, exp(log_sigma)^2)` against a standard-normal prior. Training
//! minimizes `0.5 * mean((y - y_hat)^2) + sum(KL)` with the
//! reparameterization `W = mu + sigma * eps`, one weight draw per step, and
//! full-batch Adam. Prediction is the empirical mean and population standard
//! deviation over Monte-Carlo forward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acquisition::Prediction;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const INIT_MU_RANGE: f64 = 0.2;
pub const INIT_LOG_SIGMA: f64 = -5.0;
/// Observation noise of the Gaussian likelihood; fixed.
pub const OBSERVATION_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianLinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub mu_w: Vec<f64>,
    pub log_sigma_w: Vec<f64>,
    pub mu_b: Vec<f64>,
    pub log_sigma_b: Vec<f64>,
}

impl BayesianLinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        BayesianLinearLayer {
            in_dim,
            out_dim,
            mu_w: vec![0.0; in_dim * out_dim],
            log_sigma_w: vec![0.0; in_dim * out_dim],
            mu_b: vec![0.0; out_dim],
            log_sigma_b: vec![0.0; out_dim],
        }
    }

    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim);
        for v in layer.mu_w.iter_mut().chain(layer.mu_b.iter_mut()) {
            *v = rng.random_range(-INIT_MU_RANGE..=INIT_MU_RANGE);
        }
        for v in layer.log_sigma_w.iter_mut().chain(layer.log_sigma_b.iter_mut()) {
            *v = INIT_LOG_SIGMA;
        }
        layer
    }

    pub fn n_params(&self) -> usize {
        2 * (self.mu_w.len() + self.mu_b.len())
    }

    fn slices(&self) -> [&Vec<f64>; 4] {
        [&self.mu_w, &self.log_sigma_w, &self.mu_b, &self.log_sigma_b]
    }

    fn slices_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.mu_w,
            &mut self.log_sigma_w,
            &mut self.mu_b,
            &mut self.log_sigma_b,
        ]
    }
}

/// Closed-form `KL(q || N(0,1))` summed over the layer:
/// `log(1/sigma) + (sigma^2 + mu^2 - 1) / 2` per parameter.
pub fn kl_layer(layer: &BayesianLinearLayer) -> f64 {
    let term = |mu: f64, log_sigma: f64| {
        -log_sigma + ((2.0 * log_sigma).exp() + mu * mu - 1.0) / 2.0
    };
    let w: f64 = layer
        .mu_w
        .iter()
        .zip(&layer.log_sigma_w)
        .map(|(&m, &s)| term(m, s))
        .sum();
    let b: f64 = layer
        .mu_b
        .iter()
        .zip(&layer.log_sigma_b)
        .map(|(&m, &s)| term(m, s))
        .sum();
    w + b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianNetwork {
    pub layers: Vec<BayesianLinearLayer>,
}

/// Standard-normal draws, one per weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    pub eps_w: Vec<f64>,
    pub eps_b: Vec<f64>,
}

pub type NetworkNoise = Vec<LayerNoise>;

impl BayesianNetwork {
    /// `hidden_layers` ReLU layers of `width` units and a linear scalar head.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_layers: usize, width: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = input_dim;
        for _ in 0..hidden_layers {
            layers.push(BayesianLinearLayer::init(fan_in, width, rng));
            fan_in = width;
        }
        layers.push(BayesianLinearLayer::init(fan_in, 1, rng));
        BayesianNetwork { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn kl(&self) -> f64 {
        self.layers.iter().map(kl_layer).sum()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(BayesianLinearLayer::n_params).sum()
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NetworkNoise {
        self.layers
            .iter()
            .map(|l| LayerNoise {
                eps_w: (0..l.mu_w.len()).map(|_| StandardNormal.sample(rng)).collect(),
                eps_b: (0..l.mu_b.len()).map(|_| StandardNormal.sample(rng)).collect(),
            })
            .collect()
    }

    pub fn zero_noise(&self) -> NetworkNoise {
        self.layers
            .iter()
            .map(|l| LayerNoise {
                eps_w: vec![0.0; l.mu_w.len()],
                eps_b: vec![0.0; l.mu_b.len()],
            })
            .collect()
    }

    fn check_noise(&self, noise: &NetworkNoise) -> Result<()> {
        if noise.len() != self.layers.len() {
            return Err(Error::Shape {
                expected: self.layers.len(),
                got: noise.len(),
            });
        }
        for (l, n) in self.layers.iter().zip(noise) {
            if n.eps_w.len() != l.mu_w.len() {
                return Err(Error::Shape {
                    expected: l.mu_w.len(),
                    got: n.eps_w.len(),
                });
            }
            if n.eps_b.len() != l.mu_b.len() {
                return Err(Error::Shape {
                    expected: l.mu_b.len(),
                    got: n.eps_b.len(),
                });
            }
        }
        Ok(())
    }

    /// Concrete weights `mu + exp(log_sigma) * eps` per layer.
    fn materialize(&self, noise: &NetworkNoise) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .zip(noise)
            .map(|(l, n)| {
                let w = l
                    .mu_w
                    .iter()
                    .zip(&l.log_sigma_w)
                    .zip(&n.eps_w)
                    .map(|((m, s), e)| m + s.exp() * e)
                    .collect();
                let b = l
                    .mu_b
                    .iter()
                    .zip(&l.log_sigma_b)
                    .zip(&n.eps_b)
                    .map(|((m, s), e)| m + s.exp() * e)
                    .collect();
                (w, b)
            })
            .collect()
    }
}

fn check_inputs(net: &BayesianNetwork, x: &[Vec<f64>]) -> Result<()> {
    let d = net.input_dim();
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

/// Forward pass through concrete weights, keeping per-layer activations.
/// `acts[0]` is the input; `acts[k]` is the output of layer `k - 1`
/// (post-ReLU for hidden layers).
fn forward_concrete(weights: &[(Vec<f64>, Vec<f64>)], dims: &[(usize, usize)], x: &[f64]) -> Vec<Vec<f64>> {
    let last = weights.len() - 1;
    let mut acts = Vec::with_capacity(weights.len() + 1);
    acts.push(x.to_vec());
    for (k, ((w, b), &(in_dim, out_dim))) in weights.iter().zip(dims).enumerate() {
        let a = &acts[k];
        let mut z = b.clone();
        for (o, zo) in z.iter_mut().enumerate().take(out_dim) {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            *zo += row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>();
        }
        if k < last {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

fn dims(net: &BayesianNetwork) -> Vec<(usize, usize)> {
    net.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect()
}

/// One sampled forward pass with the given noise.
pub fn sample_forward(net: &BayesianNetwork, x: &[f64], noise: &NetworkNoise) -> Result<f64> {
    net.check_noise(noise)?;
    check_inputs(net, std::slice::from_ref(&x.to_vec()))?;
    let weights = net.materialize(noise);
    Ok(forward_concrete(&weights, &dims(net), x).last().unwrap()[0])
}

/// Negative ELBO: `0.5 * mean((y - y_hat)^2) + total KL`.
pub fn elbo_loss(net: &BayesianNetwork, x: &[Vec<f64>], y: &[f64], noise: &NetworkNoise) -> Result<f64> {
    Ok(elbo_loss_and_grad(net, x, y, noise)?.0)
}

/// Loss and its gradient with respect to every `mu` and `log_sigma`. The
/// gradient is returned in a network-shaped container.
pub fn elbo_loss_and_grad(
    net: &BayesianNetwork,
    x: &[Vec<f64>],
    y: &[f64],
    noise: &NetworkNoise,
) -> Result<(f64, BayesianNetwork)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Input(format!(
            "need matching non-empty inputs, got {} rows and {} targets",
            x.len(),
            y.len()
        )));
    }
    net.check_noise(noise)?;
    check_inputs(net, x)?;
    let weights = net.materialize(noise);
    let dims = dims(net);
    let n = x.len() as f64;
    let n_layers = net.layers.len();

    let mut grad_w: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.mu_w.len()]).collect();
    let mut grad_b: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.mu_b.len()]).collect();
    let mut sq_err = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let acts = forward_concrete(&weights, &dims, xi);
        let pred = acts[n_layers][0];
        let resid = pred - yi;
        sq_err += resid * resid;
        let mut delta = vec![resid / n];
        for k in (0..n_layers).rev() {
            let (in_dim, out_dim) = dims[k];
            let input = &acts[k];
            for o in 0..out_dim {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad_b[k][o] += d;
                let g = &mut grad_w[k][o * in_dim..(o + 1) * in_dim];
                for (gi, ai) in g.iter_mut().zip(input) {
                    *gi += d * ai;
                }
            }
            if k > 0 {
                let w = &weights[k].0;
                let mut prev = vec![0.0; in_dim];
                for o in 0..out_dim {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wi) in prev.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                        *p += d * wi;
                    }
                }
                // ReLU derivative from the post-activation value
                for (p, a) in prev.iter_mut().zip(&acts[k]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    let loss = 0.5 * sq_err / n + net.kl();

    let mut grad = BayesianNetwork {
        layers: net.layers.iter().map(|l| BayesianLinearLayer::zeros(l.in_dim, l.out_dim)).collect(),
    };
    for (k, (layer, eps)) in net.layers.iter().zip(noise).enumerate() {
        let g = &mut grad.layers[k];
        let chain = |dw: f64, mu: f64, s: f64, e: f64| {
            let sigma = s.exp();
            // d/dmu and d/dlog_sigma of data term + KL
            (dw + mu, dw * e * sigma - 1.0 + sigma * sigma)
        };
        for i in 0..layer.mu_w.len() {
            let (gm, gs) = chain(grad_w[k][i], layer.mu_w[i], layer.log_sigma_w[i], eps.eps_w[i]);
            g.mu_w[i] = gm;
            g.log_sigma_w[i] = gs;
        }
        for i in 0..layer.mu_b.len() {
            let (gm, gs) = chain(grad_b[k][i], layer.mu_b[i], layer.log_sigma_b[i], eps.eps_b[i]);
            g.mu_b[i] = gm;
            g.log_sigma_b[i] = gs;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnnConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for BnnConfig {
    fn default() -> Self {
        BnnConfig {
            hidden_layers: 5,
            width: 64,
            epochs: 1000,
            learning_rate: 1e-3,
            mc_samples: 1000,
            seed: 0,
        }
    }
}

impl BnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 || self.epochs == 0 || self.mc_samples < 2 {
            return Err(Error::Config(
                "bnn: hidden_layers, width and epochs must be positive and mc_samples >= 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("bnn: learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBnn {
    pub network: BayesianNetwork,
    /// Loss at every epoch, before that epoch's update.
    pub loss_trace: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, net: &mut BayesianNetwork, grad: &BayesianNetwork) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut idx = 0;
        for (layer, gl) in net.layers.iter_mut().zip(&grad.layers) {
            for (p, g) in layer.slices_mut().into_iter().zip(gl.slices()) {
                for (pi, gi) in p.iter_mut().zip(g) {
                    let m = &mut self.m[idx];
                    let v = &mut self.v[idx];
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gi;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gi * gi;
                    *pi -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                    idx += 1;
                }
            }
        }
    }
}

pub fn train_bnn(x: &[Vec<f64>], y: &[f64], config: &BnnConfig) -> Result<TrainedBnn> {
    config.validate()?;
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Fit(format!(
            "need matching non-empty inputs, got {} rows and {} targets",
            x.len(),
            y.len()
        )));
    }
    let mut init_rng = rng::stream(config.seed, Purpose::Initialization, 1);
    let mut network = BayesianNetwork::new(x[0].len(), config.hidden_layers, config.width, &mut init_rng);
    check_inputs(&network, x)?;
    let mut noise_rng = rng::stream(config.seed, Purpose::Weights, 0);
    let mut adam = Adam::new(network.n_params(), config.learning_rate);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let noise = network.sample_noise(&mut noise_rng);
        let (loss, grad) = elbo_loss_and_grad(&network, x, y, &noise)?;
        if !loss.is_finite() {
            return Err(Error::Fit(format!(
                "bnn training diverged: loss {loss} at epoch {epoch}"
            )));
        }
        loss_trace.push(loss);
        adam.step(&mut network, &grad);
    }
    Ok(TrainedBnn { network, loss_trace })
}

/// `mc_samples x queries` matrix of sampled outputs; each row shares one
/// weight draw across all queries.
pub fn mc_sample_matrix(
    net: &BayesianNetwork,
    x_query: &[Vec<f64>],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(net, x_query)?;
    let mut rng = rng::stream(seed, Purpose::Prediction, 0);
    let dims = dims(net);
    Ok((0..mc_samples)
        .map(|_| {
            let noise = net.sample_noise(&mut rng);
            let weights = net.materialize(&noise);
            x_query
                .iter()
                .map(|q| forward_concrete(&weights, &dims, q).last().unwrap()[0])
                .collect()
        })
        .collect())
}

/// Empirical mean and population standard deviation over `mc_samples` passes.
pub fn predict_bnn(
    net: &BayesianNetwork,
    x_query: &[Vec<f64>],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    if mc_samples < 2 {
        return Err(Error::Config("mc_samples must be >= 2".into()));
    }
    let samples = mc_sample_matrix(net, x_query, mc_samples, seed)?;
    Ok((0..x_query.len())
        .map(|q| {
            let column: Vec<f64> = samples.iter().map(|row| row[q]).collect();
            Prediction::from_samples(&column)
        })
        .collect())
}
