//! Classical proposers: fit a surrogate on the labeled pool, predict over the
//! unlabeled pool and take the UCB winner. Also the random-walk baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::acquisition::{random_walk_select, ucb_select, Prediction};
use crate::bnn::{predict_bnn, train_bnn, BnnConfig};
use crate::engine::{ProposalContext, ProposalOutcome, Proposer, ProposerKind, Scaler};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, predict_forest, ForestConfig};
use crate::gbt::{fit_gbt, predict_gbt, GbtConfig};
use crate::gpr::{fit_gpr_with, predict_gpr_with, GprOptions};
use crate::rng::{self, Purpose};

/// Per-model hyperparameters. Seeds inside are replaced per iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub forest: ForestConfig,
    pub gbt: GbtConfig,
    pub gpr: GprOptions,
    pub bnn: BnnConfig,
}

impl ModelOptions {
    pub fn validate(&self) -> Result<()> {
        if self.forest.n_trees == 0 {
            return Err(Error::Config("model.forest.n_trees: must be >= 1".into()));
        }
        self.gbt
            .validate()
            .map_err(|e| Error::Config(format!("model.gbt: {e}")))?;
        self.bnn
            .validate()
            .map_err(|e| Error::Config(format!("model.bnn: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    Gpr,
    Rfr,
    Gbt,
    Bnn,
}

impl SurrogateKind {
    pub fn from_proposer(kind: ProposerKind) -> Option<Self> {
        match kind {
            ProposerKind::Gpr => Some(SurrogateKind::Gpr),
            ProposerKind::Rfr => Some(SurrogateKind::Rfr),
            ProposerKind::Gbt => Some(SurrogateKind::Gbt),
            ProposerKind::Bnn => Some(SurrogateKind::Bnn),
            _ => None,
        }
    }
}

/// Standardize on the labeled pool, fit, predict the unlabeled pool, pick by UCB.
#[derive(Debug, Clone)]
pub struct SurrogateProposer {
    pub kind: SurrogateKind,
    pub alpha: f64,
    pub seed: u64,
    pub options: ModelOptions,
}

impl SurrogateProposer {
    pub fn new(kind: SurrogateKind, alpha: f64, seed: u64, options: ModelOptions) -> Self {
        SurrogateProposer {
            kind,
            alpha,
            seed,
            options,
        }
    }

    fn predict(
        &self,
        x: &[Vec<f64>],
        y: &[f64],
        query: &[Vec<f64>],
        iteration: u64,
        diag: &mut BTreeMap<String, f64>,
    ) -> Result<Vec<Prediction>> {
        match self.kind {
            SurrogateKind::Gpr => {
                let seed = rng::derive_seed(self.seed, Purpose::Restarts, iteration);
                let params = fit_gpr_with(x, y, seed, &self.options.gpr)?;
                diag.insert("gpr_c".into(), params.scale_c);
                diag.insert("gpr_l".into(), params.length_l);
                diag.insert("gpr_noise".into(), params.noise_n);
                predict_gpr_with(x, y, &params, query, &self.options.gpr)
            }
            SurrogateKind::Rfr => {
                let cfg = ForestConfig {
                    seed: rng::derive_seed(self.seed, Purpose::Bootstrap, iteration),
                    ..self.options.forest
                };
                predict_forest(&fit_forest(x, y, &cfg)?, query)
            }
            SurrogateKind::Gbt => {
                let cfg = GbtConfig {
                    seed: rng::derive_seed(self.seed, Purpose::Bootstrap, iteration),
                    ..self.options.gbt
                };
                predict_gbt(&fit_gbt(x, y, &cfg)?, query)
            }
            SurrogateKind::Bnn => {
                let cfg = BnnConfig {
                    seed: rng::derive_seed(self.seed, Purpose::Weights, iteration),
                    ..self.options.bnn
                };
                let trained = train_bnn(x, y, &cfg)?;
                if let Some(last) = trained.loss_trace.last() {
                    diag.insert("bnn_final_loss".into(), *last);
                }
                predict_bnn(&trained.network, query, cfg.mc_samples, cfg.seed)
            }
        }
    }
}

impl Proposer for SurrogateProposer {
    fn propose(&mut self, ctx: &ProposalContext<'_>) -> Result<ProposalOutcome> {
        if ctx.unlabeled.is_empty() {
            return Err(Error::Exhausted);
        }
        let ds = ctx.dataset;
        let labeled: Vec<Vec<f64>> = ctx
            .observed
            .iter()
            .map(|&i| ds.candidates[i].features.clone())
            .collect();
        let y: Vec<f64> = ctx.observed.iter().map(|&i| ds.candidates[i].target).collect();
        let pool: Vec<Vec<f64>> = ctx
            .unlabeled
            .iter()
            .map(|&i| ds.candidates[i].features.clone())
            .collect();
        let scaler = Scaler::fit(&labeled)?;
        let x = scaler.transform(&labeled)?;
        let query = scaler.transform(&pool)?;

        let mut diag = BTreeMap::new();
        let preds = self.predict(&x, &y, &query, ctx.iteration as u64, &mut diag)?;
        let idx = ucb_select(&preds, self.alpha, ds.goal)?;
        diag.insert("pred_mean".into(), preds[idx].mean);
        diag.insert("pred_std".into(), preds[idx].std);
        Ok(ProposalOutcome {
            candidate_id: ctx.unlabeled[idx],
            proposal_text: None,
            match_score: None,
            diag,
        })
    }
}

/// Uniform draws without replacement on the run's random-walk stream.
#[derive(Debug, Clone)]
pub struct RandomWalkProposer {
    rng: rand_chacha::ChaCha8Rng,
}

impl RandomWalkProposer {
    pub fn new(seed: u64) -> Self {
        RandomWalkProposer {
            rng: rng::stream(seed, Purpose::RandomWalk, 0),
        }
    }
}

impl Proposer for RandomWalkProposer {
    fn propose(&mut self, ctx: &ProposalContext<'_>) -> Result<ProposalOutcome> {
        random_walk_select(ctx.unlabeled, &mut self.rng).map(ProposalOutcome::id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_pool, SyntheticKind};
    use crate::engine::{run_active_learning, RunConfig};

    fn quick_options() -> ModelOptions {
        ModelOptions {
            forest: ForestConfig { n_trees: 20, ..Default::default() },
            gbt: GbtConfig { n_rounds: 20, ..Default::default() },
            gpr: GprOptions::default(),
            bnn: BnnConfig { hidden_layers: 1, width: 8, epochs: 30, mc_samples: 20, ..Default::default() },
        }
    }

    #[test]
    fn random_walk_exhausts_without_repeats() {
        let ds = synthetic_pool(SyntheticKind::Linear1D, 10, 0).unwrap();
        for seed in 0..20 {
            let mut cfg = RunConfig::new(ProposerKind::RandomWalk, 0.0, seed);
            cfg.max_iterations = Some(10);
            let t = run_active_learning(&ds, &cfg, &mut RandomWalkProposer::new(seed)).unwrap();
            let mut ids = t.candidate_ids();
            assert_eq!(*ids.last().unwrap(), ds.optimum_id());
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), t.steps.len());
            assert_eq!(t.reached_optimum_at, Some(t.steps.len() - 1));
        }
    }

    #[test]
    fn every_surrogate_runs_and_logs() {
        let ds = synthetic_pool(SyntheticKind::Quadratic2D, 25, 1).unwrap();
        for kind in [SurrogateKind::Gpr, SurrogateKind::Rfr, SurrogateKind::Gbt, SurrogateKind::Bnn] {
            let mut cfg = RunConfig::new(ProposerKind::Gpr, 1.0, 40);
            cfg.max_iterations = Some(8);
            let mut p = SurrogateProposer::new(kind, 1.0, 40, quick_options());
            let t = run_active_learning(&ds, &cfg, &mut p).unwrap();
            assert!(t.steps.len() <= 8);
            if t.steps.len() > 1 {
                let diag = t.steps[1].surrogate_diag.as_ref().unwrap();
                assert!(diag.contains_key("pred_mean"));
                if kind == SurrogateKind::Gpr {
                    assert!(diag.contains_key("gpr_c") && diag.contains_key("gpr_l") && diag.contains_key("gpr_noise"));
                }
            }
        }
    }

    #[test]
    fn gpr_runs_are_identical() {
        let ds = synthetic_pool(SyntheticKind::Quadratic2D, 40, 2).unwrap();
        let cfg = RunConfig::new(ProposerKind::Gpr, 2.0, 42);
        let run = || {
            let mut p = SurrogateProposer::new(SurrogateKind::Gpr, 2.0, 42, ModelOptions::default());
            serde_json::to_string(&run_active_learning(&ds, &cfg, &mut p).unwrap()).unwrap()
        };
        assert_eq!(run(), run());
    }
}
