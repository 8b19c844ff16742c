//! LLM-driven proposer: prompt, ask, parse, match to the pool.

pub mod client;
pub mod matcher;
pub mod parse;
pub mod prompt;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use client::{
    request_digest, ChatClient, ChatMessage, ConstantClient, Fixture, HttpChatClient, HttpReranker,
    RateLimiter, RecordingClient, Reranker, RetryPolicy, ScriptedClient, LLM_API_KEY_ENV,
    RERANK_API_KEY_ENV,
};
pub use matcher::{match_to_pool, offline_nearest, MatcherBackend};
pub use parse::{parse_proposal, ParsedProposal};
pub use prompt::{
    render_parameter_prompt, render_report_prompt, template_report, ReportCache, ReportSource,
};

use crate::acquisition::random_walk_select;
use crate::dataset::Dataset;
use crate::engine::{PromptFormat, ProposalContext, ProposalOutcome, Proposer, RunConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

fn llm_key() -> String {
    LLM_API_KEY_ENV.to_owned()
}

fn rerank_key() -> String {
    RERANK_API_KEY_ENV.to_owned()
}

/// Which chat client a run talks to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientSpec {
    /// Fixture file of recorded responses.
    Replay { path: PathBuf },
    Constant { text: String },
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "llm_key")]
        api_key_env: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatcherSpec {
    #[default]
    OfflineNearest,
    Rerank {
        endpoint: String,
        model: String,
        #[serde(default = "rerank_key")]
        api_key_env: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub client: Option<ClientSpec>,
    pub matcher: MatcherSpec,
    pub report_source: ReportSource,
    pub retry: RetryPolicy,
    /// Shared request budget across concurrent runs.
    pub requests_per_minute: Option<u32>,
}

impl LlmSettings {
    pub fn build_client(&self) -> Result<Box<dyn ChatClient>> {
        let limiter = self.requests_per_minute.map(RateLimiter::global);
        Ok(match &self.client {
            None => return Err(Error::Config("llm.client: required for the llm proposer".into())),
            Some(ClientSpec::Replay { path }) => Box::new(ScriptedClient::from_jsonl(path)?),
            Some(ClientSpec::Constant { text }) => Box::new(ConstantClient::new(text.clone())),
            Some(ClientSpec::Http { endpoint, model, api_key_env }) => {
                let mut c = HttpChatClient::new(endpoint.clone(), model.clone(), api_key_env)?;
                if let Some(l) = limiter {
                    c = c.with_limiter(l);
                }
                Box::new(c)
            }
        })
    }

    pub fn build_matcher(&self) -> Result<MatcherBackend> {
        Ok(match &self.matcher {
            MatcherSpec::OfflineNearest => MatcherBackend::OfflineNearest,
            MatcherSpec::Rerank { endpoint, model, api_key_env } => {
                let mut r = HttpReranker::new(endpoint.clone(), model.clone(), api_key_env)?;
                if let Some(rpm) = self.requests_per_minute {
                    r = r.with_limiter(RateLimiter::global(rpm));
                }
                MatcherBackend::RerankApi(Box::new(r))
            }
        })
    }
}

/// One chat call at temperature 0, with transport retries.
pub fn propose_next(prompt: &str, client: &mut dyn ChatClient, retry: &RetryPolicy) -> Result<String> {
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let messages = [ChatMessage::system(prompt::SYSTEM_PROMPT), ChatMessage::user(prompt)];
    retry
        .run(|| client.send(&messages, 0.0))
        .map_err(|e| Error::Proposer(format!("chat request failed: {e}")))
}

pub struct LlmProposer {
    client: Box<dyn ChatClient>,
    matcher: MatcherBackend,
    format: PromptFormat,
    report_source: ReportSource,
    retry: RetryPolicy,
    cache: ReportCache,
    fallback: ChaCha8Rng,
}

impl LlmProposer {
    pub fn new(
        client: Box<dyn ChatClient>,
        matcher: MatcherBackend,
        format: PromptFormat,
        seed: u64,
        repeat_index: u32,
    ) -> Self {
        LlmProposer {
            client,
            matcher,
            format,
            report_source: ReportSource::default(),
            retry: RetryPolicy::default(),
            cache: ReportCache::default(),
            fallback: rng::stream(seed, Purpose::Fallback, repeat_index as u64),
        }
    }

    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let mut p = LlmProposer::new(
            config.llm.build_client()?,
            config.llm.build_matcher()?,
            config.prompt_format,
            config.seed,
            config.repeat_index,
        );
        p.report_source = config.llm.report_source;
        p.retry = config.llm.retry;
        Ok(p)
    }

    pub fn with_report_source(mut self, source: ReportSource) -> Self {
        self.report_source = source;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn prompt(&mut self, dataset: &Dataset, observed: &[usize], strict: bool) -> Result<String> {
        match self.format {
            PromptFormat::Parameter => Ok(prompt::render_parameter_prompt_with(dataset, observed, strict)),
            PromptFormat::Report => render_report_prompt(
                dataset,
                observed,
                self.client.as_mut(),
                &mut self.cache,
                self.report_source,
                &self.retry,
                strict,
            ),
        }
    }
}

impl Proposer for LlmProposer {
    fn propose(&mut self, ctx: &ProposalContext<'_>) -> Result<ProposalOutcome> {
        if ctx.unlabeled.is_empty() {
            return Err(Error::Exhausted);
        }
        let ds = ctx.dataset;
        let mut diag = BTreeMap::new();
        let mut last_text = String::new();
        let mut parsed = None;
        for strict in [false, true] {
            let prompt = self.prompt(ds, ctx.observed, strict)?;
            let text = propose_next(&prompt, self.client.as_mut(), &self.retry)?;
            match parse_proposal(&text, ds, ctx.observed) {
                Ok(p) => {
                    parsed = Some(p);
                    last_text = text;
                    break;
                }
                Err(Error::Proposal(msg)) => {
                    log::warn!("iteration {}: unreadable proposal ({msg})", ctx.iteration);
                    diag.insert("reprompt".into(), 1.0);
                    last_text = text;
                }
                Err(e) => return Err(e),
            }
        }
        let Some(parsed) = parsed else {
            let id = random_walk_select(ctx.unlabeled, &mut self.fallback)?;
            log::warn!("iteration {}: falling back to random candidate {id}", ctx.iteration);
            diag.insert("fallback".into(), 1.0);
            return Ok(ProposalOutcome {
                candidate_id: id,
                proposal_text: Some(last_text),
                match_score: Some(0.0),
                diag,
            });
        };
        if !parsed.filled.is_empty() {
            diag.insert("filled_features".into(), parsed.filled.len() as f64);
        }
        let (id, score) = match_to_pool(
            &parsed.features,
            &last_text,
            ds,
            ctx.unlabeled,
            &mut self.matcher,
            &self.retry,
        )?;
        Ok(ProposalOutcome {
            candidate_id: id,
            proposal_text: Some(last_text),
            match_score: Some(score),
            diag,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_pool, SyntheticKind};
    use crate::engine::{run_active_learning, ProposerKind};
    use crate::error::ClientError;

    #[test]
    fn propose_next_returns_client_text() {
        let mut c = ConstantClient::new("hello");
        assert_eq!(propose_next("p", &mut c, &RetryPolicy::default()).unwrap(), "hello");
        assert!(propose_next("", &mut c, &RetryPolicy::default()).is_err());
    }

    #[test]
    fn replayer_exhausts_on_third_call() {
        let mut c = ScriptedClient::from_responses(["a", "b"]);
        let retry = RetryPolicy::default();
        propose_next("p", &mut c, &retry).unwrap();
        propose_next("p", &mut c, &retry).unwrap();
        match propose_next("p", &mut c, &retry) {
            Err(Error::Proposer(msg)) => assert!(msg.contains("exhausted"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    struct Flaky(u32);
    impl ChatClient for Flaky {
        fn send(&mut self, _: &[ChatMessage], t: f64) -> std::result::Result<String, ClientError> {
            assert_eq!(t, 0.0);
            if self.0 > 0 {
                self.0 -= 1;
                Err(ClientError::Transport("reset".into()))
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn transport_errors_are_retried_three_times() {
        let retry = RetryPolicy { max_retries: 3, backoff_ms: 0 };
        assert_eq!(propose_next("p", &mut Flaky(3), &retry).unwrap(), "ok");
        assert!(propose_next("p", &mut Flaky(4), &retry).is_err());
    }

    #[test]
    fn unreadable_answers_fall_back_to_random() {
        let ds = synthetic_pool(SyntheticKind::Linear1D, 12, 0).unwrap();
        let mut cfg = RunConfig::new(ProposerKind::Llm, 0.0, 1);
        cfg.max_iterations = Some(3);
        let mut p = LlmProposer::new(
            Box::new(ConstantClient::new("no idea")),
            MatcherBackend::OfflineNearest,
            PromptFormat::Parameter,
            1,
            0,
        );
        let t = run_active_learning(&ds, &cfg, &mut p).unwrap();
        for s in &t.steps[1..] {
            assert_eq!(s.match_score, Some(0.0));
            assert_eq!(s.surrogate_diag.as_ref().unwrap()["fallback"], 1.0);
        }
    }

    #[test]
    fn proposals_never_repeat_observed_ids() {
        let ds = synthetic_pool(SyntheticKind::Linear1D, 15, 0).unwrap();
        let cfg = RunConfig::new(ProposerKind::Llm, 0.0, 9);
        // always asks for the same point; matching must move on each time
        let mut p = LlmProposer::new(
            Box::new(ConstantClient::new("```\nx: 0.1\n```")),
            MatcherBackend::OfflineNearest,
            PromptFormat::Parameter,
            9,
            0,
        );
        let t = run_active_learning(&ds, &cfg, &mut p).unwrap();
        let mut ids = t.candidate_ids();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), t.steps.len());
        assert!(t.reached_optimum_at.is_some());
        assert!(t.steps[1..].iter().all(|s| s.match_score.is_some()));
    }

    #[test]
    fn settings_require_a_client() {
        let cfg = RunConfig::new(ProposerKind::Llm, 0.0, 0);
        assert!(matches!(LlmProposer::from_config(&cfg), Err(Error::Config(_))));
        let json = r#"{"client": {"kind": "constant", "text": "x"}, "matcher": {"kind": "offline_nearest"}}"#;
        let s: LlmSettings = serde_json::from_str(json).unwrap();
        assert_eq!(s.client, Some(ClientSpec::Constant { text: "x".into() }));
    }
}
