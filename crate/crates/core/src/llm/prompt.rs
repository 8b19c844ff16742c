//! Prompt construction for the two observation formats.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::client::{ChatClient, ChatMessage, RetryPolicy};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const SYSTEM_PROMPT: &str = "You are an expert experimental scientist guiding a closed-loop \
optimization campaign. You propose one experiment at a time.";

const STRICT_SUFFIX: &str = "Your previous answer could not be read. Reply with ONLY the fenced \
block below, one `name: value` line per input parameter, numbers only, nothing else.";

/// Where report-format narratives come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSource {
    #[default]
    Llm,
    OfflineTemplate,
}

fn instruction_block(dataset: &Dataset, strict: bool) -> String {
    let mut s = format!(
        "Propose the single next experiment that is most likely to {} {}. \
         Answer with one fenced block that lists every input parameter as `name: value`, \
         using exactly these names:\n```\n",
        dataset.goal.verb(),
        dataset.target_name
    );
    for name in &dataset.feature_names {
        s.push_str(name);
        s.push_str(": <number>\n");
    }
    s.push_str("```");
    if strict {
        s.push('\n');
        s.push_str(STRICT_SUFFIX);
    }
    s
}

fn assemble(dataset: &Dataset, observation_lines: &[String], strict: bool) -> String {
    let mut s = String::new();
    if !dataset.context.trim().is_empty() {
        s.push_str(dataset.context.trim());
        s.push_str("\n\n");
    }
    s.push_str(&format!(
        "Objective: {} {}.\nInput parameters: {}.\n\nObserved experiments so far:\n",
        dataset.goal.verb(),
        dataset.target_name,
        dataset.feature_names.join(", ")
    ));
    for line in observation_lines {
        s.push_str("- ");
        s.push_str(line);
        s.push('\n');
    }
    s.push('\n');
    s.push_str(&instruction_block(dataset, strict));
    s
}

fn outcome(dataset: &Dataset, id: usize) -> String {
    format!("{}={}", dataset.target_name, dataset.candidates[id].target)
}

/// Observations rendered as `name=value` pairs plus the target, one per
/// line, in observation order.
pub fn render_parameter_prompt(dataset: &Dataset, observed: &[usize]) -> String {
    render_parameter_prompt_with(dataset, observed, false)
}

pub fn render_parameter_prompt_with(dataset: &Dataset, observed: &[usize], strict: bool) -> String {
    let lines: Vec<String> = observed
        .iter()
        .map(|&id| format!("{} -> {}", dataset.parameter_string(id), outcome(dataset, id)))
        .collect();
    assemble(dataset, &lines, strict)
}

/// Deterministic one-sentence report over the feature names.
pub fn template_report(dataset: &Dataset, id: usize) -> String {
    let parts: Vec<String> = dataset
        .feature_names
        .iter()
        .zip(&dataset.candidates[id].features)
        .map(|(name, v)| format!("{name} set to {v}"))
        .collect();
    format!("The experiment was carried out with {}.", parts.join(", "))
}

fn report_request(dataset: &Dataset, id: usize) -> Vec<ChatMessage> {
    let mut user = String::new();
    if !dataset.context.trim().is_empty() {
        user.push_str(dataset.context.trim());
        user.push_str("\n\n");
    }
    user.push_str(&format!(
        "Write a short experimental report (two or three sentences) describing an experiment \
         run with the following conditions: {}. Describe the conditions only; do not state or \
         guess the measured {}.",
        dataset.parameter_string(id),
        dataset.target_name
    ));
    vec![ChatMessage::system(SYSTEM_PROMPT), ChatMessage::user(user)]
}

/// Per-run cache of generated reports, keyed by candidate id.
#[derive(Debug, Clone, Default)]
pub struct ReportCache {
    reports: HashMap<usize, String>,
}

impl ReportCache {
    pub fn get(&self, id: usize) -> Option<&str> {
        self.reports.get(&id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }
}

/// Report-format prompt: each observation becomes a narrative produced once
/// per candidate (by the client or the offline template) and then cached.
pub fn render_report_prompt(
    dataset: &Dataset,
    observed: &[usize],
    client: &mut dyn ChatClient,
    cache: &mut ReportCache,
    source: ReportSource,
    retry: &RetryPolicy,
    strict: bool,
) -> Result<String> {
    let mut lines = Vec::with_capacity(observed.len());
    for &id in observed {
        if cache.get(id).is_none() {
            let report = match source {
                ReportSource::OfflineTemplate => template_report(dataset, id),
                ReportSource::Llm => {
                    let messages = report_request(dataset, id);
                    retry
                        .run(|| client.send(&messages, 0.0))
                        .map_err(|e| Error::Proposer(format!("report generation for candidate {id}: {e}")))?
                        .trim()
                        .to_owned()
                }
            };
            cache.reports.insert(id, report);
        }
        lines.push(format!(
            "Report: {} -> {}",
            cache.get(id).expect("cached"),
            outcome(dataset, id)
        ));
    }
    Ok(assemble(dataset, &lines, strict))
}
