//! Reading the next experiment out of a free-text answer.

use std::collections::BTreeMap;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedProposal {
    /// Values in dataset feature order.
    pub features: Vec<f64>,
    pub by_name: BTreeMap<String, f64>,
    /// Features missing from the answer and filled with the observed mean.
    pub filled: Vec<String>,
}

/// Contents of the last ``` fenced block, if any.
fn last_fenced_block(text: &str) -> Option<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let Some(close) = after.find("```") else {
            break;
        };
        let mut body = &after[..close];
        // drop an info string such as ```text
        if let Some(nl) = body.find('\n') {
            if !body[..nl].contains(':') && !body[..nl].contains('=') {
                body = &body[nl + 1..];
            }
        }
        blocks.push(body);
        rest = &after[close + 3..];
    }
    blocks.pop()
}

/// Leading numeric token of `s`, ignoring trailing units.
fn leading_number(s: &str) -> Option<f64> {
    let s = s.trim().trim_matches(|c| c == '`' || c == '"' || c == '\'');
    let end = s
        .char_indices()
        .take_while(|&(_, c)| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'))
        .map(|(i, c)| i + c.len_utf8())
        .last()?;
    // back off until the prefix parses, e.g. "3e" in "3 eV"
    (1..=end).rev().find_map(|k| s[..k].parse::<f64>().ok()).filter(|v| v.is_finite())
}

/// Parses the last fenced `key: value` block. Keys match feature names
/// case-insensitively; unknown keys are ignored. Missing features are filled
/// with the mean of the observed values for that feature.
pub fn parse_proposal(text: &str, dataset: &Dataset, observed: &[usize]) -> Result<ParsedProposal> {
    let block = last_fenced_block(text)
        .ok_or_else(|| Error::Proposal("no fenced block in the answer".into()))?;
    let mut by_name = BTreeMap::new();
    for line in block.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((key, value)) = line.split_once(':').or_else(|| line.split_once('=')) else {
            continue;
        };
        let key = key.trim().trim_matches(|c| c == '`' || c == '"' || c == '*');
        let Some(name) = dataset
            .feature_names
            .iter()
            .find(|n| n.eq_ignore_ascii_case(key))
        else {
            continue;
        };
        if let Some(v) = leading_number(value) {
            by_name.insert(name.clone(), v);
        }
    }
    if by_name.is_empty() {
        return Err(Error::Proposal(
            "fenced block has no parsable feature values".into(),
        ));
    }
    let mut filled = Vec::new();
    let features: Vec<f64> = dataset
        .feature_names
        .iter()
        .enumerate()
        .map(|(j, name)| match by_name.get(name) {
            Some(&v) => v,
            None => {
                let pool: Vec<usize> = if observed.is_empty() {
                    (0..dataset.len()).collect()
                } else {
                    observed.to_vec()
                };
                let mean = pool
                    .iter()
                    .map(|&i| dataset.candidates[i].features[j])
                    .sum::<f64>()
                    / pool.len() as f64;
                log::info!("proposal is missing '{name}'; filled with observed mean {mean}");
                filled.push(name.clone());
                mean
            }
        })
        .collect();
    let by_name = dataset
        .feature_names
        .iter()
        .cloned()
        .zip(features.iter().copied())
        .collect();
    Ok(ParsedProposal {
        features,
        by_name,
        filled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Goal;

    fn ds() -> Dataset {
        Dataset::new(
            "t",
            vec!["a".into(), "b".into()],
            "y",
            Goal::Maximize,
            vec![(vec![0.0, 2.0], 1.0), (vec![1.0, 4.0], 2.0), (vec![5.0, 9.0], 3.0)],
        )
        .unwrap()
    }

    #[test]
    fn parses_fenced_block() {
        let p = parse_proposal("Sure!\n```\na: 1.5\nb: 2.0\n```\n", &ds(), &[0]).unwrap();
        assert_eq!(p.features, vec![1.5, 2.0]);
        assert_eq!(p.by_name["a"], 1.5);
        assert!(p.filled.is_empty());
    }

    #[test]
    fn fills_missing_with_observed_mean() {
        let p = parse_proposal("```\nA: 0.25\n```", &ds(), &[0, 1]).unwrap();
        assert_eq!(p.features, vec![0.25, 3.0]);
        assert_eq!(p.filled, vec!["b".to_string()]);
        assert_eq!(p.by_name["b"], 3.0);
    }

    #[test]
    fn last_block_wins_and_units_are_ignored() {
        let text = "```\na: 9\nb: 9\n```\nActually:\n```yaml\na: 1 wt%\nb = 2e-1 mg\n```";
        let p = parse_proposal(text, &ds(), &[0]).unwrap();
        assert_eq!(p.features, vec![1.0, 0.2]);
    }

    #[test]
    fn prose_only_is_an_error() {
        assert!(matches!(parse_proposal("Try a higher a.", &ds(), &[0]), Err(Error::Proposal(_))));
        assert!(matches!(parse_proposal("```\nc: 1\n```", &ds(), &[0]), Err(Error::Proposal(_))));
    }
}
