use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denominator of the genre-overlap ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioRule {
    /// `|q ∩ c| / |q|`
    #[default]
    QueryFraction,
    /// `|q ∩ c| / |q ∪ c|`
    Jaccard,
    /// `|q ∩ c| / min(|q|, |c|)`
    OverlapCoefficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceConfig {
    /// A candidate is relevant when its ratio is strictly greater.
    pub threshold: f64,
    pub vocabulary: Vec<String>,
    pub rule: RatioRule,
}

pub const DEFAULT_THRESHOLD: f64 = 0.4;

impl RelevanceConfig {
    pub fn new(vocabulary: Vec<String>) -> Self {
        RelevanceConfig {
            threshold: DEFAULT_THRESHOLD,
            vocabulary,
            rule: RatioRule::QueryFraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        if self.vocabulary.is_empty() {
            return Err(Error::Config("genre vocabulary is empty".into()));
        }
        let unique: BTreeSet<&String> = self.vocabulary.iter().collect();
        if unique.len() != self.vocabulary.len() {
            return Err(Error::Config("genre vocabulary has duplicates".into()));
        }
        Ok(())
    }
}

/// Bit `i` is set iff `vocabulary[i]` is one of `genres`.
pub fn one_hot_genres(genres: &BTreeSet<String>, vocabulary: &[String]) -> Result<Vec<u8>> {
    if let Some(g) = genres.iter().find(|g| !vocabulary.contains(g)) {
        return Err(Error::Contract(format!("genre {g:?} is not in the vocabulary")));
    }
    Ok(vocabulary.iter().map(|v| genres.contains(v) as u8).collect())
}

pub fn relevance_ratio(query: &BTreeSet<String>, candidate: &BTreeSet<String>, rule: RatioRule) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::Contract("query book has no genres".into()));
    }
    let common = query.intersection(candidate).count();
    let denom = match rule {
        RatioRule::QueryFraction => query.len(),
        RatioRule::Jaccard => query.len() + candidate.len() - common,
        RatioRule::OverlapCoefficient => query.len().min(candidate.len()),
    };
    Ok(if denom == 0 { 0.0 } else { common as f64 / denom as f64 })
}

pub fn is_relevant(query: &BTreeSet<String>, candidate: &BTreeSet<String>, cfg: &RelevanceConfig) -> Result<bool> {
    Ok(relevance_ratio(query, candidate, cfg.rule)? > cfg.threshold)
}

/// Relevant hits among the first `k` labels, divided by `k` even when fewer
/// than `k` results exist.
pub fn precision_at_k(relevant: &[bool], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("precision@k needs k >= 1".into()));
    }
    let hits = relevant.iter().take(k).filter(|&&r| r).count();
    Ok(hits as f64 / k as f64)
}
