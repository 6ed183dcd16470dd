use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::relevance::{is_relevant, one_hot_genres, precision_at_k, RelevanceConfig};
use super::tfidf::TfidfIndex;
use crate::corpus::BookRecord;
use crate::docvec::sentence_docvec;
use crate::embedstore::SentenceEmbeddingSet;
use crate::error::{Error, Result};
use crate::retrieval::{EmbeddingIndex, RetrievalMode, Scored};
use crate::scalar::Scalar;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 25];

/// Anything that ranks the other books of a fixed collection for a query.
pub trait Ranker: Sync {
    fn ids(&self) -> &[String];
    fn rank(&self, query_id: &str, k: usize) -> Result<Vec<Scored>>;
}

pub struct IndexRanker<'a, T> {
    pub index: &'a EmbeddingIndex<T>,
    pub mode: RetrievalMode,
}

impl<T: Scalar> Ranker for IndexRanker<'_, T> {
    fn ids(&self) -> &[String] {
        self.index.ids()
    }

    fn rank(&self, query_id: &str, k: usize) -> Result<Vec<Scored>> {
        self.index.retrieve(self.mode, query_id, k)
    }
}

impl Ranker for TfidfIndex {
    fn ids(&self) -> &[String] {
        TfidfIndex::ids(self)
    }

    fn rank(&self, query_id: &str, k: usize) -> Result<Vec<Scored>> {
        self.top_k(query_id, k)
    }
}

/// Uniformly random ordering of the other books, seeded per query.
pub struct RandomRanker {
    ids: Vec<String>,
    positions: HashMap<String, usize>,
    seed: u64,
}

impl RandomRanker {
    pub fn new(ids: Vec<String>, seed: u64) -> Self {
        let positions = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        RandomRanker { ids, positions, seed }
    }
}

impl Ranker for RandomRanker {
    fn ids(&self) -> &[String] {
        &self.ids
    }

    fn rank(&self, query_id: &str, k: usize) -> Result<Vec<Scored>> {
        let q = *self
            .positions
            .get(query_id)
            .ok_or_else(|| Error::NotFound(format!("book {query_id} is not in the index")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(q as u64);
        let mut others: Vec<usize> = (0..self.ids.len()).filter(|&i| i != q).collect();
        others.shuffle(&mut rng);
        Ok(others
            .into_iter()
            .take(k)
            .map(|i| Scored {
                book_id: self.ids[i].clone(),
                score: 0.0,
            })
            .collect())
    }
}

/// The sentence-mean baseline: one mean sentence vector per book.
pub fn baseline_sentence_mean<T: Scalar>(sets: &[SentenceEmbeddingSet<T>]) -> Result<EmbeddingIndex<T>> {
    let rows = sets
        .iter()
        .map(|s| Ok((s.book_id.clone(), sentence_docvec(s)?)))
        .collect::<Result<_>>()?;
    EmbeddingIndex::from_rows(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub books: usize,
    pub queries: usize,
    pub genres: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub name: String,
    /// Mean precision per cutoff.
    pub precision: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub query_id: String,
    pub model: String,
    pub k: usize,
    pub precision: f64,
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: CorpusSummary,
    pub models: Vec<ModelScores>,
    pub details: Vec<DetailRow>,
}

impl EvalReport {
    pub fn precision(&self, model: &str, k: usize) -> Option<f64> {
        self.models.iter().find(|m| m.name == model)?.precision.get(&k).copied()
    }

    /// Model rows by `P@k` columns, four decimals.
    pub fn table(&self) -> String {
        let ks: Vec<usize> = self.models.first().map(|m| m.precision.keys().copied().collect()).unwrap_or_default();
        let width = self.models.iter().map(|m| m.name.len()).max().unwrap_or(0).max(5) + 2;
        let mut out = format!("{:<width$}", "model");
        for k in &ks {
            let _ = write!(out, "{:>8}", format!("P@{k}"));
        }
        out.push('\n');
        for m in &self.models {
            let _ = write!(out, "{:<width$}", m.name);
            for k in &ks {
                let _ = write!(out, "{:>8.4}", m.precision[k]);
            }
            out.push('\n');
        }
        out
    }

    /// One JSON object per detail row.
    pub fn details_jsonl(&self) -> String {
        self.details
            .iter()
            .map(|d| serde_json::to_string(d).expect("detail rows serialize") + "\n")
            .collect()
    }
}

/// Averages `P@k` over every book with at least one genre, for each model.
/// A query whose own vector is zero under some model gets an empty result
/// list from that model.
pub fn run_benchmark(
    books: &[BookRecord],
    models: &[(&str, &dyn Ranker)],
    cfg: &RelevanceConfig,
    ks: &[usize],
) -> Result<EvalReport> {
    cfg.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("cutoffs {ks:?} must be nonempty and positive")));
    }
    let (first_name, first) = models
        .first()
        .ok_or_else(|| Error::Contract("no models to evaluate".into()))?;
    let universe: BTreeSet<&String> = first.ids().iter().collect();
    for (name, m) in &models[1..] {
        if m.ids().iter().collect::<BTreeSet<_>>() != universe {
            return Err(Error::Contract(format!(
                "model {name} covers different books than {first_name}"
            )));
        }
    }
    let genres: HashMap<&str, &BTreeSet<String>> = books.iter().map(|b| (b.book_id.as_str(), &b.genres)).collect();
    for id in &universe {
        let g = genres
            .get(id.as_str())
            .ok_or_else(|| Error::Contract(format!("indexed book {id} is missing from the corpus")))?;
        one_hot_genres(g, &cfg.vocabulary)?;
    }
    let max_k = *ks.iter().max().unwrap();
    if universe.len() < max_k + 1 {
        return Err(Error::Contract(format!(
            "{} books cannot support precision at {max_k}",
            universe.len()
        )));
    }
    let queries: Vec<&str> = books
        .iter()
        .map(|b| b.book_id.as_str())
        .filter(|id| universe.contains(&id.to_string()) && !genres[id].is_empty())
        .collect();

    let per_query: Vec<Vec<DetailRow>> = queries
        .par_iter()
        .map(|&q| {
            let mut rows = Vec::with_capacity(models.len() * ks.len());
            for (name, m) in models {
                let ranked = match m.rank(q, max_k) {
                    Err(Error::UndefinedSimilarity(_)) => Vec::new(),
                    other => other?,
                };
                let labels = ranked
                    .iter()
                    .map(|s| is_relevant(genres[q], genres[s.book_id.as_str()], cfg))
                    .collect::<Result<Vec<bool>>>()?;
                for &k in ks {
                    rows.push(DetailRow {
                        query_id: q.to_string(),
                        model: name.to_string(),
                        k,
                        precision: precision_at_k(&labels, k)?,
                        retrieved: ranked.iter().take(k).map(|s| s.book_id.clone()).collect(),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let details: Vec<DetailRow> = per_query.into_iter().flatten().collect();

    let scores = models
        .iter()
        .map(|(name, _)| {
            let precision = ks
                .iter()
                .map(|&k| {
                    let vals: Vec<f64> = details
                        .iter()
                        .filter(|d| d.model == *name && d.k == k)
                        .map(|d| d.precision)
                        .collect();
                    let mean = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
                    (k, mean)
                })
                .collect();
            ModelScores {
                name: name.to_string(),
                precision,
            }
        })
        .collect();
    Ok(EvalReport {
        summary: CorpusSummary {
            books: universe.len(),
            queries: queries.len(),
            genres: cfg.vocabulary.len(),
        },
        models: scores,
        details,
    })
}

/// Expected `P@k` of a uniformly random ranking (any `k < n`): for each
/// query, the relevant fraction of the other books, averaged over queries.
pub fn expected_random_precision(genres: &[&BTreeSet<String>], cfg: &RelevanceConfig) -> Result<f64> {
    let n = genres.len();
    if n < 2 {
        return Err(Error::Contract("need at least two books".into()));
    }
    let mut total = 0.0;
    let mut queries = 0usize;
    for (i, q) in genres.iter().enumerate() {
        if q.is_empty() {
            continue;
        }
        let mut relevant = 0usize;
        for (j, c) in genres.iter().enumerate() {
            if i != j && is_relevant(q, c, cfg)? {
                relevant += 1;
            }
        }
        total += relevant as f64 / (n - 1) as f64;
        queries += 1;
    }
    Ok(if queries == 0 { 0.0 } else { total / queries as f64 })
}

/// Closed form of [`expected_random_precision`] when every book carries
/// exactly one genre and group `g` has `sizes[g]` books:
/// `Σ s(s - 1) / (n(n - 1))`.
pub fn group_random_expectation(sizes: &[usize]) -> f64 {
    let n: usize = sizes.iter().sum();
    let pairs: usize = sizes.iter().map(|&s| s * s.saturating_sub(1)).sum();
    pairs as f64 / (n * (n - 1)) as f64
}
