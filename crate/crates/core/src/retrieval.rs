//! Cosine ranking over document embeddings: an exact scan and a
//! k-means-restricted variant.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codebook::{kmeans_fit, Codebook, KMeansParams};
use crate::docvec::DocumentEmbedding;
use crate::embedstore::SentenceEmbeddingSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub book_id: String,
    pub score: f64,
}

/// `dot(a, b) / sqrt(‖a‖²‖b‖²)` accumulated in `f64`, clamped to [-1, 1].
/// Taking one square root of the product makes `cosine(x, x)` exactly 1.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {}- and {}-vectors", a.len(), b.len())));
    }
    let (na, nb) = (sq_norm64(a), sq_norm64(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("cosine with a zero vector".into()));
    }
    Ok(scaled_cosine(a, b, na, nb))
}

fn sq_norm64<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum()
}

fn scaled_cosine<T: Scalar>(a: &[T], b: &[T], sq_a: f64, sq_b: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    (dot / (sq_a * sq_b).sqrt()).clamp(-1.0, 1.0)
}

/// Descending score, then ascending id.
fn rank_order(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.book_id.cmp(&b.book_id))
}

/// Keeps the best `k` under [`rank_order`], sorted.
pub(crate) fn best_k(mut scored: Vec<Scored>, k: usize) -> Vec<Scored> {
    if scored.len() > k && k > 0 {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    if k == 0 {
        scored.clear();
    }
    scored.sort_by(rank_order);
    scored
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMode {
    #[default]
    Cosine,
    Cluster,
}

/// k-means partition of an index's rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex<T> {
    /// Fitted over L2-normalized rows.
    pub codebook: Codebook<T>,
    /// Row positions per cluster, ascending.
    pub members: Vec<Vec<usize>>,
    /// Cluster of every row.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex<T> {
    ids: Vec<String>,
    dim: usize,
    matrix: Vec<T>,
    /// Squared L2 norms.
    sq_norms: Vec<f64>,
    positions: HashMap<String, usize>,
    clusters: Option<ClusterIndex<T>>,
}

impl<T: Scalar> EmbeddingIndex<T> {
    pub fn new(ids: Vec<String>, dim: usize, matrix: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("index dimension must be positive".into()));
        }
        if matrix.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} values for {} rows of dim {dim}",
                matrix.len(),
                ids.len()
            )));
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate book id {id} in index")));
            }
        }
        let sq_norms = matrix.chunks(dim).map(sq_norm64).collect();
        Ok(EmbeddingIndex {
            ids,
            dim,
            matrix,
            sq_norms,
            positions,
            clusters: None,
        })
    }

    pub fn from_rows(rows: Vec<(String, Vec<T>)>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.1.len());
        if let Some((id, r)) = rows.iter().find(|r| r.1.len() != dim) {
            return Err(Error::Shape(format!("row {id} has dim {}, expected {dim}", r.len())));
        }
        let (ids, vals): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        Self::new(ids, dim, vals.into_iter().flatten().collect())
    }

    pub fn from_documents(docs: &[DocumentEmbedding<T>]) -> Result<Self> {
        Self::from_rows(docs.iter().map(|d| (d.book_id.clone(), d.vector().to_vec())).collect())
    }

    /// Rows from one-vector records, as stored for document embeddings.
    pub fn from_sets(sets: &[SentenceEmbeddingSet<T>]) -> Result<Self> {
        let rows = sets
            .iter()
            .map(|s| {
                if s.len() != 1 {
                    return Err(Error::Format(format!(
                        "record {} holds {} vectors, a document needs exactly 1",
                        s.book_id,
                        s.len()
                    )));
                }
                Ok((s.book_id.clone(), s.vector(0).to_vec()))
            })
            .collect::<Result<_>>()?;
        Self::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.sq_norms[i].sqrt()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn clusters(&self) -> Option<&ClusterIndex<T>> {
        self.clusters.as_ref()
    }

    fn query_position(&self, id: &str) -> Result<usize> {
        let q = self.position(id).ok_or_else(|| Error::NotFound(format!("book {id} is not in the index")))?;
        if self.sq_norms[q] == 0.0 {
            return Err(Error::UndefinedSimilarity(format!("book {id} has a zero embedding")));
        }
        Ok(q)
    }

    /// Scores the given rows against row `q`; zero rows are skipped since
    /// their cosine is undefined.
    fn score_rows(&self, q: usize, rows: impl Iterator<Item = usize>) -> Vec<Scored> {
        let qv = self.row(q);
        rows.filter(|&i| i != q && self.sq_norms[i] > 0.0)
            .map(|i| Scored {
                book_id: self.ids[i].clone(),
                score: scaled_cosine(qv, self.row(i), self.sq_norms[q], self.sq_norms[i]),
            })
            .collect()
    }

    /// The `k` most similar other books by exact scan.
    pub fn top_k(&self, query_id: &str, k: usize) -> Result<Vec<Scored>> {
        let q = self.query_position(query_id)?;
        Ok(best_k(self.score_rows(q, 0..self.len()), k))
    }

    /// Partitions rows with k-means over their unit-normalized copies.
    pub fn build_cluster_index(&mut self, params: KMeansParams) -> Result<()> {
        if params.k == 0 || params.k > self.len() {
            return Err(Error::Config(format!(
                "{} clusters requested for {} documents",
                params.k,
                self.len()
            )));
        }
        let unit: Vec<Vec<T>> = (0..self.len())
            .map(|i| {
                let n = self.norm(i);
                self.row(i)
                    .iter()
                    .map(|&x| if n > 0.0 { T::lit(x.as_f64() / n) } else { x })
                    .collect()
            })
            .collect();
        let refs: Vec<&[T]> = unit.iter().map(|v| v.as_slice()).collect();
        let fit = kmeans_fit(&refs, params).map_err(|e| match e {
            Error::Infeasible(m) => Error::Config(m),
            other => other,
        })?;
        let mut members = vec![Vec::new(); params.k];
        for (i, &c) in fit.labels.iter().enumerate() {
            members[c].push(i);
        }
        self.clusters = Some(ClusterIndex {
            codebook: fit.codebook,
            members,
            labels: fit.labels,
        });
        Ok(())
    }

    /// Ranks the query's cluster; when it holds fewer than `k` other books,
    /// whole clusters are added in order of centroid distance from the
    /// query's centroid (ties by cluster index) until `k` candidates exist.
    pub fn cluster_retrieve(&self, query_id: &str, k: usize) -> Result<Vec<Scored>> {
        let ci = self
            .clusters
            .as_ref()
            .ok_or_else(|| Error::Contract("cluster index has not been built".into()))?;
        let q = self.query_position(query_id)?;
        let home = ci.labels[q];
        let cb = &ci.codebook;
        let mut order: Vec<(f64, usize)> = (0..cb.k)
            .filter(|&c| c != home)
            .map(|c| {
                let d = crate::scalar::squared_distance(cb.centroid(home), cb.centroid(c)).as_f64();
                (d, c)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut pool = self.score_rows(q, ci.members[home].iter().copied());
        for (_, c) in order {
            if pool.len() >= k {
                break;
            }
            pool.extend(self.score_rows(q, ci.members[c].iter().copied()));
        }
        Ok(best_k(pool, k))
    }

    pub fn retrieve(&self, mode: RetrievalMode, query_id: &str, k: usize) -> Result<Vec<Scored>> {
        match mode {
            RetrievalMode::Cosine => self.top_k(query_id, k),
            RetrievalMode::Cluster => self.cluster_retrieve(query_id, k),
        }
    }
}

/// `x` with 9 significant digits.
pub fn format_score(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let decimals = (8 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.decimals$}")
}

/// `rank TAB book_id TAB score [TAB title]` lines, rank starting at 1.
pub fn format_results(results: &[Scored], titles: Option<&BTreeMap<String, String>>) -> String {
    let mut out = String::new();
    for (r, s) in results.iter().enumerate() {
        let _ = write!(out, "{}\t{}\t{}", r + 1, s.book_id, format_score(s.score));
        if let Some(t) = titles {
            let _ = write!(out, "\t{}", t.get(&s.book_id).map_or("", |t| t.as_str()));
        }
        out.push('\n');
    }
    out
}
