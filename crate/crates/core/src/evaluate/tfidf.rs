use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::retrieval::{best_k, Scored};

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sparse L2-normalized TF-IDF rows over a sorted term index.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfMatrix {
    pub terms: Vec<String>,
    pub idf: Vec<f64>,
    /// `(term index, weight)` pairs, ascending term index.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl TfidfMatrix {
    pub fn weight(&self, row: usize, term: &str) -> f64 {
        let Ok(t) = self.terms.binary_search_by(|x| x.as_str().cmp(term)) else {
            return 0.0;
        };
        self.rows[row]
            .binary_search_by_key(&t, |e| e.0)
            .map_or(0.0, |i| self.rows[row][i].1)
    }
}

/// `tf = count / tokens`, `idf = ln((1 + N) / (1 + df)) + 1`, rows scaled to
/// unit length. Documents without tokens get empty rows.
pub fn tfidf_vectorize<S: AsRef<str>>(texts: &[S]) -> Result<TfidfMatrix> {
    if texts.is_empty() {
        return Err(Error::EmptyCorpus("no documents to vectorize".into()));
    }
    let counts: Vec<BTreeMap<String, usize>> = texts
        .iter()
        .map(|t| {
            let mut m = BTreeMap::new();
            for tok in tokenize(t.as_ref()) {
                *m.entry(tok).or_insert(0) += 1;
            }
            m
        })
        .collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &counts {
        for t in m.keys() {
            *df.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    if df.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let n = texts.len() as f64;
    let terms: Vec<String> = df.keys().map(|t| t.to_string()).collect();
    let idf: Vec<f64> = df.values().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
    let index: HashMap<&str, usize> = terms.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let rows = counts
        .iter()
        .map(|m| {
            let len: usize = m.values().sum();
            let mut row: Vec<(usize, f64)> = m
                .iter()
                .map(|(t, &c)| {
                    let i = index[t.as_str()];
                    (i, c as f64 / len as f64 * idf[i])
                })
                .collect();
            let norm = row.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
            row.iter_mut().for_each(|e| e.1 /= norm);
            row
        })
        .collect();
    Ok(TfidfMatrix { terms, idf, rows })
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// Cosine ranking over TF-IDF rows with the same ordering rules as the
/// dense index.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfIndex {
    ids: Vec<String>,
    matrix: TfidfMatrix,
    sq_norms: Vec<f64>,
    positions: HashMap<String, usize>,
}

impl TfidfIndex {
    pub fn build<S: AsRef<str>>(ids: Vec<String>, texts: &[S]) -> Result<Self> {
        if ids.len() != texts.len() {
            return Err(Error::Contract(format!("{} ids for {} texts", ids.len(), texts.len())));
        }
        let matrix = tfidf_vectorize(texts)?;
        let mut positions = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate book id {id} in index")));
            }
        }
        let sq_norms = matrix.rows.iter().map(|r| sparse_dot(r, r)).collect();
        Ok(TfidfIndex {
            ids,
            matrix,
            sq_norms,
            positions,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &TfidfMatrix {
        &self.matrix
    }

    pub fn top_k(&self, query_id: &str, k: usize) -> Result<Vec<Scored>> {
        let q = *self
            .positions
            .get(query_id)
            .ok_or_else(|| Error::NotFound(format!("book {query_id} is not in the index")))?;
        if self.sq_norms[q] == 0.0 {
            return Err(Error::UndefinedSimilarity(format!("book {query_id} has no tokens")));
        }
        let qr = &self.matrix.rows[q];
        let scored = (0..self.ids.len())
            .filter(|&i| i != q && self.sq_norms[i] > 0.0)
            .map(|i| Scored {
                book_id: self.ids[i].clone(),
                score: (sparse_dot(qr, &self.matrix.rows[i]) / (self.sq_norms[q] * self.sq_norms[i]).sqrt())
                    .clamp(-1.0, 1.0),
            })
            .collect();
        Ok(best_k(scored, k))
    }
}
