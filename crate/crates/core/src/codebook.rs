//! K-means cluster codebook over sentence embeddings.
//!
//! Lloyd iterations from a k-means++ start, squared Euclidean distance,
//! deterministic for a given seed. The assignment step runs in parallel; each
//! point is assigned independently and every reduction happens sequentially
//! in point order, so results match a single-threaded run bit for bit.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedstore::{check_magic, Reader};
use crate::error::{Error, Result};
use crate::scalar::{all_finite, squared_distance, Scalar};

pub const MAGIC: &[u8; 4] = b"SCBK";
pub const VERSION: u32 = 1;

pub const DEFAULT_K: usize = 200;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Learned centroids; the sentence-token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub k: usize,
    pub dim: usize,
    /// `k * dim` values, row-major.
    pub centroids: Vec<T>,
    pub inertia: T,
    pub seed: i64,
    pub iterations_run: usize,
}

/// Fitted codebook plus the trace needed to audit the fit.
#[derive(Debug, Clone)]
pub struct KMeansFit<T> {
    pub codebook: Codebook<T>,
    /// Cluster id of every training vector under the final centroids.
    pub labels: Vec<usize>,
    /// Objective after each assignment step, ending with the objective of the
    /// final centroids.
    pub inertia_trace: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: i64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            k: DEFAULT_K,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

impl<T: Scalar> Codebook<T> {
    pub fn from_centroids(centroids: Vec<Vec<T>>) -> Result<Self> {
        let dim = centroids.first().map(Vec::len).unwrap_or(0);
        if centroids.is_empty() || dim == 0 || centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::Shape("centroids must be a nonempty uniform matrix".into()));
        }
        Ok(Codebook {
            k: centroids.len(),
            dim,
            centroids: centroids.concat(),
            inertia: T::zero(),
            seed: 0,
            iterations_run: 0,
        })
    }

    pub fn centroid(&self, i: usize) -> &[T] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid, ties to the lowest index.
    pub fn assign(&self, vector: &[T]) -> Result<usize> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector has dim {}, codebook dim {}",
                vector.len(),
                self.dim
            )));
        }
        Ok(nearest(&self.centroids, self.dim, vector).0)
    }

    pub fn inertia<'a>(&self, vectors: impl IntoIterator<Item = &'a [T]>) -> Result<T> {
        let mut total = T::zero();
        for v in vectors {
            if v.len() != self.dim {
                return Err(Error::Shape(format!(
                    "vector has dim {}, codebook dim {}",
                    v.len(),
                    self.dim
                )));
            }
            total += nearest(&self.centroids, self.dim, v).1;
        }
        Ok(total)
    }

    pub fn cast<U: Scalar>(&self) -> Codebook<U> {
        Codebook {
            k: self.k,
            dim: self.dim,
            centroids: self.centroids.iter().map(|x| U::lit(x.as_f64())).collect(),
            inertia: U::lit(self.inertia.as_f64()),
            seed: self.seed,
            iterations_run: self.iterations_run,
        }
    }
}

fn nearest<T: Scalar>(centroids: &[T], dim: usize, v: &[T]) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn count_distinct<T: Scalar>(vectors: &[&[T]]) -> usize {
    let set: HashSet<Vec<u64>> = vectors
        .iter()
        .map(|v| v.iter().map(|x| (x.as_f64() + 0.0).to_bits()).collect())
        .collect();
    set.len()
}

/// Fits a codebook with Lloyd's algorithm.
///
/// Stops when the largest centroid move is below `tol` or after `max_iter`
/// iterations. A cluster left empty takes the point with the largest current
/// squared distance to its centroid.
pub fn kmeans_fit<T: Scalar>(vectors: &[&[T]], params: KMeansParams) -> Result<KMeansFit<T>> {
    let KMeansParams { k, max_iter, tol, seed } = params;
    let first = vectors
        .first()
        .ok_or_else(|| Error::Infeasible("no vectors to cluster".into()))?;
    let dim = first.len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("vectors must share one positive dimension".into()));
    }
    if vectors.iter().any(|v| !all_finite(v)) {
        return Err(Error::Shape("vectors contain non-finite values".into()));
    }
    if k == 0 || max_iter == 0 {
        return Err(Error::Config("k and max_iter must be positive".into()));
    }
    let distinct = count_distinct(vectors);
    if k > distinct {
        return Err(Error::Infeasible(format!(
            "k = {k} exceeds the {distinct} distinct vectors"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut centroids = kmeans_plus_plus(vectors, k, &mut rng);
    let mut labels = vec![0usize; vectors.len()];
    let mut dists = vec![T::zero(); vectors.len()];
    let mut trace = Vec::new();
    let tol = T::lit(tol);
    let mut iterations = 0;

    loop {
        let total = assign_all(vectors, &centroids, dim, &mut labels, &mut dists);
        trace.push(total);
        if iterations == max_iter {
            break;
        }
        iterations += 1;

        let (mut updated, counts) = cluster_means(vectors, &labels, k, dim, &centroids);
        repair_empty(&mut updated, &counts, vectors, &dists, dim);
        let shift = centroids
            .chunks_exact(dim)
            .zip(updated.chunks_exact(dim))
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(T::zero(), T::max);
        centroids = updated;
        if shift < tol {
            let total = assign_all(vectors, &centroids, dim, &mut labels, &mut dists);
            trace.push(total);
            break;
        }
    }

    let inertia = *trace.last().unwrap();
    Ok(KMeansFit {
        codebook: Codebook {
            k,
            dim,
            centroids,
            inertia,
            seed,
            iterations_run: iterations,
        },
        labels,
        inertia_trace: trace,
    })
}

fn kmeans_plus_plus<T: Scalar>(vectors: &[&[T]], k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let n = vectors.len();
    let mut centroids = Vec::with_capacity(k * vectors[0].len());
    centroids.extend_from_slice(vectors[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = vectors
        .iter()
        .map(|v| squared_distance(v, &centroids[..]).as_f64())
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        // Distinct-point count >= k guarantees some point has positive weight.
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
        }
        let pick = pick.expect("a point with positive distance exists");
        let chosen = vectors[pick];
        centroids.extend_from_slice(chosen);
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(squared_distance(v, chosen).as_f64());
        }
    }
    centroids
}

fn assign_all<T: Scalar>(
    vectors: &[&[T]],
    centroids: &[T],
    dim: usize,
    labels: &mut [usize],
    dists: &mut [T],
) -> T {
    vectors
        .par_iter()
        .zip(labels.par_iter_mut().zip(dists.par_iter_mut()))
        .for_each(|(v, (label, dist))| {
            let (i, d) = nearest(centroids, dim, v);
            *label = i;
            *dist = d;
        });
    dists.iter().copied().sum()
}

fn cluster_means<T: Scalar>(vectors: &[&[T]], labels: &[usize], k: usize, dim: usize, previous: &[T]) -> (Vec<T>, Vec<usize>) {
    let mut sums = vec![T::zero(); k * dim];
    let mut counts = vec![0usize; k];
    for (v, &c) in vectors.iter().zip(labels) {
        counts[c] += 1;
        for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v.iter()) {
            *s += *x;
        }
    }
    for c in 0..k {
        let row = &mut sums[c * dim..(c + 1) * dim];
        if counts[c] == 0 {
            row.copy_from_slice(&previous[c * dim..(c + 1) * dim]);
        } else {
            let n = T::from_usize_lossy(counts[c]);
            row.iter_mut().for_each(|s| *s /= n);
        }
    }
    (sums, counts)
}

/// Moves each empty cluster's centroid onto the point farthest from its
/// current centroid, taking distinct points in decreasing distance order.
fn repair_empty<T: Scalar>(centroids: &mut [T], counts: &[usize], vectors: &[&[T]], dists: &[T], dim: usize) {
    let empty: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    // ties to the lowest point index
    order.sort_by(|&a, &b| dists[b].partial_cmp(&dists[a]).unwrap().then(a.cmp(&b)));
    for (c, &p) in empty.iter().zip(order.iter()) {
        centroids[c * dim..(c + 1) * dim].copy_from_slice(vectors[p]);
    }
}

/// Within-cluster sum of squared deviations from each cluster mean.
pub fn within_cluster_sse<T: Scalar>(vectors: &[&[T]], labels: &[usize], k: usize) -> T {
    let dim = vectors.first().map(|v| v.len()).unwrap_or(0);
    let mut means = vec![T::zero(); k * dim];
    let mut counts = vec![0usize; k];
    for (v, &c) in vectors.iter().zip(labels) {
        counts[c] += 1;
        for (m, x) in means[c * dim..(c + 1) * dim].iter_mut().zip(v.iter()) {
            *m += *x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = T::from_usize_lossy(counts[c]);
            means[c * dim..(c + 1) * dim].iter_mut().for_each(|m| *m /= n);
        }
    }
    vectors
        .iter()
        .zip(labels)
        .map(|(v, &c)| squared_distance(v, &means[c * dim..(c + 1) * dim]))
        .sum()
}

/// `Σ_i |S_i| · Var S_i`, with each cluster's variance taken as the mean
/// squared norm minus the squared norm of the mean.
pub fn size_weighted_variance<T: Scalar>(vectors: &[&[T]], labels: &[usize], k: usize) -> T {
    let mut total = T::zero();
    for c in 0..k {
        let members: Vec<&[T]> = vectors
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(v, _)| *v)
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = T::from_usize_lossy(members.len());
        let dim = members[0].len();
        let mean_sq_norm = members
            .iter()
            .map(|v| v.iter().map(|x| *x * *x).sum::<T>())
            .sum::<T>()
            / n;
        let mut sq_norm_of_mean = T::zero();
        for j in 0..dim {
            let m = members.iter().map(|v| v[j]).sum::<T>() / n;
            sq_norm_of_mean += m * m;
        }
        total += n * (mean_sq_norm - sq_norm_of_mean);
    }
    total
}

pub fn encode_codebook<T: Scalar>(cb: &Codebook<T>) -> Result<Vec<u8>> {
    let to_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(40 + 4 * cb.centroids.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(cb.k, "k")?.to_le_bytes());
    out.extend_from_slice(&to_u32(cb.dim, "dim")?.to_le_bytes());
    out.extend_from_slice(&cb.seed.to_le_bytes());
    out.extend_from_slice(&to_u32(cb.iterations_run, "iterations")?.to_le_bytes());
    out.extend_from_slice(&cb.inertia.as_f64().to_le_bytes());
    for c in &cb.centroids {
        out.extend_from_slice(&c.as_f32().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_codebook<T: Scalar>(bytes: &[u8]) -> Result<Codebook<T>> {
    let mut r = Reader::new(bytes);
    check_magic(&mut r, MAGIC, VERSION)?;
    let k = r.u32("k")? as usize;
    let dim = r.u32("dim")? as usize;
    let seed = r.i64("seed")?;
    let iterations_run = r.u32("iterations")? as usize;
    let inertia = r.f64("inertia")?;
    if k == 0 || dim == 0 {
        return Err(Error::Format(format!("invalid codebook shape {k}x{dim}")));
    }
    if !(inertia.is_finite() && inertia >= 0.0) {
        return Err(Error::Format(format!("invalid inertia {inertia}")));
    }
    let centroids = r.f32s(k * dim, "centroids")?;
    r.finish()?;
    Ok(Codebook {
        k,
        dim,
        centroids,
        inertia: T::lit(inertia),
        seed,
        iterations_run,
    })
}

pub fn write_codebook<T: Scalar>(cb: &Codebook<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_codebook(cb)?).map_err(|e| Error::io(path, e))
}

pub fn read_codebook<T: Scalar>(path: impl AsRef<Path>) -> Result<Codebook<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_codebook(&bytes)
}
