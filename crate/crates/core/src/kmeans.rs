//! Spherical k-means over P-transformed points and flat top-p candidate
//! generation.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::codec::{read_file, Decoder, Encoder};
use crate::error::{MipsError, Result};
use crate::exact::{finish_search, select_top_k, ScoreOrder};
use crate::linalg::{dot, norm, normalize};
use crate::metrics::{CostLedger, SearchResult};
use crate::transform::{McssTransformParams, TransformedDataset};
use crate::vecstore::{rng_from_seed, Dataset, SeededRng};

pub const DEFAULT_MAX_ITERS: usize = 50;

/// `round(√n)`, at least 1.
pub fn default_k(n: usize) -> usize {
    ((n as f64).sqrt().round() as usize).clamp(1, n.max(1))
}

/// Raw output of one spherical k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, unit rows.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iters_run: usize,
    /// `Σ_j x_j·c_{a_j}` after each assignment step.
    pub objective_trace: Vec<f64>,
}

/// Spherical k-means on the rows of `points` (row-major, width `dim`).
///
/// Starts from uniform random assignments, then alternates normalized-mean
/// centroid updates with argmax-cosine assignment until no assignment
/// changes or `max_iters` rounds have run.
pub fn spherical_kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansFit> {
    if dim == 0 || points.is_empty() || points.len() % dim != 0 {
        return Err(MipsError::arg("points must form a nonempty set of rows"));
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return Err(MipsError::arg(format!("k must lie in 1..={n}, got {k}")));
    }
    if max_iters == 0 {
        return Err(MipsError::arg("max_iters must be at least 1"));
    }

    let mut rng = rng_from_seed(seed);
    let mut assignments: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut centroids = vec![0.0; k * dim];
    let mut trace = Vec::new();
    let mut iters_run = 0;

    for it in 1..=max_iters {
        repair_empty_clusters(points, dim, k, &mut assignments);
        update_centroids(points, dim, k, &assignments, &mut centroids, &mut rng);
        let (next, objective) = assign(points, dim, &centroids);
        trace.push(objective);
        iters_run = it;
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
    }

    Ok(KMeansFit {
        k,
        dim,
        centroids,
        assignments,
        iters_run,
        objective_trace: trace,
    })
}

/// Gives every empty cluster one point: the member of the largest cluster
/// whose direction is farthest from that cluster's mean direction.
fn repair_empty_clusters(points: &[f64], dim: usize, k: usize, assignments: &mut [usize]) {
    let mut sizes = vec![0usize; k];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..k)
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .unwrap();
        let mut mean = vec![0.0; dim];
        for (j, x) in points.chunks_exact(dim).enumerate() {
            if assignments[j] == largest {
                for (m, v) in mean.iter_mut().zip(x) {
                    *m += v;
                }
            }
        }
        normalize(&mut mean);
        let mut worst: Option<(usize, f64)> = None;
        for (j, x) in points.chunks_exact(dim).enumerate() {
            if assignments[j] != largest {
                continue;
            }
            let nx = norm(x);
            let cos = if nx > 0.0 { dot(x, &mean) / nx } else { 0.0 };
            if worst.is_none_or(|(_, w)| cos < w) {
                worst = Some((j, cos));
            }
        }
        let (j, _) = worst.expect("largest cluster has members");
        assignments[j] = empty;
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
}

fn update_centroids(
    points: &[f64],
    dim: usize,
    k: usize,
    assignments: &[usize],
    centroids: &mut [f64],
    rng: &mut SeededRng,
) {
    centroids.fill(0.0);
    for (x, &a) in points.chunks_exact(dim).zip(assignments) {
        for (c, v) in centroids[a * dim..(a + 1) * dim].iter_mut().zip(x) {
            *c += v;
        }
    }
    for i in 0..k {
        let c = &mut centroids[i * dim..(i + 1) * dim];
        if normalize(c) == 0.0 {
            // zero sum: any direction scores the same for this cluster
            for v in c.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            normalize(c);
        }
    }
}

/// Argmax assignment (ties to the lower cluster id) and the resulting
/// objective.
fn assign(points: &[f64], dim: usize, centroids: &[f64]) -> (Vec<usize>, f64) {
    let best: Vec<(usize, f64)> = points
        .par_chunks_exact(dim)
        .map(|x| best_centroid(x, centroids, dim))
        .collect();
    let objective = best.iter().map(|b| b.1).sum();
    (best.into_iter().map(|b| b.0).collect(), objective)
}

#[inline]
fn best_centroid(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(x, c);
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

/// Scores `q` against every row of `centroids` and keeps the best `p`
/// (descending, ties by ascending id).
pub(crate) fn top_p_rows(centroids: &[f64], dim: usize, q: &[f64], p: usize) -> Vec<usize> {
    let scored = centroids
        .chunks_exact(dim)
        .map(|c| dot(q, c))
        .enumerate()
        .collect();
    select_top_k(scored, p, ScoreOrder::Descending).ids
}

/// Flat spherical k-means index: unit centroids plus one inverted list per
/// cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    assignments: Vec<usize>,
    lists: Vec<Vec<usize>>,
    params: McssTransformParams,
    iters_run: usize,
    objective_trace: Vec<f64>,
}

impl ClusterIndex {
    pub fn train(tds: &TransformedDataset, k: usize, max_iters: usize, seed: u64) -> Result<Self> {
        let fit = spherical_kmeans(tds.as_slice(), tds.dim(), k, max_iters, seed)?;
        Ok(Self::from_fit(fit, *tds.params()))
    }

    pub(crate) fn from_fit(fit: KMeansFit, params: McssTransformParams) -> Self {
        let lists = inverted_lists(&fit.assignments, fit.k);
        ClusterIndex {
            k: fit.k,
            dim: fit.dim,
            centroids: fit.centroids,
            assignments: fit.assignments,
            lists,
            params,
            iters_run: fit.iters_run,
            objective_trace: fit.objective_trace,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.assignments.len()
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// Sorted member ids of cluster `i`.
    pub fn list(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    pub fn params(&self) -> &McssTransformParams {
        &self.params
    }

    pub fn iters_run(&self) -> usize {
        self.iters_run
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    fn check_probe(&self, q_t: &[f64], p: usize) -> Result<()> {
        if q_t.len() != self.dim {
            return Err(MipsError::Dimension {
                expected: self.dim,
                got: q_t.len(),
            });
        }
        if p == 0 || p > self.k {
            return Err(MipsError::arg(format!(
                "p must lie in 1..={}, got {p}",
                self.k
            )));
        }
        Ok(())
    }

    /// The `p` clusters whose centroids score highest against the
    /// transformed query; charges `k` dot products.
    pub fn top_p_clusters(
        &self,
        q_t: &[f64],
        p: usize,
        ledger: &mut CostLedger,
    ) -> Result<Vec<usize>> {
        self.check_probe(q_t, p)?;
        ledger.add_routing(self.k as f64);
        Ok(top_p_rows(&self.centroids, self.dim, q_t, p))
    }

    /// Union of the inverted lists of the top `p` clusters.
    pub fn candidates(&self, q_t: &[f64], p: usize, ledger: &mut CostLedger) -> Result<Vec<usize>> {
        let clusters = self.top_p_clusters(q_t, p, ledger)?;
        let mut out = Vec::with_capacity(clusters.iter().map(|&c| self.lists[c].len()).sum());
        for c in clusters {
            out.extend_from_slice(&self.lists[c]);
        }
        Ok(out)
    }

    /// Candidates from the top `p` clusters, reranked exactly in the
    /// original space. Cost: `k + |candidates|`.
    pub fn search(&self, ds: &Dataset, q: &[f64], p: usize, k: usize) -> Result<SearchResult> {
        check_query(ds, self.n(), self.dim - self.params.m, q, k)?;
        let q_t = self.params.apply_q(q);
        let mut ledger = CostLedger::default();
        let cands = self.candidates(&q_t, p, &mut ledger)?;
        Ok(finish_search(ds, q, &cands, k, ledger))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(KMIX_MAGIC, INDEX_VERSION);
        enc.usize(self.k);
        enc.u32(self.dim as u32);
        enc.f64s(&self.centroids);
        enc.ids(&self.assignments);
        encode_params(&mut enc, &self.params);
        enc.usize(self.iters_run);
        enc.usize(self.objective_trace.len());
        enc.f64s(&self.objective_trace);
        enc.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(buf, KMIX_MAGIC, INDEX_VERSION)?;
        let k = dec.usize()?;
        let dim = dec.u32()? as usize;
        let centroids = dec.f64s(k.checked_mul(dim).ok_or_else(overflow)?)?;
        let assignments = dec.ids()?;
        let params = decode_params(&mut dec)?;
        let iters_run = dec.usize()?;
        let len = dec.usize()?;
        let objective_trace = dec.f64s(len)?;
        dec.finish()?;
        if k == 0 || assignments.iter().any(|&a| a >= k) || dim <= params.m {
            return Err(MipsError::Format("inconsistent KMIX index".into()));
        }
        let lists = inverted_lists(&assignments, k);
        Ok(ClusterIndex {
            k,
            dim,
            centroids,
            assignments,
            lists,
            params,
            iters_run,
            objective_trace,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| MipsError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

pub const KMIX_MAGIC: &[u8; 4] = b"KMIX";
pub(crate) const INDEX_VERSION: u8 = 1;

pub(crate) fn overflow() -> MipsError {
    MipsError::Format("size field overflows".into())
}

pub(crate) fn encode_params(enc: &mut Encoder, p: &McssTransformParams) {
    enc.f64(p.u);
    enc.u32(p.m as u32);
    enc.f64(p.scale);
}

pub(crate) fn decode_params(dec: &mut Decoder<'_>) -> Result<McssTransformParams> {
    let u = dec.f64()?;
    let m = dec.u32()? as usize;
    let scale = dec.f64()?;
    McssTransformParams::new(u, m, scale).map_err(|e| MipsError::Format(e.to_string()))
}

pub(crate) fn inverted_lists(assignments: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); k];
    for (j, &a) in assignments.iter().enumerate() {
        lists[a].push(j);
    }
    lists
}

pub(crate) fn check_query(ds: &Dataset, n: usize, d: usize, q: &[f64], k: usize) -> Result<()> {
    if ds.n() != n || ds.d() != d {
        return Err(MipsError::arg(format!(
            "index built for {n}×{d} data, got {}×{}",
            ds.n(),
            ds.d()
        )));
    }
    if q.len() != d {
        return Err(MipsError::Dimension {
            expected: d,
            got: q.len(),
        });
    }
    if k == 0 {
        return Err(MipsError::arg("K must be at least 1"));
    }
    Ok(())
}
