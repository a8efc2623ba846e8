//! Linear-scan ground truth for inner-product, cosine and Euclidean search,
//! plus the exact rerank every approximate method finishes with.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;

use crate::codec::{read_file, Decoder, Encoder};
use crate::error::{MipsError, Result};
use crate::linalg::{dot, norm, sq_dist};
use crate::metrics::{CostLedger, SearchResult};
use crate::vecstore::{Dataset, QueryBatch};

/// Whether larger or smaller scores rank first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreOrder {
    #[default]
    Descending,
    /// Distances: smallest first.
    Ascending,
}

/// Best-first ids with their scores. Ties are broken by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TopK {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub order: ScoreOrder,
}

impl TopK {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The first `k` entries.
    pub fn prefix(&self, k: usize) -> TopK {
        let k = k.min(self.len());
        TopK {
            ids: self.ids[..k].to_vec(),
            scores: self.scores[..k].to_vec(),
            order: self.order,
        }
    }
}

/// Selects the best `k` of `(id, score)` pairs under `order`, breaking ties
/// by ascending id.
pub fn select_top_k(mut scored: Vec<(usize, f64)>, k: usize, order: ScoreOrder) -> TopK {
    let cmp = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
        let by_score = match order {
            ScoreOrder::Descending => b.1.total_cmp(&a.1),
            ScoreOrder::Ascending => a.1.total_cmp(&b.1),
        };
        by_score.then(a.0.cmp(&b.0))
    };
    if k == 0 {
        scored.clear();
    } else if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    let (ids, scores) = scored.into_iter().unzip();
    TopK { ids, scores, order }
}

fn check(ds: &Dataset, q: &[f64], k: usize) -> Result<()> {
    if q.len() != ds.d() {
        return Err(MipsError::Dimension {
            expected: ds.d(),
            got: q.len(),
        });
    }
    if k == 0 || k > ds.n() {
        return Err(MipsError::arg(format!(
            "K must lie in 1..={}, got {k}",
            ds.n()
        )));
    }
    Ok(())
}

/// The `k` rows with largest `q·x_i`.
pub fn exact_mips(ds: &Dataset, q: &[f64], k: usize) -> Result<TopK> {
    check(ds, q, k)?;
    let scored = ds.rows().map(|x| dot(q, x)).enumerate().collect();
    Ok(select_top_k(scored, k, ScoreOrder::Descending))
}

/// The `k` rows with largest `q·x_i / ‖x_i‖`; zero rows never qualify, so
/// fewer than `k` ids come back when there are fewer nonzero rows.
pub fn exact_mcss(ds: &Dataset, q: &[f64], k: usize) -> Result<TopK> {
    check(ds, q, k)?;
    let scored: Vec<(usize, f64)> = ds
        .rows()
        .enumerate()
        .filter_map(|(i, x)| {
            let nx = norm(x);
            (nx > 0.0).then(|| (i, dot(q, x) / nx))
        })
        .collect();
    if scored.is_empty() {
        return Err(MipsError::Degenerate("every data vector is zero".into()));
    }
    Ok(select_top_k(scored, k, ScoreOrder::Descending))
}

/// The `k` rows nearest to `q`; scores are squared distances.
pub fn exact_nns(ds: &Dataset, q: &[f64], k: usize) -> Result<TopK> {
    check(ds, q, k)?;
    let scored = ds.rows().map(|x| sq_dist(q, x)).enumerate().collect();
    Ok(select_top_k(scored, k, ScoreOrder::Ascending))
}

/// Exact K-MIPS restricted to `candidates`. An empty candidate list yields an
/// empty result; fewer than `k` candidates are all returned, ranked.
pub fn rerank(ds: &Dataset, q: &[f64], candidates: &[usize], k: usize) -> TopK {
    let scored = candidates.iter().map(|&i| (i, dot(q, ds.row(i)))).collect();
    select_top_k(scored, k, ScoreOrder::Descending)
}

/// Reranks `candidates` and packages the result with `ledger`, charging one
/// dot product per candidate.
pub(crate) fn finish_search(
    ds: &Dataset,
    q: &[f64],
    candidates: &[usize],
    k: usize,
    mut ledger: CostLedger,
) -> SearchResult {
    ledger.add_rerank(candidates.len() as f64);
    SearchResult {
        topk: rerank(ds, q, candidates, k),
        n_candidates: candidates.len(),
        empty_candidates: candidates.is_empty(),
        cost: ledger,
    }
}

/// Full linear scan as a search method: cost `n`.
pub fn exact_search(ds: &Dataset, q: &[f64], k: usize) -> Result<SearchResult> {
    let topk = exact_mips(ds, q, k)?;
    let mut cost = CostLedger::default();
    cost.add_rerank(ds.n() as f64);
    Ok(SearchResult {
        topk,
        n_candidates: ds.n(),
        empty_candidates: false,
        cost,
    })
}

/// Exact top-`k` for every query, parallel over queries.
pub fn exact_mips_batch(ds: &Dataset, queries: &QueryBatch, k: usize) -> Result<GroundTruth> {
    if queries.d() != ds.d() {
        return Err(MipsError::Dimension {
            expected: ds.d(),
            got: queries.d(),
        });
    }
    let results = (0..queries.n())
        .into_par_iter()
        .map(|j| exact_mips(ds, queries.row(j), k))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth { k, results })
}

pub const GT_MAGIC: &[u8; 4] = b"MGTK";
pub const GT_VERSION: u8 = 1;

/// Cached exact answers: for each query, `k` ids and scores.
///
/// Layout: `MGTK`, version u8, query count u64, k u32, then per query `k`
/// pairs of (id u64, score f64), little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub k: usize,
    pub results: Vec<TopK>,
}

impl GroundTruth {
    pub fn n_queries(&self) -> usize {
        self.results.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(GT_MAGIC, GT_VERSION);
        enc.usize(self.results.len());
        enc.u32(self.k as u32);
        for r in &self.results {
            for (&id, &s) in r.ids.iter().zip(&r.scores) {
                enc.usize(id);
                enc.f64(s);
            }
        }
        enc.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(buf, GT_MAGIC, GT_VERSION)?;
        let n = dec.usize()?;
        let k = dec.u32()? as usize;
        let expected = (n as u64) * (k as u64) * 16;
        if dec.remaining() as u64 != expected {
            return Err(MipsError::Length {
                expected,
                found: dec.remaining() as u64,
            });
        }
        let mut results = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ids = Vec::with_capacity(k);
            let mut scores = Vec::with_capacity(k);
            for _ in 0..k {
                ids.push(dec.usize()?);
                scores.push(dec.f64()?);
            }
            results.push(TopK {
                ids,
                scores,
                order: ScoreOrder::Descending,
            });
        }
        dec.finish()?;
        Ok(GroundTruth { k, results })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| MipsError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}
