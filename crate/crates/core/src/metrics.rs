//! Cost accounting in dot-product equivalents, precision@K and speedup.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{MipsError, Result};
use crate::exact::TopK;

/// Work done by one search, in units of one full dot product.
///
/// The total is always the sum of the three parts; parts only grow.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostLedger {
    /// Centroid scoring or tree projections.
    pub routing: f64,
    /// Hash evaluations (fractional for WTA).
    pub hashing: f64,
    /// Exact scoring of candidates.
    pub rerank: f64,
}

impl CostLedger {
    pub fn total(&self) -> f64 {
        self.routing + self.hashing + self.rerank
    }

    pub fn add_routing(&mut self, dots: f64) {
        debug_assert!(dots >= 0.0);
        self.routing += dots;
    }

    pub fn add_hashing(&mut self, dots: f64) {
        debug_assert!(dots >= 0.0);
        self.hashing += dots;
    }

    pub fn add_rerank(&mut self, dots: f64) {
        debug_assert!(dots >= 0.0);
        self.rerank += dots;
    }

    pub fn merge(&mut self, other: &CostLedger) {
        self.routing += other.routing;
        self.hashing += other.hashing;
        self.rerank += other.rerank;
    }
}

/// Outcome of one approximate search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub topk: TopK,
    pub n_candidates: usize,
    /// Set when the method produced no candidates at all.
    pub empty_candidates: bool,
    pub cost: CostLedger,
}

/// `|retrieved ∩ truth| / k`.
pub fn precision_at_k(truth: &TopK, retrieved: &TopK, k: usize) -> Result<f64> {
    precision_of_ids(&truth.ids, &retrieved.ids, k)
}

pub fn precision_of_ids(truth: &[usize], retrieved: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(MipsError::arg("K must be at least 1"));
    }
    if truth.len() > k || retrieved.len() > k {
        return Err(MipsError::arg(format!(
            "lists of length {} and {} exceed K = {k}",
            truth.len(),
            retrieved.len()
        )));
    }
    let truth: HashSet<usize> = truth.iter().copied().collect();
    let hits = retrieved
        .iter()
        .copied()
        .collect::<HashSet<_>>()
        .intersection(&truth)
        .count();
    Ok(hits as f64 / k as f64)
}

/// `exact_cost / approx_cost`.
pub fn speedup(exact_cost: f64, approx_cost: f64) -> Result<f64> {
    if approx_cost.is_nan() || approx_cost <= 0.0 {
        return Err(MipsError::arg(format!(
            "approximate cost must be positive, got {approx_cost}"
        )));
    }
    Ok(exact_cost / approx_cost)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionReport {
    pub per_query: Vec<f64>,
    pub mean_precision: f64,
    pub mean_cost: f64,
    /// `n / mean_cost`: speedup of the average workload, not the average of
    /// per-query speedups.
    pub speedup: f64,
}

/// Averages per-query `(precision, cost)` pairs against an exact cost of `n`.
pub fn aggregate(per_query: &[(f64, f64)], n: usize) -> Result<PrecisionReport> {
    if per_query.is_empty() {
        return Err(MipsError::arg("no queries to aggregate"));
    }
    let m = per_query.len() as f64;
    let mean_precision = per_query.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_cost = per_query.iter().map(|p| p.1).sum::<f64>() / m;
    Ok(PrecisionReport {
        per_query: per_query.iter().map(|p| p.0).collect(),
        mean_precision,
        mean_cost,
        speedup: speedup(n as f64, mean_cost)?,
    })
}

/// One line of experiment output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: String,
    /// `key=value` pairs joined by `;`.
    pub hyperparams: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub mean_precision: f64,
    pub mean_cost: f64,
    pub speedup: f64,
    pub n_queries: usize,
    pub seed: u64,
}

pub fn write_csv<W: Write>(rows: &[CsvRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn precision_examples() {
        let ids: Vec<usize> = (0..10).collect();
        assert_eq!(precision_of_ids(&ids, &ids, 10).unwrap(), 1.0);
        assert_eq!(precision_of_ids(&[0, 1], &[2, 3], 2).unwrap(), 0.0);
        assert_eq!(
            precision_of_ids(&[1, 2, 3, 4], &[3, 4, 5, 6], 4).unwrap(),
            0.5
        );
        assert!(matches!(
            precision_of_ids(&[], &[], 0),
            Err(MipsError::Argument(_))
        ));
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup(10_000.0, 500.0).unwrap(), 20.0);
        assert_eq!(speedup(7.0, 7.0).unwrap(), 1.0);
        assert_eq!(speedup(10.0, 20.0).unwrap(), 0.5);
        assert!(matches!(speedup(10.0, 0.0), Err(MipsError::Argument(_))));
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(&[(0.7, 40.0)], 100).unwrap();
        assert_eq!((r.mean_precision, r.mean_cost, r.speedup), (0.7, 40.0, 2.5));
        let r = aggregate(&[(1.0, 100.0), (0.0, 300.0)], 1000).unwrap();
        assert_eq!((r.mean_precision, r.mean_cost), (0.5, 200.0));
        let r = aggregate(&[(1.0, 50.0), (1.0, 50.0)], 50).unwrap();
        assert_eq!(r.speedup, 1.0);
        assert!(aggregate(&[], 5).is_err());
    }

    #[test]
    fn ledger_total() {
        let mut l = CostLedger::default();
        l.add_routing(3.0);
        l.add_hashing(0.25);
        l.add_rerank(10.0);
        assert_eq!(l.total(), 13.25);
        let mut m = CostLedger::default();
        m.merge(&l);
        assert_eq!(m, l);
    }

    #[test]
    fn csv_header() {
        let row = CsvRow {
            method: "kmeans".into(),
            hyperparams: "k=10;p=2".into(),
            k: 10,
            mean_precision: 0.5,
            mean_cost: 120.0,
            speedup: 8.25,
            n_queries: 3,
            seed: 1,
        };
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&row), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "method,hyperparams,K,mean_precision,mean_cost,speedup,n_queries,seed"
        );
        assert_eq!(read_csv(buf.as_slice()).unwrap(), vec![row]);
    }

    proptest! {
        #[test]
        fn precision_symmetric_and_order_free(
            a in proptest::collection::hash_set(0usize..40, 0..=8),
            b in proptest::collection::hash_set(0usize..40, 0..=8),
        ) {
            let a: Vec<usize> = a.into_iter().collect();
            let b: Vec<usize> = b.into_iter().collect();
            let p = precision_of_ids(&a, &b, 8).unwrap();
            prop_assert_eq!(p, precision_of_ids(&b, &a, 8).unwrap());
            let mut rev = b.clone();
            rev.reverse();
            prop_assert_eq!(p, precision_of_ids(&a, &rev, 8).unwrap());
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }
}
