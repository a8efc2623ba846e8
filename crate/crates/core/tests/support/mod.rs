//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use mips_core::linalg::dot;
use mips_core::vecstore::rng_from_seed;
use mips_core::{
    ClusterIndex, Dataset, HierIndex, PcaTree, SearchResult, SrpIndex, TransformedDataset,
    WtaCostDim, WtaIndex,
};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Indices of the `p` rows scoring highest against `q`, lower index on ties.
pub fn brute_top(rows: &[&[f64]], q: &[f64], p: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = rows.iter().map(|r| dot(r, q)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().take(p).map(|(i, _)| i).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

fn check(name: &str, r: &SearchResult, expected_cost: f64, n_cands: usize) -> Result<(), String> {
    if !close(r.cost.total(), expected_cost) || r.n_candidates != n_cands {
        return Err(format!(
            "{name}: ledger {} (|C| {}), formula {expected_cost} (|C| {n_cands})",
            r.cost.total(),
            r.n_candidates
        ));
    }
    Ok(())
}

/// Searches every method `searches` times with random queries and compares
/// each ledger with the closed-form cost recomputed from the index contents.
pub fn check_cost_formulas(ds: &Dataset, searches: usize, seed: u64) -> Result<(), String> {
    let d = ds.d();
    let err = |e: mips_core::MipsError| e.to_string();
    let tds = TransformedDataset::fit(ds, 0.83, 3).map_err(err)?;
    let dim = tds.dim();
    let k = 10;
    let mut rng = rng_from_seed(seed);

    let flat = ClusterIndex::train(&tds, 40, 20, seed).map_err(err)?;
    let hier = HierIndex::build(&tds, &[60, 8], 20, seed).map_err(err)?;
    let tree = PcaTree::build(ds, 5).map_err(err)?;
    let srp = SrpIndex::build(&tds, 6, 10, seed).map_err(err)?;
    let wta = WtaIndex::build(&tds, 5, 4, 8, seed).map_err(err)?;
    let wta_orig = wta.clone().with_cost_dim(WtaCostDim::Original);

    for _ in 0..searches {
        let q = gaussian(&mut rng, d);
        let q_t = tds.apply_q(&q).map_err(err)?;
        let p = rng.random_range(1..=6);

        // flat: k + |C|
        let cents: Vec<&[f64]> = (0..flat.k()).map(|c| flat.centroid(c)).collect();
        let size: usize = brute_top(&cents, &q_t, p)
            .iter()
            .map(|&c| flat.list(c).len())
            .sum();
        let r = flat.search(ds, &q, p, k).map_err(err)?;
        check("kmeans", &r, (flat.k() + size) as f64, size)?;

        // hierarchical: Σ|C_l| + |C_L|
        let mut frontier: Vec<usize> = (0..hier.width(0)).collect();
        let mut routing = 0;
        for l in 0..hier.depth() {
            routing += frontier.len();
            let cents: Vec<&[f64]> = frontier.iter().map(|&i| hier.centroid(l, i)).collect();
            let kept = brute_top(&cents, &q_t, p);
            frontier = kept
                .iter()
                .flat_map(|&j| hier.children(l, frontier[j]).to_vec())
                .collect();
        }
        let r = hier.search(ds, &q, p, k).map_err(err)?;
        check(
            "hier-kmeans",
            &r,
            (routing + frontier.len()) as f64,
            frontier.len(),
        )?;

        // PCA-Tree: depth + |leaf|
        let mut aug = q.clone();
        aug.push(0.0);
        let centered: Vec<f64> = aug.iter().zip(tree.mean()).map(|(a, m)| a - m).collect();
        let mut node = 0;
        for dir in tree.directions() {
            node = if dot(dir, &centered) <= tree.threshold(node) {
                2 * node + 1
            } else {
                2 * node + 2
            };
        }
        let leaf = tree.leaves()[node + 1 - (1 << tree.depth())].len();
        let r = tree.search(ds, &q, k).map_err(err)?;
        check("pca-tree", &r, (tree.depth() + leaf) as f64, leaf)?;

        // SRP: tables·bits + |C|
        let h = srp.hasher();
        let mut c = BTreeSet::new();
        for t in 0..h.n_tables() {
            if let Some(b) = srp.table(t).get(&h.code(t, &q_t)) {
                c.extend(b.iter().copied());
            }
        }
        let r = srp.search(ds, &q, k).map_err(err)?;
        check(
            "srp",
            &r,
            (h.n_tables() * h.p_bits() + c.len()) as f64,
            c.len(),
        )?;

        // WTA: tables·perms·prefix_k / dim + |C|
        let h = wta.hasher();
        let mut c = BTreeSet::new();
        for t in 0..h.n_tables() {
            if let Some(b) = wta.table(t).get(&h.code(t, &q_t)) {
                c.extend(b.iter().copied());
            }
        }
        let units = (h.n_tables() * h.p_perms() * h.prefix_k()) as f64;
        let r = wta.search(ds, &q, k).map_err(err)?;
        check("wta", &r, units / dim as f64 + c.len() as f64, c.len())?;
        let r = wta_orig.search(ds, &q, k).map_err(err)?;
        check(
            "wta (original d)",
            &r,
            units / d as f64 + c.len() as f64,
            c.len(),
        )?;
    }
    Ok(())
}
