use mips_core::exact::{exact_mcss, exact_mips, exact_nns, rerank};
use mips_core::linalg::{dot, sq_norm};
use mips_core::metrics::precision_of_ids;
use mips_core::transform::McssTransformParams;
use mips_core::vecstore::rng_from_seed;
use mips_core::{
    corrupt_queries, exact_mips_batch, fit_apply_nns, gen_synthetic, ClusterIndex, CostLedger,
    Dataset, HierIndex, QueryBatch, SrpIndex, TransformedDataset, WtaHasher,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    Dataset::from_f64(d, gaussian(&mut rng, n * d)).unwrap()
}

fn dataset_strategy() -> impl Strategy<Value = (Dataset, Vec<f64>)> {
    (1usize..40, 1usize..8).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-10.0f64..10.0, n * d),
            prop::collection::vec(-10.0f64..10.0, d),
        )
            .prop_map(move |(data, q)| (Dataset::from_f64(d, data).unwrap(), q))
    })
}

#[test]
fn ranking_fidelity_of_the_cosine_reduction() {
    let (instances, n, d) = (1000, 500, 16);
    let mut agree = 0;
    let mut disagreements = Vec::new();
    for i in 0..instances {
        let seed = 10_000 + i as u64;
        let ds = random_dataset(n, d, seed);
        let q = gaussian(&mut rng_from_seed(!seed), d);
        let tds = TransformedDataset::fit(&ds, 0.83, 3).unwrap();
        let transformed = Dataset::from_f64(tds.dim(), tds.as_slice().to_vec()).unwrap();
        let by_cosine = exact_mcss(&transformed, &tds.apply_q(&q).unwrap(), 1).unwrap();
        let by_dot = exact_mips(&ds, &q, 1).unwrap();
        if by_cosine.ids == by_dot.ids {
            agree += 1;
        } else {
            disagreements.push((i, by_dot.ids[0], by_cosine.ids[0]));
        }
    }
    let rate = agree as f64 / instances as f64;
    eprintln!(
        "top-1 agreement {rate:.3}; first disagreements {:?}",
        &disagreements[..disagreements.len().min(10)]
    );
    assert!(rate >= 0.95, "agreement {rate}");
}

#[test]
fn noise_changes_some_rankings() {
    let ds = gen_synthetic(3000, 32, 30, 0.5, 2).unwrap();
    let q = ds.sample_queries(200, 3).unwrap();
    let noisy = corrupt_queries(&q, 0.4, 4).unwrap();
    let a = exact_mips_batch(&ds, &q, 10).unwrap();
    let b = exact_mips_batch(&ds, &noisy, 10).unwrap();
    let changed = a
        .results
        .iter()
        .zip(&b.results)
        .filter(|(x, y)| x.ids != y.ids)
        .count();
    assert!(changed > 0);
}

#[test]
fn kmeans_objective_never_decreases() {
    for seed in 0..20u64 {
        let ds = random_dataset(400, 6, seed);
        let tds = TransformedDataset::fit(&ds, 0.83, 3).unwrap();
        let idx = ClusterIndex::train(&tds, 12, 50, seed).unwrap();
        let trace = idx.objective_trace();
        assert!(!trace.is_empty() && idx.iters_run() <= 50);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs(), "seed {seed}: {trace:?}");
        }
    }
}

#[test]
fn hierarchical_leaves_partition_the_data() {
    let ds = random_dataset(700, 5, 1);
    let tds = TransformedDataset::fit(&ds, 0.83, 3).unwrap();
    let h = HierIndex::build(&tds, &[60, 12, 3], 30, 5).unwrap();
    // everything reachable from the coarsest level with an unbounded frontier
    let q_t = tds.apply_q(&[1.0; 5]).unwrap();
    let mut ids = h
        .walk(&q_t, h.max_width(), &mut CostLedger::default())
        .unwrap();
    ids.sort_unstable();
    assert_eq!(ids, (0..700).collect::<Vec<_>>());
}

#[test]
fn srp_candidates_grow_with_tables() {
    let ds = random_dataset(2000, 10, 8);
    let tds = TransformedDataset::fit(&ds, 0.83, 3).unwrap();
    let indexes: Vec<SrpIndex> = [1, 2, 4, 8]
        .iter()
        .map(|&t| SrpIndex::build(&tds, t, 8, 77).unwrap())
        .collect();
    let mut rng = rng_from_seed(3);
    for _ in 0..50 {
        let q_t = tds.apply_q(&gaussian(&mut rng, 10)).unwrap();
        let sets: Vec<Vec<usize>> = indexes
            .iter()
            .map(|i| i.candidates(&q_t, &mut CostLedger::default()).unwrap())
            .collect();
        for w in sets.windows(2) {
            assert!(w[0].iter().all(|id| w[1].binary_search(id).is_ok()));
        }
    }
}

#[test]
fn kmeans_precision_nondecreasing_in_p() {
    let ds = gen_synthetic(3000, 16, 25, 0.6, 4).unwrap();
    let (ds, q) = ds.split_queries(100).unwrap();
    let tds = TransformedDataset::fit(&ds, 0.83, 3).unwrap();
    let idx = ClusterIndex::train(&tds, 40, 50, 6).unwrap();
    let truth = exact_mips_batch(&ds, &q, 10).unwrap();
    for j in 0..q.n() {
        let mut last = 0.0;
        for p in [1, 2, 4, 8, 16, 40] {
            let r = idx.search(&ds, q.row(j), p, 10).unwrap();
            let prec = precision_of_ids(&truth.results[j].ids, &r.topk.ids, 10).unwrap();
            assert!(prec >= last, "query {j} p {p}");
            last = prec;
        }
        assert_eq!(last, 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn norm_identity(xs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..30), m in 1usize..6) {
        let d = 4;
        let ds = Dataset::from_f64(d, xs.concat()).unwrap();
        prop_assume!(ds.rows().any(|r| sq_norm(r) > 0.0));
        let p = McssTransformParams::fit(&ds, 0.83, m).unwrap();
        for x in ds.rows() {
            let px = p.apply_p(x);
            let sx2 = p.scale * p.scale * sq_norm(x);
            let expected = m as f64 / 4.0 + sx2.powi(1 << m);
            prop_assert!((sq_norm(&px) - expected).abs() <= 1e-9 * expected);
            prop_assert!((dot(&p.apply_q(&[1.0, -1.0, 0.5, 2.0]), &px)
                - p.scale * dot(&[1.0, -1.0, 0.5, 2.0], x)).abs() <= 1e-9 * (1.0 + sq_norm(x)));
        }
    }

    #[test]
    fn nns_augmentation_matches_mips((ds, q) in dataset_strategy()) {
        prop_assume!(ds.rows().any(|r| sq_norm(r) > 0.0));
        let (params, aug) = fit_apply_nns(&ds).unwrap();
        let qa = params.augment_query(&q);
        // the reduction is exact up to rounding, so compare best scores
        let by_dist = exact_nns(&aug, &qa, 1).unwrap().ids[0];
        let best = exact_mips(&ds, &q, 1).unwrap().scores[0];
        let got = dot(ds.row(by_dist), &q);
        prop_assert!((best - got).abs() <= 1e-9 * (1.0 + best.abs()));
    }

    #[test]
    fn equal_norm_searches_agree(dirs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..30), r in 0.5f64..4.0, q in prop::collection::vec(-1.0f64..1.0, 3), k in 1usize..5) {
        let rows: Vec<Vec<f64>> = dirs
            .into_iter()
            .filter(|v| sq_norm(v) > 1e-6)
            .map(|mut v| {
                let s = r / sq_norm(&v).sqrt();
                v.iter_mut().for_each(|c| *c *= s);
                v
            })
            .collect();
        prop_assume!(rows.len() >= k && sq_norm(&q) > 1e-6);
        let ds = Dataset::from_rows(&rows).unwrap();
        let a = exact_mips(&ds, &q, k).unwrap();
        let b = exact_mcss(&ds, &q, k).unwrap();
        let c = exact_nns(&ds, &q, k).unwrap();
        // equal up to rounding: compare the achieved inner products
        for ids in [&b.ids, &c.ids] {
            for (x, y) in a.ids.iter().zip(ids.iter()) {
                let (sx, sy) = (dot(ds.row(*x), &q), dot(ds.row(*y), &q));
                prop_assert!((sx - sy).abs() <= 1e-9 * r * r);
            }
        }
    }

    #[test]
    fn positive_query_scaling_keeps_ranking(seed in any::<u64>(), c in 0.01f64..100.0, k in 1usize..10) {
        let ds = random_dataset(50, 6, seed);
        let q = gaussian(&mut rng_from_seed(seed ^ 1), 6);
        let scaled: Vec<f64> = q.iter().map(|v| v * c).collect();
        let a = exact_mips(&ds, &q, k).unwrap();
        let b = exact_mips(&ds, &scaled, k).unwrap();
        prop_assert_eq!(a.ids, b.ids);
    }

    #[test]
    fn rerank_nesting(seed in any::<u64>(), k in 1usize..10, cut in 0.0f64..1.0) {
        let n = 60;
        let ds = random_dataset(n, 5, seed);
        let q = gaussian(&mut rng_from_seed(seed ^ 2), 5);
        let truth = exact_mips(&ds, &q, k).unwrap();
        let mut rng = rng_from_seed(seed ^ 3);
        let mut small = Vec::new();
        let mut large = Vec::new();
        for i in 0..n {
            let u: f64 = rng.random();
            if u < cut * 0.5 {
                small.push(i);
            }
            if u < cut {
                large.push(i);
            }
        }
        let hits = |cands: &[usize]| {
            let got = rerank(&ds, &q, cands, k);
            got.ids.iter().filter(|i| truth.ids.contains(i)).count()
        };
        prop_assert!(hits(&small) <= hits(&large));
    }

    #[test]
    fn wta_codes_ignore_positive_scale(seed in any::<u64>(), c in 0.001f64..1000.0) {
        let h = WtaHasher::new(12, 3, 4, 4, seed).unwrap();
        let x = gaussian(&mut rng_from_seed(seed), 12);
        let y: Vec<f64> = x.iter().map(|v| v * c).collect();
        for t in 0..3 {
            prop_assert_eq!(h.code(t, &x), h.code(t, &y));
        }
    }

    #[test]
    fn dataset_bytes_round_trip((ds, _) in dataset_strategy()) {
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        let q = QueryBatch::from_bytes(&ds.to_bytes()).unwrap();
        prop_assert_eq!(q.as_slice(), ds.as_slice());
    }
}
