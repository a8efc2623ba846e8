mod support;

use mips_core::exact::exact_search;
use mips_core::gen_synthetic;
use mips_core::vecstore::rng_from_seed;

#[test]
fn ledgers_match_closed_forms_on_clustered_data() {
    let ds = gen_synthetic(3000, 20, 30, 0.5, 1).unwrap();
    support::check_cost_formulas(&ds, 100, 7).unwrap();
}

#[test]
fn ledgers_match_closed_forms_on_isotropic_data() {
    let mut rng = rng_from_seed(4);
    let ds = mips_core::Dataset::from_f64(9, support::gaussian(&mut rng, 2000 * 9)).unwrap();
    support::check_cost_formulas(&ds, 100, 11).unwrap();
}

#[test]
fn exact_search_costs_n() {
    let ds = gen_synthetic(500, 4, 5, 0.3, 2).unwrap();
    let r = exact_search(&ds, ds.row(3), 7).unwrap();
    assert_eq!(r.cost.total(), 500.0);
    assert_eq!(r.n_candidates, 500);
}
