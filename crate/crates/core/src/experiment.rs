//! Experiment drivers: hyperparameter sweeps producing precision-vs-speedup
//! rows, the query-noise robustness protocol, and speedup calibration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{MipsError, Result};
use crate::exact::{exact_mips_batch, exact_search, GroundTruth};
use crate::hash::{SrpIndex, WtaCostDim, WtaIndex};
use crate::hier::{self, HierIndex};
use crate::kmeans::{self, ClusterIndex};
use crate::metrics::{aggregate, precision_of_ids, CsvRow, PrecisionReport, SearchResult};
use crate::pca_tree::PcaTree;
use crate::transform::{TransformedDataset, DEFAULT_M, DEFAULT_U};
use crate::vecstore::{corrupt_queries, Dataset, QueryBatch};

pub const DEFAULT_KS: [usize; 3] = [1, 10, 100];
pub const DEFAULT_SIGMAS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
pub const DEFAULT_TARGET_SPEEDUP: f64 = 30.0;
pub const CF_QUERY_COUNT: usize = 60_000;
pub const EMBEDDING_QUERY_COUNT: usize = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodKind {
    Exact,
    KMeans,
    HierKMeans,
    PcaTree,
    Srp,
    Wta,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Exact,
        MethodKind::KMeans,
        MethodKind::HierKMeans,
        MethodKind::PcaTree,
        MethodKind::Srp,
        MethodKind::Wta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Exact => "exact",
            MethodKind::KMeans => "kmeans",
            MethodKind::HierKMeans => "hier-kmeans",
            MethodKind::PcaTree => "pca-tree",
            MethodKind::Srp => "srp",
            MethodKind::Wta => "wta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MipsError::arg(format!("unknown method {s:?}")))
    }
}

/// How queries are provided when none are given explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryProfile {
    /// Separate user vectors; up to 60,000.
    CollaborativeFiltering,
    /// Rows of the database itself; up to 2,000.
    Embedding,
}

impl QueryProfile {
    /// Default query count, scaled down for small datasets.
    pub fn default_count(self, n: usize) -> usize {
        let full = match self {
            QueryProfile::CollaborativeFiltering => CF_QUERY_COUNT,
            QueryProfile::Embedding => EMBEDDING_QUERY_COUNT,
        };
        full.min(n).max(1)
    }
}

/// One fully specified method configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodParams {
    Exact,
    KMeans {
        k: usize,
        p: usize,
    },
    /// `levels` finest first.
    HierKMeans {
        levels: Vec<usize>,
        p: usize,
    },
    PcaTree {
        depth: usize,
    },
    Srp {
        tables: usize,
        bits: usize,
    },
    Wta {
        tables: usize,
        perms: usize,
        prefix_k: usize,
    },
}

impl MethodParams {
    pub fn kind(&self) -> MethodKind {
        match self {
            MethodParams::Exact => MethodKind::Exact,
            MethodParams::KMeans { .. } => MethodKind::KMeans,
            MethodParams::HierKMeans { .. } => MethodKind::HierKMeans,
            MethodParams::PcaTree { .. } => MethodKind::PcaTree,
            MethodParams::Srp { .. } => MethodKind::Srp,
            MethodParams::Wta { .. } => MethodKind::Wta,
        }
    }

    /// Parameters that affect the built index (not search-time `p`).
    fn build_key(&self) -> String {
        match self {
            MethodParams::KMeans { k, .. } => format!("kmeans:{k}"),
            MethodParams::HierKMeans { levels, .. } => format!("hier:{levels:?}"),
            other => format!("{other:?}"),
        }
    }

    /// `key=value;…` with everything needed to rebuild the index and rerun
    /// the search.
    pub fn describe(&self, settings: &BuildSettings) -> String {
        let mut s = String::new();
        let mcss = |s: &mut String| {
            let _ = write!(s, ";u={};m={}", settings.u, settings.m);
        };
        match self {
            MethodParams::Exact => s.push_str("none"),
            MethodParams::KMeans { k, p } => {
                let _ = write!(s, "k={k};p={p};iters={}", settings.max_iters);
                mcss(&mut s);
            }
            MethodParams::HierKMeans { levels, p } => {
                let levels: Vec<String> = levels.iter().map(|l| l.to_string()).collect();
                let _ = write!(
                    s,
                    "levels={};p={p};iters={}",
                    levels.join("/"),
                    settings.max_iters
                );
                mcss(&mut s);
            }
            MethodParams::PcaTree { depth } => {
                let _ = write!(s, "depth={depth}");
            }
            MethodParams::Srp { tables, bits } => {
                let _ = write!(s, "tables={tables};bits={bits}");
                mcss(&mut s);
            }
            MethodParams::Wta {
                tables,
                perms,
                prefix_k,
            } => {
                let dim = match settings.wta_cost_dim {
                    WtaCostDim::Hashed => "hashed",
                    WtaCostDim::Original => "original",
                };
                let _ = write!(
                    s,
                    "tables={tables};perms={perms};prefix_k={prefix_k};cost_dim={dim}"
                );
                mcss(&mut s);
            }
        }
        s
    }
}

/// Configuration recovered from a CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowConfig {
    pub params: MethodParams,
    pub settings: BuildSettings,
    /// Query noise level and noise seed, for rows of the noise experiment.
    pub sigma: Option<f64>,
    pub noise_seed: Option<u64>,
}

impl RowConfig {
    /// Inverts [`MethodParams::describe`] plus the row's method and seed.
    pub fn from_row(row: &CsvRow) -> Result<Self> {
        let mut kv = BTreeMap::new();
        if row.hyperparams != "none" {
            for pair in row.hyperparams.split(';') {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or_else(|| MipsError::Format(format!("bad hyperparameter {pair:?}")))?;
                kv.insert(k, v);
            }
        }
        fn num<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
            kv.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| MipsError::Format(format!("missing or invalid {key}")))
        }
        let defaults = BuildSettings::default();
        let settings = BuildSettings {
            u: if kv.contains_key("u") {
                num(&kv, "u")?
            } else {
                defaults.u
            },
            m: if kv.contains_key("m") {
                num(&kv, "m")?
            } else {
                defaults.m
            },
            max_iters: if kv.contains_key("iters") {
                num(&kv, "iters")?
            } else {
                defaults.max_iters
            },
            seed: row.seed,
            wta_cost_dim: match kv.get("cost_dim") {
                Some(&"original") => WtaCostDim::Original,
                _ => WtaCostDim::Hashed,
            },
        };
        let params = match MethodKind::parse(&row.method)? {
            MethodKind::Exact => MethodParams::Exact,
            MethodKind::KMeans => MethodParams::KMeans {
                k: num(&kv, "k")?,
                p: num(&kv, "p")?,
            },
            MethodKind::HierKMeans => MethodParams::HierKMeans {
                levels: kv
                    .get("levels")
                    .ok_or_else(|| MipsError::Format("missing levels".into()))?
                    .split('/')
                    .map(|s| {
                        s.parse()
                            .map_err(|_| MipsError::Format(format!("bad level {s:?}")))
                    })
                    .collect::<Result<_>>()?,
                p: num(&kv, "p")?,
            },
            MethodKind::PcaTree => MethodParams::PcaTree {
                depth: num(&kv, "depth")?,
            },
            MethodKind::Srp => MethodParams::Srp {
                tables: num(&kv, "tables")?,
                bits: num(&kv, "bits")?,
            },
            MethodKind::Wta => MethodParams::Wta {
                tables: num(&kv, "tables")?,
                perms: num(&kv, "perms")?,
                prefix_k: num(&kv, "prefix_k")?,
            },
        };
        let sigma = if kv.contains_key("sigma") {
            Some(num(&kv, "sigma")?)
        } else {
            None
        };
        let noise_seed = if kv.contains_key("noise_seed") {
            Some(num(&kv, "noise_seed")?)
        } else {
            None
        };
        Ok(RowConfig {
            params,
            settings,
            sigma,
            noise_seed,
        })
    }
}

/// Settings shared by every index build in an experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildSettings {
    pub u: f64,
    pub m: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub wta_cost_dim: WtaCostDim,
}

impl Default for BuildSettings {
    fn default() -> Self {
        BuildSettings {
            u: DEFAULT_U,
            m: DEFAULT_M,
            max_iters: kmeans::DEFAULT_MAX_ITERS,
            seed: 0,
            wta_cost_dim: WtaCostDim::Hashed,
        }
    }
}

/// A built index of any method.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltIndex {
    Exact,
    KMeans(ClusterIndex),
    HierKMeans(HierIndex),
    PcaTree(PcaTree),
    Srp(SrpIndex),
    Wta(WtaIndex),
}

impl BuiltIndex {
    pub fn build(ds: &Dataset, params: &MethodParams, settings: &BuildSettings) -> Result<Self> {
        let tds = || TransformedDataset::fit(ds, settings.u, settings.m);
        Ok(match params {
            MethodParams::Exact => BuiltIndex::Exact,
            MethodParams::KMeans { k, .. } => BuiltIndex::KMeans(ClusterIndex::train(
                &tds()?,
                *k,
                settings.max_iters,
                settings.seed,
            )?),
            MethodParams::HierKMeans { levels, .. } => BuiltIndex::HierKMeans(HierIndex::build(
                &tds()?,
                levels,
                settings.max_iters,
                settings.seed,
            )?),
            MethodParams::PcaTree { depth } => BuiltIndex::PcaTree(PcaTree::build(ds, *depth)?),
            MethodParams::Srp { tables, bits } => {
                BuiltIndex::Srp(SrpIndex::build(&tds()?, *tables, *bits, settings.seed)?)
            }
            MethodParams::Wta {
                tables,
                perms,
                prefix_k,
            } => BuiltIndex::Wta(
                WtaIndex::build(&tds()?, *tables, *perms, *prefix_k, settings.seed)?
                    .with_cost_dim(settings.wta_cost_dim),
            ),
        })
    }

    /// Searches with the search-time parameters taken from `params`.
    pub fn search(
        &self,
        ds: &Dataset,
        q: &[f64],
        params: &MethodParams,
        k: usize,
    ) -> Result<SearchResult> {
        match (self, params) {
            (BuiltIndex::Exact, _) => exact_search(ds, q, k),
            (BuiltIndex::KMeans(idx), MethodParams::KMeans { p, .. }) => idx.search(ds, q, *p, k),
            (BuiltIndex::HierKMeans(idx), MethodParams::HierKMeans { p, .. }) => {
                idx.search(ds, q, *p, k)
            }
            (BuiltIndex::PcaTree(t), _) => t.search(ds, q, k),
            (BuiltIndex::Srp(idx), _) => idx.search(ds, q, k),
            (BuiltIndex::Wta(idx), _) => idx.search(ds, q, k),
            _ => Err(MipsError::arg(format!(
                "parameters {params:?} do not match the built index"
            ))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            BuiltIndex::Exact => Err(MipsError::arg("exact search has no index file")),
            BuiltIndex::KMeans(i) => i.save(path),
            BuiltIndex::HierKMeans(i) => i.save(path),
            BuiltIndex::PcaTree(i) => i.save(path),
            BuiltIndex::Srp(i) => i.save(path),
            BuiltIndex::Wta(i) => i.save(path),
        }
    }

    /// Loads any index file, dispatching on its magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = crate::codec::read_file(path)?;
        match buf.get(..4) {
            Some(b"KMIX") => ClusterIndex::from_bytes(&buf).map(BuiltIndex::KMeans),
            Some(b"HKIX") => HierIndex::from_bytes(&buf).map(BuiltIndex::HierKMeans),
            Some(b"PCAT") => PcaTree::from_bytes(&buf).map(BuiltIndex::PcaTree),
            Some(b"SRPI") => SrpIndex::from_bytes(&buf).map(BuiltIndex::Srp),
            Some(b"WTAI") => WtaIndex::from_bytes(&buf).map(BuiltIndex::Wta),
            _ => Err(MipsError::Format(format!(
                "{} is not a recognised index file",
                path.display()
            ))),
        }
    }
}

/// Per-K reports for one configuration over a query batch.
///
/// Each query is searched once at the largest K; smaller K use prefixes of
/// the ranked result, which is exactly what a smaller-K search returns.
pub fn evaluate(
    ds: &Dataset,
    queries: &QueryBatch,
    truth: &GroundTruth,
    index: &BuiltIndex,
    params: &MethodParams,
    ks: &[usize],
) -> Result<Vec<(usize, PrecisionReport)>> {
    let k_max = *ks
        .iter()
        .max()
        .ok_or_else(|| MipsError::arg("empty K list"))?;
    if truth.k < k_max || truth.n_queries() != queries.n() {
        return Err(MipsError::arg(format!(
            "ground truth covers {} queries at K={}, need {} at K={k_max}",
            truth.n_queries(),
            truth.k,
            queries.n()
        )));
    }
    let per_query: Vec<(Vec<f64>, f64)> = (0..queries.n())
        .into_par_iter()
        .map(|j| {
            let r = index.search(ds, queries.row(j), params, k_max)?;
            let truth = &truth.results[j].ids;
            let precisions = ks
                .iter()
                .map(|&k| {
                    let got = &r.topk.ids[..k.min(r.topk.len())];
                    precision_of_ids(&truth[..k], got, k)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((precisions, r.cost.total()))
        })
        .collect::<Result<Vec<_>>>()?;
    ks.iter()
        .enumerate()
        .map(|(i, &k)| {
            let pairs: Vec<(f64, f64)> = per_query.iter().map(|(p, c)| (p[i], *c)).collect();
            Ok((k, aggregate(&pairs, ds.n())?))
        })
        .collect()
}

/// Hyperparameter grid for one method; expands to the cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodGrid {
    Exact,
    KMeans {
        k: Vec<usize>,
        p: Vec<usize>,
    },
    HierKMeans {
        levels: Vec<Vec<usize>>,
        p: Vec<usize>,
    },
    PcaTree {
        depth: Vec<usize>,
    },
    Srp {
        tables: Vec<usize>,
        bits: Vec<usize>,
    },
    Wta {
        tables: Vec<usize>,
        perms: Vec<usize>,
        prefix_k: Vec<usize>,
    },
}

impl MethodGrid {
    pub fn expand(&self) -> Result<Vec<MethodParams>> {
        fn nonempty<T>(name: &str, v: &[T]) -> Result<()> {
            if v.is_empty() {
                return Err(MipsError::arg(format!("empty grid for {name}")));
            }
            Ok(())
        }
        let mut out = Vec::new();
        match self {
            MethodGrid::Exact => out.push(MethodParams::Exact),
            MethodGrid::KMeans { k, p } => {
                nonempty("k", k)?;
                nonempty("p", p)?;
                for &k in k {
                    for &p in p {
                        out.push(MethodParams::KMeans { k, p });
                    }
                }
            }
            MethodGrid::HierKMeans { levels, p } => {
                nonempty("levels", levels)?;
                nonempty("p", p)?;
                for l in levels {
                    for &p in p {
                        out.push(MethodParams::HierKMeans {
                            levels: l.clone(),
                            p,
                        });
                    }
                }
            }
            MethodGrid::PcaTree { depth } => {
                nonempty("depth", depth)?;
                out.extend(depth.iter().map(|&depth| MethodParams::PcaTree { depth }));
            }
            MethodGrid::Srp { tables, bits } => {
                nonempty("tables", tables)?;
                nonempty("bits", bits)?;
                for &bits in bits {
                    for &tables in tables {
                        out.push(MethodParams::Srp { tables, bits });
                    }
                }
            }
            MethodGrid::Wta {
                tables,
                perms,
                prefix_k,
            } => {
                nonempty("tables", tables)?;
                nonempty("perms", perms)?;
                nonempty("prefix_k", prefix_k)?;
                for &prefix_k in prefix_k {
                    for &perms in perms {
                        for &tables in tables {
                            out.push(MethodParams::Wta {
                                tables,
                                perms,
                                prefix_k,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub grids: Vec<MethodGrid>,
    pub ks: Vec<usize>,
    pub settings: BuildSettings,
}

fn check_ks(ks: &[usize], n: usize) -> Result<()> {
    if ks.is_empty() || ks.iter().any(|&k| k == 0 || k > n) {
        return Err(MipsError::arg(format!(
            "K values must lie in 1..={n}: {ks:?}"
        )));
    }
    Ok(())
}

fn row(
    params: &MethodParams,
    hyperparams: String,
    k: usize,
    report: &PrecisionReport,
    n_queries: usize,
    seed: u64,
) -> CsvRow {
    CsvRow {
        method: params.kind().name().to_string(),
        hyperparams,
        k,
        mean_precision: report.mean_precision,
        mean_cost: report.mean_cost,
        speedup: report.speedup,
        n_queries,
        seed,
    }
}

/// Exact answers at the largest K, reusing `cache` when it matches.
pub fn ground_truth_for(
    ds: &Dataset,
    queries: &QueryBatch,
    k_max: usize,
    cache: Option<&GroundTruth>,
) -> Result<GroundTruth> {
    match cache {
        Some(gt) if gt.k >= k_max && gt.n_queries() == queries.n() => Ok(gt.clone()),
        Some(gt) => Err(MipsError::arg(format!(
            "ground-truth cache holds {} queries at K={}, need {} at K={k_max}",
            gt.n_queries(),
            gt.k,
            queries.n()
        ))),
        None => exact_mips_batch(ds, queries, k_max),
    }
}

/// One row per grid point and K, sorted by method name then speedup.
pub fn run_sweep(
    spec: &SweepSpec,
    ds: &Dataset,
    queries: &QueryBatch,
    gt_cache: Option<&GroundTruth>,
) -> Result<Vec<CsvRow>> {
    check_ks(&spec.ks, ds.n())?;
    if spec.grids.is_empty() {
        return Err(MipsError::arg("sweep has no methods"));
    }
    let k_max = *spec.ks.iter().max().unwrap();
    let truth = ground_truth_for(ds, queries, k_max, gt_cache)?;
    let mut rows = Vec::new();
    for grid in &spec.grids {
        let mut built: Option<(String, BuiltIndex)> = None;
        for params in grid.expand()? {
            let key = params.build_key();
            if built.as_ref().is_none_or(|(k, _)| *k != key) {
                built = Some((key, BuiltIndex::build(ds, &params, &spec.settings)?));
            }
            let index = &built.as_ref().unwrap().1;
            let hp = params.describe(&spec.settings);
            for (k, report) in evaluate(ds, queries, &truth, index, &params, &spec.ks)? {
                rows.push(row(
                    &params,
                    hp.clone(),
                    k,
                    &report,
                    queries.n(),
                    spec.settings.seed,
                ));
            }
        }
    }
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.speedup.total_cmp(&b.speedup))
    });
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// Nonnegative, ascending.
    pub sigmas: Vec<f64>,
    /// Informational: the speedup the method parameters were chosen for.
    pub target_speedup: f64,
    pub methods: Vec<MethodParams>,
    pub ks: Vec<usize>,
    pub settings: BuildSettings,
    /// Seed of the Gaussian noise; the same draw is scaled for every sigma.
    pub noise_seed: u64,
}

/// For every method, sigma and K: corrupt the queries, recompute the exact
/// answers for the corrupted queries, search, and report.
pub fn run_noise(spec: &NoiseSpec, ds: &Dataset, queries: &QueryBatch) -> Result<Vec<CsvRow>> {
    check_ks(&spec.ks, ds.n())?;
    if spec.sigmas.is_empty()
        || spec.sigmas.iter().any(|&s| s.is_nan() || s < 0.0)
        || spec.sigmas.windows(2).any(|w| w[1] < w[0])
    {
        return Err(MipsError::arg(format!(
            "sigmas must be nonnegative and ascending: {:?}",
            spec.sigmas
        )));
    }
    let k_max = *spec.ks.iter().max().unwrap();
    let noisy: Vec<(QueryBatch, GroundTruth)> = spec
        .sigmas
        .iter()
        .map(|&sigma| {
            let q = corrupt_queries(queries, sigma, spec.noise_seed)?;
            let gt = exact_mips_batch(ds, &q, k_max)?;
            Ok((q, gt))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for params in &spec.methods {
        let index = BuiltIndex::build(ds, params, &spec.settings)?;
        let hp = params.describe(&spec.settings);
        for (&sigma, (q, gt)) in spec.sigmas.iter().zip(&noisy) {
            for (k, report) in evaluate(ds, q, gt, &index, params, &spec.ks)? {
                rows.push(row(
                    params,
                    format!("sigma={sigma};noise_seed={};{hp}", spec.noise_seed),
                    k,
                    &report,
                    q.n(),
                    spec.settings.seed,
                ));
            }
        }
    }
    Ok(rows)
}

/// Secondary grids and fixed parameters used while calibrating.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSpace {
    /// Clusters probed by flat k-means; `k` is calibrated.
    pub kmeans_p: usize,
    /// Hierarchy shape, finest first; `p` is calibrated. Empty means default.
    pub hier_levels: Vec<usize>,
    /// SRP bits per table to try; the table count is calibrated.
    pub srp_bits: Vec<usize>,
    /// WTA (perms, prefix_k) pairs to try; the table count is calibrated.
    pub wta_shapes: Vec<(usize, usize)>,
    pub max_tables: usize,
    /// K used to pick among feasible configurations.
    pub select_k: usize,
}

impl Default for CalibrationSpace {
    fn default() -> Self {
        CalibrationSpace {
            kmeans_p: 3,
            hier_levels: Vec::new(),
            srp_bits: vec![8, 12, 16, 20, 24, 32],
            wta_shapes: vec![
                (4, 4),
                (8, 4),
                (12, 4),
                (16, 4),
                (4, 8),
                (8, 8),
                (12, 8),
                (4, 16),
                (8, 16),
            ],
            max_tables: 64,
            select_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub params: MethodParams,
    pub achieved_speedup: f64,
    /// Mean precision at `select_k`.
    pub mean_precision: f64,
}

struct Measurer<'a> {
    ds: &'a Dataset,
    queries: &'a QueryBatch,
    truth: &'a GroundTruth,
    settings: &'a BuildSettings,
    select_k: usize,
    min_seen: f64,
    max_seen: f64,
}

impl Measurer<'_> {
    fn measure_built(&mut self, index: &BuiltIndex, params: &MethodParams) -> Result<(f64, f64)> {
        let reports = evaluate(
            self.ds,
            self.queries,
            self.truth,
            index,
            params,
            &[self.select_k],
        )?;
        let r = &reports[0].1;
        self.min_seen = self.min_seen.min(r.speedup);
        self.max_seen = self.max_seen.max(r.speedup);
        Ok((r.speedup, r.mean_precision))
    }

    fn measure(&mut self, params: &MethodParams) -> Result<(f64, f64)> {
        let index = BuiltIndex::build(self.ds, params, self.settings)?;
        self.measure_built(&index, params)
    }
}

/// Finds `x ∈ [lo, hi]` whose measured speedup is closest to `target`,
/// assuming speedup is monotone in `x` (`increasing` gives the direction).
/// Returns the best `(x, speedup, precision)` seen.
fn bisect(
    lo: usize,
    hi: usize,
    increasing: bool,
    target: f64,
    mut measure: impl FnMut(usize) -> Result<(f64, f64)>,
) -> Result<(usize, f64, f64)> {
    let mut memo: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut eval = |x: usize, memo: &mut BTreeMap<usize, (f64, f64)>| -> Result<(f64, f64)> {
        if let Some(v) = memo.get(&x) {
            return Ok(*v);
        }
        let v = measure(x)?;
        memo.insert(x, v);
        Ok(v)
    };
    let (mut a, mut b) = (lo, hi);
    while a < b {
        let mid = a + (b - a) / 2;
        let (s, _) = eval(mid, &mut memo)?;
        let below = if increasing { s < target } else { s >= target };
        if below {
            a = mid + 1;
        } else {
            b = mid;
        }
    }
    // the crossing lies between a-1 and a; look at both sides
    for x in [a.saturating_sub(1).max(lo), a, (a + 1).min(hi)] {
        eval(x, &mut memo)?;
    }
    let (&x, &(s, p)) = memo
        .iter()
        .min_by(|l, r| {
            let dl = (l.1 .0 - target).abs();
            let dr = (r.1 .0 - target).abs();
            dl.total_cmp(&dr).then(l.0.cmp(r.0))
        })
        .expect("at least one measurement");
    Ok((x, s, p))
}

/// Chooses hyperparameters for `method` whose measured speedup is within
/// `tolerance · target` of `target`. Among feasible configurations of the
/// secondary grids, the one with the best precision at `select_k` wins.
pub fn calibrate_speedup(
    method: MethodKind,
    target: f64,
    tolerance: f64,
    ds: &Dataset,
    queries: &QueryBatch,
    settings: &BuildSettings,
    space: &CalibrationSpace,
) -> Result<Calibration> {
    if tolerance.is_nan() || tolerance < 0.0 || target.is_nan() || target <= 0.0 {
        return Err(MipsError::arg(
            "target must be positive and tolerance nonnegative",
        ));
    }
    let within = |s: f64| (s - target).abs() <= tolerance * target;
    if method == MethodKind::Exact {
        return if within(1.0) {
            Ok(Calibration {
                params: MethodParams::Exact,
                achieved_speedup: 1.0,
                mean_precision: 1.0,
            })
        } else {
            Err(MipsError::Calibration {
                target,
                min: 1.0,
                max: 1.0,
            })
        };
    }
    if target.is_nan() || target <= 1.0 {
        return Err(MipsError::arg(format!(
            "target speedup must exceed 1, got {target}"
        )));
    }
    let select_k = space.select_k.clamp(1, ds.n());
    let truth = exact_mips_batch(ds, queries, select_k)?;
    let mut m = Measurer {
        ds,
        queries,
        truth: &truth,
        settings,
        select_k,
        min_seen: f64::INFINITY,
        max_seen: f64::NEG_INFINITY,
    };
    let n = ds.n();
    let mut feasible: Vec<Calibration> = Vec::new();
    let consider = |params: MethodParams, s: f64, p: f64, feasible: &mut Vec<Calibration>| {
        if within(s) {
            feasible.push(Calibration {
                params,
                achieved_speedup: s,
                mean_precision: p,
            });
        }
    };

    match method {
        MethodKind::Exact => unreachable!(),
        MethodKind::KMeans => {
            let p = space.kmeans_p.max(1);
            // speedup grows with k until routing dominates near √(p·n)
            let peak = (((p * n) as f64).sqrt().ceil() as usize).clamp(p, n);
            let (k, s, prec) = bisect(p, peak, true, target, |k| {
                m.measure(&MethodParams::KMeans { k, p })
            })?;
            consider(MethodParams::KMeans { k, p }, s, prec, &mut feasible);
        }
        MethodKind::HierKMeans => {
            let levels = if space.hier_levels.is_empty() {
                hier::default_level_sizes(n)
            } else {
                space.hier_levels.clone()
            };
            let probe = MethodParams::HierKMeans {
                levels: levels.clone(),
                p: 1,
            };
            let index = BuiltIndex::build(ds, &probe, settings)?;
            let max_p = match &index {
                BuiltIndex::HierKMeans(h) => h.max_width(),
                _ => unreachable!(),
            };
            let (p, s, prec) = bisect(1, max_p, false, target, |p| {
                let params = MethodParams::HierKMeans {
                    levels: levels.clone(),
                    p,
                };
                m.measure_built(&index, &params)
            })?;
            consider(
                MethodParams::HierKMeans { levels, p },
                s,
                prec,
                &mut feasible,
            );
        }
        MethodKind::PcaTree => {
            let max_depth = (usize::BITS - 1 - n.leading_zeros()) as usize;
            let max_depth = max_depth.min(ds.d() + 1);
            let (depth, s, prec) = bisect(0, max_depth, true, target, |depth| {
                m.measure(&MethodParams::PcaTree { depth })
            })?;
            consider(MethodParams::PcaTree { depth }, s, prec, &mut feasible);
        }
        MethodKind::Srp => {
            for &bits in &space.srp_bits {
                let (tables, s, prec) =
                    bisect(1, space.max_tables.max(1), false, target, |tables| {
                        m.measure(&MethodParams::Srp { tables, bits })
                    })?;
                consider(MethodParams::Srp { tables, bits }, s, prec, &mut feasible);
            }
        }
        MethodKind::Wta => {
            let dim = ds.d() + settings.m;
            for &(perms, prefix_k) in &space.wta_shapes {
                if prefix_k > dim {
                    continue;
                }
                let (tables, s, prec) =
                    bisect(1, space.max_tables.max(1), false, target, |tables| {
                        m.measure(&MethodParams::Wta {
                            tables,
                            perms,
                            prefix_k,
                        })
                    })?;
                consider(
                    MethodParams::Wta {
                        tables,
                        perms,
                        prefix_k,
                    },
                    s,
                    prec,
                    &mut feasible,
                );
            }
        }
    }
    feasible
        .into_iter()
        .max_by(|a, b| a.mean_precision.total_cmp(&b.mean_precision))
        .ok_or(MipsError::Calibration {
            target,
            min: m.min_seen,
            max: m.max_seen,
        })
}

pub fn default_kmeans_k(n: usize) -> usize {
    kmeans::default_k(n)
}
