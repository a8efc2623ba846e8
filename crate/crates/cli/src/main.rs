use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mips_core::experiment::{DEFAULT_KS, DEFAULT_SIGMAS, DEFAULT_TARGET_SPEEDUP};
use mips_core::hier::{self, DEFAULT_P};
use mips_core::{
    calibrate_speedup, exact_mips_batch, gen_synthetic, kmeans, load_dataset, run_noise, run_sweep,
    write_csv, BuildSettings, BuiltIndex, CalibrationSpace, CsvRow, Dataset, ElementType,
    GroundTruth, MethodGrid, MethodKind, MethodParams, NoiseSpec, QueryBatch, QueryProfile,
    SweepSpec, WtaCostDim,
};

/// Approximate maximum inner product search toolkit.
#[derive(Parser)]
#[command(name = "mips", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clustered synthetic dataset.
    GenData(GenDataArgs),
    /// Build an index and save it.
    BuildIndex(BuildIndexArgs),
    /// Answer queries with an index (or exact search) and print the top-K.
    Query(QueryArgs),
    /// Compute exact top-K answers for a query set.
    GroundTruth(GroundTruthArgs),
    /// Sweep hyperparameter grids and write precision/speedup rows.
    Sweep(SweepArgs),
    /// Query-noise robustness experiment at a matched speedup.
    Noise(NoiseArgs),
    /// Find hyperparameters that reach a target speedup.
    Calibrate(CalibrateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Exact,
    Kmeans,
    HierKmeans,
    PcaTree,
    Srp,
    Wta,
}

impl From<Method> for MethodKind {
    fn from(m: Method) -> Self {
        match m {
            Method::Exact => MethodKind::Exact,
            Method::Kmeans => MethodKind::KMeans,
            Method::HierKmeans => MethodKind::HierKMeans,
            Method::PcaTree => MethodKind::PcaTree,
            Method::Srp => MethodKind::Srp,
            Method::Wta => MethodKind::Wta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Separate query file, up to 60,000 queries.
    Cf,
    /// Queries sampled from the data, up to 2,000.
    Embedding,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostDim {
    Hashed,
    Original,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    clusters: usize,
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hold out this many trailing rows as a query file.
    #[arg(long, requires = "queries_out")]
    n_queries: Option<usize>,
    #[arg(long)]
    queries_out: Option<PathBuf>,
    /// Store 64-bit elements.
    #[arg(long)]
    f64: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Query file; without it queries are sampled from the data.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Number of queries to use; defaults depend on --query-profile.
    #[arg(long)]
    n_queries: Option<usize>,
    #[arg(long, value_enum, default_value = "embedding")]
    query_profile: Profile,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, QueryBatch)> {
        let ds = load_dataset(&self.data)?;
        let profile = match self.query_profile {
            Profile::Cf => QueryProfile::CollaborativeFiltering,
            Profile::Embedding => QueryProfile::Embedding,
        };
        let queries = match &self.queries {
            Some(path) => {
                let q = QueryBatch::load(path)?;
                let count = self
                    .n_queries
                    .unwrap_or_else(|| profile.default_count(q.n()));
                q.truncated(count)
            }
            None => {
                let count = self
                    .n_queries
                    .unwrap_or_else(|| profile.default_count(ds.n()));
                ds.sample_queries(count, self.seed)?
            }
        };
        Ok((ds, queries))
    }
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long, default_value_t = mips_core::transform::DEFAULT_U)]
    mcss_u: f64,
    #[arg(long, default_value_t = mips_core::transform::DEFAULT_M)]
    mcss_m: usize,
    #[arg(long, default_value_t = kmeans::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    /// Dimension dividing the WTA prefix length in the cost model.
    #[arg(long, value_enum, default_value = "hashed")]
    wta_cost_dim: CostDim,
}

impl TransformArgs {
    fn settings(&self, seed: u64) -> BuildSettings {
        BuildSettings {
            u: self.mcss_u,
            m: self.mcss_m,
            max_iters: self.max_iters,
            seed,
            wta_cost_dim: match self.wta_cost_dim {
                CostDim::Hashed => WtaCostDim::Hashed,
                CostDim::Original => WtaCostDim::Original,
            },
        }
    }
}

/// Single-valued method parameters.
#[derive(Args)]
struct ParamArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    k_clusters: Option<usize>,
    #[arg(long)]
    top_p: Option<usize>,
    /// Level sizes finest first, e.g. 465/22.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    pca_depth: Option<usize>,
    #[arg(long)]
    tables: Option<usize>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    perms: Option<usize>,
    #[arg(long)]
    prefix_k: Option<usize>,
}

fn required(v: Option<usize>, flag: &str, method: &str) -> Result<usize> {
    v.with_context(|| format!("--{flag} is required for {method}"))
}

fn parse_levels(s: &str) -> Result<Vec<usize>> {
    s.split('/')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .with_context(|| format!("bad level size {t:?}"))
        })
        .collect()
}

impl ParamArgs {
    fn params(&self, n: usize) -> Result<MethodParams> {
        let name = MethodKind::from(self.method).name();
        Ok(match self.method {
            Method::Exact => MethodParams::Exact,
            Method::Kmeans => MethodParams::KMeans {
                k: self.k_clusters.unwrap_or_else(|| kmeans::default_k(n)),
                p: self.top_p.unwrap_or(3),
            },
            Method::HierKmeans => MethodParams::HierKMeans {
                levels: match &self.levels {
                    Some(s) => parse_levels(s)?,
                    None => hier::default_level_sizes(n),
                },
                p: self.top_p.unwrap_or(DEFAULT_P),
            },
            Method::PcaTree => MethodParams::PcaTree {
                depth: required(self.pca_depth, "pca-depth", name)?,
            },
            Method::Srp => MethodParams::Srp {
                tables: required(self.tables, "tables", name)?,
                bits: required(self.bits, "bits", name)?,
            },
            Method::Wta => MethodParams::Wta {
                tables: required(self.tables, "tables", name)?,
                perms: required(self.perms, "perms", name)?,
                prefix_k: required(self.prefix_k, "prefix-k", name)?,
            },
        })
    }
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    transform: TransformArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Saved index; without it the index is built from the method flags.
    #[arg(long)]
    index: Option<PathBuf>,
    #[command(flatten)]
    params: ParamArgs,
    #[command(flatten)]
    transform: TransformArgs,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GroundTruthArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    topk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    method: Vec<Method>,
    #[arg(long, value_delimiter = ',')]
    k_clusters: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    top_p: Vec<usize>,
    /// Comma-separated shapes, each finest first with `/`, e.g. 465/22,100/10.
    #[arg(long, value_delimiter = ',')]
    levels: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pca_depth: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    tables: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    bits: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    perms: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    prefix_k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    topk: Vec<usize>,
    /// Ground-truth file to reuse (see `ground-truth`).
    #[arg(long)]
    gt_cache: Option<PathBuf>,
    #[command(flatten)]
    transform: TransformArgs,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn or_default<T: Clone>(v: &[T], default: impl FnOnce() -> Vec<T>) -> Vec<T> {
    if v.is_empty() {
        default()
    } else {
        v.to_vec()
    }
}

impl SweepArgs {
    fn grid(&self, method: Method, n: usize) -> Result<MethodGrid> {
        let doubling = || vec![1, 2, 4, 8, 16, 32];
        Ok(match method {
            Method::Exact => MethodGrid::Exact,
            Method::Kmeans => MethodGrid::KMeans {
                k: or_default(&self.k_clusters, || vec![kmeans::default_k(n)]),
                p: or_default(&self.top_p, || vec![1, 2, 3, 5, 10, 20]),
            },
            Method::HierKmeans => MethodGrid::HierKMeans {
                levels: if self.levels.is_empty() {
                    vec![hier::default_level_sizes(n)]
                } else {
                    self.levels
                        .iter()
                        .map(|s| parse_levels(s))
                        .collect::<Result<_>>()?
                },
                p: or_default(&self.top_p, doubling),
            },
            Method::PcaTree => MethodGrid::PcaTree {
                depth: or_default(&self.pca_depth, || {
                    let max = (usize::BITS - 1 - n.max(1).leading_zeros()) as usize;
                    (1..=max.min(16)).collect()
                }),
            },
            Method::Srp => MethodGrid::Srp {
                tables: or_default(&self.tables, doubling),
                bits: or_default(&self.bits, || vec![16]),
            },
            Method::Wta => MethodGrid::Wta {
                tables: or_default(&self.tables, doubling),
                perms: or_default(&self.perms, || vec![8]),
                prefix_k: or_default(&self.prefix_k, || vec![4]),
            },
        })
    }
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, value_delimiter = ',', required = true)]
    method: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIGMAS)]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_TARGET_SPEEDUP)]
    target_speedup: f64,
    /// Relative tolerance of the calibrated speedup.
    #[arg(long, default_value_t = 0.2)]
    tolerance: f64,
    /// Flat k-means probes this many clusters while calibrating.
    #[arg(long, default_value_t = 3)]
    top_p: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    topk: Vec<usize>,
    #[command(flatten)]
    transform: TransformArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, default_value_t = DEFAULT_TARGET_SPEEDUP)]
    target_speedup: f64,
    #[arg(long, default_value_t = 0.2)]
    tolerance: f64,
    /// Flat k-means probes this many clusters.
    #[arg(long, default_value_t = 3)]
    top_p: usize,
    /// K used to rank feasible configurations.
    #[arg(long, default_value_t = 10)]
    topk: usize,
    #[command(flatten)]
    transform: TransformArgs,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit_rows(rows: &[CsvRow], out: Option<&Path>) -> Result<()> {
    let mut w = output(out)?;
    write_csv(rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let ds = gen_synthetic(a.n, a.dim, a.clusters, a.spread, a.seed)?;
    let ds = if a.f64 {
        Dataset::with_element_type(ds.d(), ElementType::F64, ds.as_slice().to_vec())?
    } else {
        ds
    };
    match (a.n_queries, &a.queries_out) {
        (Some(count), Some(qpath)) => {
            let (ds, q) = ds.split_queries(count)?;
            ds.save(&a.out)?;
            q.save(qpath)?;
        }
        (None, Some(qpath)) => bail!("--queries-out {} needs --n-queries", qpath.display()),
        _ => ds.save(&a.out)?,
    }
    Ok(())
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let params = a.params.params(ds.n())?;
    let index = BuiltIndex::build(&ds, &params, &a.transform.settings(a.seed))?;
    index.save(&a.out)?;
    eprintln!(
        "{} {}",
        params.kind().name(),
        params.describe(&a.transform.settings(a.seed))
    );
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let (ds, queries) = a.data.load()?;
    let params = a.params.params(ds.n())?;
    let index = match &a.index {
        Some(path) => BuiltIndex::load(path)?,
        None => BuiltIndex::build(&ds, &params, &a.transform.settings(a.data.seed))?,
    };
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "query,rank,id,score,cost")?;
    for j in 0..queries.n() {
        let r = index.search(&ds, queries.row(j), &params, a.topk)?;
        let cost = r.cost.total();
        for (rank, (id, score)) in r.topk.ids.iter().zip(&r.topk.scores).enumerate() {
            writeln!(w, "{j},{},{id},{score},{cost}", rank + 1)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn ground_truth(a: GroundTruthArgs) -> Result<()> {
    let (ds, queries) = a.data.load()?;
    exact_mips_batch(&ds, &queries, a.topk)?.save(&a.out)?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (ds, queries) = a.data.load()?;
    let grids = a
        .method
        .iter()
        .map(|&m| a.grid(m, ds.n()))
        .collect::<Result<Vec<_>>>()?;
    let spec = SweepSpec {
        grids,
        ks: a.topk.clone(),
        settings: a.transform.settings(a.data.seed),
    };
    let cache = a.gt_cache.as_ref().map(GroundTruth::load).transpose()?;
    let rows = run_sweep(&spec, &ds, &queries, cache.as_ref())?;
    emit_rows(&rows, a.out.as_deref())
}

fn calibration_space(top_p: usize, select_k: usize) -> CalibrationSpace {
    CalibrationSpace {
        kmeans_p: top_p,
        select_k,
        ..CalibrationSpace::default()
    }
}

fn noise(a: NoiseArgs) -> Result<()> {
    let (ds, queries) = a.data.load()?;
    let settings = a.transform.settings(a.data.seed);
    let space = calibration_space(a.top_p, 10);
    let mut methods = Vec::new();
    for &m in &a.method {
        let c = calibrate_speedup(
            m.into(),
            if matches!(m, Method::Exact) {
                1.0
            } else {
                a.target_speedup
            },
            a.tolerance,
            &ds,
            &queries,
            &settings,
            &space,
        )?;
        eprintln!(
            "{}: {} (speedup {:.2})",
            c.params.kind().name(),
            c.params.describe(&settings),
            c.achieved_speedup
        );
        methods.push(c.params);
    }
    let spec = NoiseSpec {
        sigmas: a.sigma.clone(),
        target_speedup: a.target_speedup,
        methods,
        ks: a.topk.clone(),
        settings,
        noise_seed: a.data.seed.wrapping_add(1),
    };
    let rows = run_noise(&spec, &ds, &queries)?;
    emit_rows(&rows, a.out.as_deref())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let (ds, queries) = a.data.load()?;
    let settings = a.transform.settings(a.data.seed);
    let c = calibrate_speedup(
        a.method.into(),
        a.target_speedup,
        a.tolerance,
        &ds,
        &queries,
        &settings,
        &calibration_space(a.top_p, a.topk),
    )?;
    println!("method={}", c.params.kind().name());
    println!("hyperparams={}", c.params.describe(&settings));
    println!("speedup={}", c.achieved_speedup);
    println!("precision_at_{}={}", a.topk, c.mean_precision);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Query(a) => query(a),
        Command::GroundTruth(a) => ground_truth(a),
        Command::Sweep(a) => sweep(a),
        Command::Noise(a) => noise(a),
        Command::Calibrate(a) => calibrate(a),
    }
}
