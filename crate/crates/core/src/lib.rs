//! Approximate maximum inner product search (MIPS).
//!
//! The main method reduces MIPS to cosine search with an asymmetric
//! augmentation, clusters the augmented data with spherical k-means (flat or
//! hierarchical) and answers a query by exactly reranking the members of the
//! best-matching clusters. PCA-Tree, signed-random-projection hashing and
//! winner-take-all hashing are provided as baselines, all measured under one
//! cost model that counts dot-product equivalents.

mod codec;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod hash;
pub mod hier;
pub mod kmeans;
pub mod linalg;
pub mod metrics;
pub mod pca_tree;
pub mod transform;
pub mod vecstore;

pub use error::{MipsError, Result};
pub use exact::{
    exact_mcss, exact_mips, exact_mips_batch, exact_nns, exact_search, rerank, GroundTruth,
    ScoreOrder, TopK,
};
pub use experiment::{
    calibrate_speedup, run_noise, run_sweep, BuildSettings, BuiltIndex, Calibration,
    CalibrationSpace, MethodGrid, MethodKind, MethodParams, NoiseSpec, QueryProfile, RowConfig,
    SweepSpec,
};
pub use hash::{SrpHasher, SrpIndex, WtaCostDim, WtaHasher, WtaIndex};
pub use hier::HierIndex;
pub use kmeans::{spherical_kmeans, ClusterIndex, KMeansFit};
pub use metrics::{
    aggregate, precision_at_k, read_csv, speedup, write_csv, CostLedger, CsvRow, PrecisionReport,
    SearchResult,
};
pub use pca_tree::PcaTree;
pub use transform::{fit_apply_nns, McssTransformParams, NnsTransformParams, TransformedDataset};
pub use vecstore::{
    corrupt_queries, gen_synthetic, load_dataset, save_dataset, Dataset, ElementType, QueryBatch,
};
