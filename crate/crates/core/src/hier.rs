//! Bottom-up hierarchical spherical k-means and the top-p frontier walk.
//!
//! Level 0 is the coarsest; level `L` is the data itself. Building clusters
//! the data into the finest level first, then clusters those centroids, and
//! so on up to level 0.

use std::path::Path;

use crate::codec::{read_file, Decoder, Encoder};
use crate::error::{MipsError, Result};
use crate::exact::finish_search;
use crate::kmeans::{
    check_query, decode_params, encode_params, inverted_lists, overflow, spherical_kmeans,
    top_p_rows, INDEX_VERSION,
};
use crate::metrics::{CostLedger, SearchResult};
use crate::transform::{McssTransformParams, TransformedDataset};
use crate::vecstore::Dataset;

pub const HKIX_MAGIC: &[u8; 4] = b"HKIX";
pub const DEFAULT_P: usize = 8;

/// Smallest `c` with `c³ ≥ n^e` for `e ∈ {1, 2}`: an overflow-free `⌈n^{e/3}⌉`.
fn ceil_cube_root_of_power(n: usize, e: u32) -> usize {
    let target = (n as u128).pow(e);
    let mut c = (target as f64).cbrt().floor() as u128;
    while c * c * c < target {
        c += 1;
    }
    while c > 0 && (c - 1).pow(3) >= target {
        c -= 1;
    }
    c as usize
}

/// Two levels sized `[⌈n^{2/3}⌉, ⌈n^{1/3}⌉]`, finest first.
pub fn default_level_sizes(n: usize) -> Vec<usize> {
    vec![
        ceil_cube_root_of_power(n, 2).max(1),
        ceil_cube_root_of_power(n, 1).max(1),
    ]
}

/// Seed for the clustering that produces level `i` counted from the finest;
/// the finest level uses `seed` itself so a one-level hierarchy matches the
/// flat index.
fn level_seed(seed: u64, i: usize) -> u64 {
    if i == 0 {
        seed
    } else {
        seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    centroids: Vec<f64>,
    /// `children[i]`: sorted ids at the next finer level whose parent is `i`.
    children: Vec<Vec<usize>>,
    /// Parent of each item at the next finer level.
    parents: Vec<usize>,
}

impl Level {
    fn width(&self) -> usize {
        self.children.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierIndex {
    dim: usize,
    n: usize,
    /// Coarsest first.
    levels: Vec<Level>,
    params: McssTransformParams,
}

impl HierIndex {
    /// `level_sizes` runs finest to coarsest and must be strictly decreasing.
    pub fn build(
        tds: &TransformedDataset,
        level_sizes: &[usize],
        max_iters: usize,
        seed: u64,
    ) -> Result<Self> {
        if level_sizes.is_empty() {
            return Err(MipsError::arg("at least one level is required"));
        }
        if level_sizes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(MipsError::arg(format!(
                "level sizes must strictly decrease from finest to coarsest: {level_sizes:?}"
            )));
        }
        let dim = tds.dim();
        let mut levels = Vec::with_capacity(level_sizes.len());
        let mut items: Vec<f64> = tds.as_slice().to_vec();
        let mut count = tds.n();
        for (i, &size) in level_sizes.iter().enumerate() {
            if size == 0 || size > count {
                return Err(MipsError::arg(format!(
                    "level size {size} cannot cluster {count} items"
                )));
            }
            let fit = spherical_kmeans(&items, dim, size, max_iters, level_seed(seed, i))?;
            levels.push(Level {
                children: inverted_lists(&fit.assignments, size),
                parents: fit.assignments,
                centroids: fit.centroids.clone(),
            });
            items = fit.centroids;
            count = size;
        }
        levels.reverse();
        Ok(HierIndex {
            dim,
            n: tds.n(),
            levels,
            params: *tds.params(),
        })
    }

    /// Number of centroid levels `L`.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Centroid count at level `l` (0 = coarsest); `l == depth()` is the data.
    pub fn width(&self, l: usize) -> usize {
        if l == self.levels.len() {
            self.n
        } else {
            self.levels[l].width()
        }
    }

    pub fn max_width(&self) -> usize {
        self.levels.iter().map(Level::width).max().unwrap_or(0)
    }

    pub fn centroid(&self, l: usize, i: usize) -> &[f64] {
        &self.levels[l].centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Parent at level `l − 1` of item `i` at level `l`, for `l ∈ 1..=L`.
    pub fn parent(&self, l: usize, i: usize) -> usize {
        self.levels[l - 1].parents[i]
    }

    pub fn children(&self, l: usize, i: usize) -> &[usize] {
        &self.levels[l].children[i]
    }

    pub fn params(&self) -> &McssTransformParams {
        &self.params
    }

    /// Walks down from level 0 keeping the `p` best-scoring members of each
    /// frontier and expanding their children; returns the data ids reached.
    /// Charges one dot product per scored frontier member.
    pub fn walk(&self, q_t: &[f64], p: usize, ledger: &mut CostLedger) -> Result<Vec<usize>> {
        if q_t.len() != self.dim {
            return Err(MipsError::Dimension {
                expected: self.dim,
                got: q_t.len(),
            });
        }
        if p == 0 {
            return Err(MipsError::arg("p must be at least 1"));
        }
        let mut frontier: Vec<usize> = (0..self.levels[0].width()).collect();
        let mut scratch = Vec::new();
        for level in &self.levels {
            ledger.add_routing(frontier.len() as f64);
            scratch.clear();
            for &i in &frontier {
                scratch.extend_from_slice(&level.centroids[i * self.dim..(i + 1) * self.dim]);
            }
            let kept = top_p_rows(&scratch, self.dim, q_t, p);
            let mut next = Vec::new();
            for pos in kept {
                next.extend_from_slice(&level.children[frontier[pos]]);
            }
            next.sort_unstable();
            frontier = next;
        }
        Ok(frontier)
    }

    /// Frontier walk followed by exact rerank. Cost: `Σ_l |C_l| + |C_L|`.
    pub fn search(&self, ds: &Dataset, q: &[f64], p: usize, k: usize) -> Result<SearchResult> {
        check_query(ds, self.n, self.dim - self.params.m, q, k)?;
        let q_t = self.params.apply_q(q);
        let mut ledger = CostLedger::default();
        let cands = self.walk(&q_t, p, &mut ledger)?;
        Ok(finish_search(ds, q, &cands, k, ledger))
    }

    /// Layout: `HKIX`, version, L u32, dim u32, n u64, L widths (coarsest
    /// first, u64), L centroid blocks, L parent blocks (level 1 to L, each
    /// length-prefixed), transform parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(HKIX_MAGIC, INDEX_VERSION);
        enc.u32(self.levels.len() as u32);
        enc.u32(self.dim as u32);
        enc.usize(self.n);
        for l in &self.levels {
            enc.usize(l.width());
        }
        for l in &self.levels {
            enc.f64s(&l.centroids);
        }
        for l in &self.levels {
            enc.ids(&l.parents);
        }
        encode_params(&mut enc, &self.params);
        enc.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(buf, HKIX_MAGIC, INDEX_VERSION)?;
        let depth = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let n = dec.usize()?;
        if depth == 0 {
            return Err(MipsError::Format("HKIX index has no levels".into()));
        }
        let widths = (0..depth)
            .map(|_| dec.usize())
            .collect::<Result<Vec<_>>>()?;
        let centroids = widths
            .iter()
            .map(|&w| dec.f64s(w.checked_mul(dim).ok_or_else(overflow)?))
            .collect::<Result<Vec<_>>>()?;
        let parents = (0..depth).map(|_| dec.ids()).collect::<Result<Vec<_>>>()?;
        let params = decode_params(&mut dec)?;
        dec.finish()?;

        let mut levels = Vec::with_capacity(depth);
        for (l, (centroids, parents)) in centroids.into_iter().zip(parents).enumerate() {
            let finer = if l + 1 == depth { n } else { widths[l + 1] };
            if parents.len() != finer || parents.iter().any(|&a| a >= widths[l]) {
                return Err(MipsError::Format(format!(
                    "inconsistent parents at level {l}"
                )));
            }
            levels.push(Level {
                children: inverted_lists(&parents, widths[l]),
                parents,
                centroids,
            });
        }
        Ok(HierIndex {
            dim,
            n,
            levels,
            params,
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
