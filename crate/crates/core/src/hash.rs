//! Signed-random-projection and winner-take-all hashing baselines over
//! P-transformed data, with exact-code bucket tables and union-of-buckets
//! candidate generation.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::codec::{read_file, Decoder, Encoder};
use crate::error::{MipsError, Result};
use crate::exact::finish_search;
use crate::kmeans::{check_query, decode_params, encode_params, overflow, INDEX_VERSION};
use crate::linalg::{dot, normalize};
use crate::metrics::{CostLedger, SearchResult};
use crate::transform::{McssTransformParams, TransformedDataset};
use crate::vecstore::{rng_from_seed, Dataset};

pub const SRPI_MAGIC: &[u8; 4] = b"SRPI";
pub const WTAI_MAGIC: &[u8; 4] = b"WTAI";

type Table = HashMap<u64, Vec<usize>>;

/// `n_tables × p_bits` unit random directions; bit `b` of a code is set when
/// the projection onto direction `b` is nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SrpHasher {
    dim: usize,
    n_tables: usize,
    p_bits: usize,
    projections: Vec<f64>,
}

impl SrpHasher {
    pub fn new(dim: usize, n_tables: usize, p_bits: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_tables == 0 {
            return Err(MipsError::arg(
                "dimension and table count must be at least 1",
            ));
        }
        if !(1..=64).contains(&p_bits) {
            return Err(MipsError::arg(format!(
                "p_bits must lie in 1..=64, got {p_bits}"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let mut projections = Vec::with_capacity(n_tables * p_bits * dim);
        for _ in 0..n_tables * p_bits {
            let mut r: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            normalize(&mut r);
            projections.extend_from_slice(&r);
        }
        Ok(SrpHasher {
            dim,
            n_tables,
            p_bits,
            projections,
        })
    }

    pub fn n_tables(&self) -> usize {
        self.n_tables
    }

    pub fn p_bits(&self) -> usize {
        self.p_bits
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn projection(&self, table: usize, bit: usize) -> &[f64] {
        let off = (table * self.p_bits + bit) * self.dim;
        &self.projections[off..off + self.dim]
    }

    pub fn code(&self, table: usize, x: &[f64]) -> u64 {
        (0..self.p_bits).fold(0u64, |code, b| {
            code | (((dot(self.projection(table, b), x) >= 0.0) as u64) << b)
        })
    }
}

/// Winner-take-all hashing: each table concatenates `p_perms` symbols, a
/// symbol being the position of the largest value among the first
/// `prefix_k` coordinates of a random permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct WtaHasher {
    dim: usize,
    n_tables: usize,
    p_perms: usize,
    prefix_k: usize,
    /// Only the permutation prefixes are kept.
    prefixes: Vec<usize>,
}

fn symbol_bits(prefix_k: usize) -> u32 {
    usize::BITS - (prefix_k - 1).leading_zeros()
}

impl WtaHasher {
    pub fn new(
        dim: usize,
        n_tables: usize,
        p_perms: usize,
        prefix_k: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || n_tables == 0 || p_perms == 0 || prefix_k == 0 {
            return Err(MipsError::arg("WTA counts must be at least 1"));
        }
        if prefix_k > dim {
            return Err(MipsError::arg(format!(
                "prefix length {prefix_k} exceeds dimension {dim}"
            )));
        }
        let bits = p_perms as u64 * symbol_bits(prefix_k) as u64;
        if bits > 64 {
            return Err(MipsError::arg(format!(
                "{p_perms} symbols of {} bits do not fit in 64 bits",
                symbol_bits(prefix_k)
            )));
        }
        let mut rng = rng_from_seed(seed);
        let mut prefixes = Vec::with_capacity(n_tables * p_perms * prefix_k);
        let mut perm: Vec<usize> = (0..dim).collect();
        for _ in 0..n_tables * p_perms {
            perm.shuffle(&mut rng);
            prefixes.extend_from_slice(&perm[..prefix_k]);
        }
        Ok(WtaHasher {
            dim,
            n_tables,
            p_perms,
            prefix_k,
            prefixes,
        })
    }

    /// Hasher with caller-supplied prefixes (`n_tables · p_perms` of them).
    pub fn from_prefixes(
        dim: usize,
        n_tables: usize,
        p_perms: usize,
        prefix_k: usize,
        prefixes: Vec<usize>,
    ) -> Result<Self> {
        if prefixes.len() != n_tables * p_perms * prefix_k || prefixes.iter().any(|&i| i >= dim) {
            return Err(MipsError::arg(
                "permutation prefixes do not match the parameters",
            ));
        }
        if prefix_k == 0 || p_perms as u64 * symbol_bits(prefix_k) as u64 > 64 {
            return Err(MipsError::arg("invalid WTA code width"));
        }
        Ok(WtaHasher {
            dim,
            n_tables,
            p_perms,
            prefix_k,
            prefixes,
        })
    }

    pub fn n_tables(&self) -> usize {
        self.n_tables
    }

    pub fn p_perms(&self) -> usize {
        self.p_perms
    }

    pub fn prefix_k(&self) -> usize {
        self.prefix_k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prefix(&self, table: usize, perm: usize) -> &[usize] {
        let off = (table * self.p_perms + perm) * self.prefix_k;
        &self.prefixes[off..off + self.prefix_k]
    }

    /// Position of the maximum within the prefix, smallest position on ties.
    pub fn symbol(&self, table: usize, perm: usize, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (pos, &i) in self.prefix(table, perm).iter().enumerate() {
            if x[i] > best_v {
                best_v = x[i];
                best = pos;
            }
        }
        best
    }

    pub fn code(&self, table: usize, x: &[f64]) -> u64 {
        let bits = symbol_bits(self.prefix_k);
        (0..self.p_perms).fold(0u64, |code, j| {
            (code << bits) | self.symbol(table, j, x) as u64
        })
    }
}

fn build_tables(
    n: usize,
    n_tables: usize,
    code: impl Fn(usize, usize) -> u64 + Sync,
) -> Vec<Table> {
    let codes: Vec<Vec<u64>> = (0..n)
        .into_par_iter()
        .map(|j| (0..n_tables).map(|t| code(t, j)).collect())
        .collect();
    let mut tables = vec![Table::new(); n_tables];
    for (j, cs) in codes.iter().enumerate() {
        for (t, &c) in cs.iter().enumerate() {
            tables[t].entry(c).or_default().push(j);
        }
    }
    tables
}

fn union_of_buckets(tables: &[Table], code: impl Fn(usize) -> u64) -> Vec<usize> {
    let mut out = Vec::new();
    for (t, table) in tables.iter().enumerate() {
        if let Some(ids) = table.get(&code(t)) {
            out.extend_from_slice(ids);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn encode_tables(enc: &mut Encoder, tables: &[Table]) {
    for table in tables {
        let mut keys: Vec<&u64> = table.keys().collect();
        keys.sort_unstable();
        enc.usize(keys.len());
        for k in keys {
            enc.u64(*k);
            enc.ids(&table[k]);
        }
    }
}

fn decode_tables(dec: &mut Decoder<'_>, n_tables: usize, n: usize) -> Result<Vec<Table>> {
    let mut tables = Vec::with_capacity(n_tables);
    for _ in 0..n_tables {
        let buckets = dec.usize()?;
        let mut table = Table::with_capacity(buckets.min(n));
        for _ in 0..buckets {
            let code = dec.u64()?;
            let ids = dec.ids()?;
            if ids.iter().any(|&i| i >= n) {
                return Err(MipsError::Format("bucket id out of range".into()));
            }
            table.insert(code, ids);
        }
        tables.push(table);
    }
    Ok(tables)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrpIndex {
    hasher: SrpHasher,
    tables: Vec<Table>,
    params: McssTransformParams,
    n: usize,
}

impl SrpIndex {
    pub fn build(
        tds: &TransformedDataset,
        n_tables: usize,
        p_bits: usize,
        seed: u64,
    ) -> Result<Self> {
        let hasher = SrpHasher::new(tds.dim(), n_tables, p_bits, seed)?;
        let tables = build_tables(tds.n(), n_tables, |t, j| hasher.code(t, tds.row(j)));
        Ok(SrpIndex {
            hasher,
            tables,
            params: *tds.params(),
            n: tds.n(),
        })
    }

    pub fn hasher(&self) -> &SrpHasher {
        &self.hasher
    }

    pub fn table(&self, t: usize) -> &HashMap<u64, Vec<usize>> {
        &self.tables[t]
    }

    pub fn params(&self) -> &McssTransformParams {
        &self.params
    }

    /// Hashing cost per query: one dot product per projection.
    pub fn hash_cost(&self) -> f64 {
        (self.hasher.n_tables * self.hasher.p_bits) as f64
    }

    pub fn candidates(&self, q_t: &[f64], ledger: &mut CostLedger) -> Result<Vec<usize>> {
        if q_t.len() != self.hasher.dim {
            return Err(MipsError::Dimension {
                expected: self.hasher.dim,
                got: q_t.len(),
            });
        }
        ledger.add_hashing(self.hash_cost());
        Ok(union_of_buckets(&self.tables, |t| self.hasher.code(t, q_t)))
    }

    /// Cost: `n_tables · p_bits + |candidates|`.
    pub fn search(&self, ds: &Dataset, q: &[f64], k: usize) -> Result<SearchResult> {
        check_query(ds, self.n, self.hasher.dim - self.params.m, q, k)?;
        let q_t = self.params.apply_q(q);
        let mut ledger = CostLedger::default();
        let cands = self.candidates(&q_t, &mut ledger)?;
        Ok(finish_search(ds, q, &cands, k, ledger))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.hasher;
        let mut enc = Encoder::new(SRPI_MAGIC, INDEX_VERSION);
        enc.u32(h.n_tables as u32);
        enc.u32(h.p_bits as u32);
        enc.u32(h.dim as u32);
        enc.usize(self.n);
        encode_params(&mut enc, &self.params);
        enc.f64s(&h.projections);
        encode_tables(&mut enc, &self.tables);
        enc.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(buf, SRPI_MAGIC, INDEX_VERSION)?;
        let n_tables = dec.u32()? as usize;
        let p_bits = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let n = dec.usize()?;
        let params = decode_params(&mut dec)?;
        if n_tables == 0 || !(1..=64).contains(&p_bits) || dim <= params.m {
            return Err(MipsError::Format("bad SRPI header".into()));
        }
        let count = n_tables
            .checked_mul(p_bits)
            .and_then(|c| c.checked_mul(dim))
            .ok_or_else(overflow)?;
        let projections = dec.f64s(count)?;
        let tables = decode_tables(&mut dec, n_tables, n)?;
        dec.finish()?;
        Ok(SrpIndex {
            hasher: SrpHasher {
                dim,
                n_tables,
                p_bits,
                projections,
            },
            tables,
            params,
            n,
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

/// Which dimension divides the WTA prefix length in the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WtaCostDim {
    /// The dimension of the hashed (augmented) vectors, `d + m`.
    #[default]
    Hashed,
    /// The original data dimension `d`.
    Original,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WtaIndex {
    hasher: WtaHasher,
    tables: Vec<Table>,
    params: McssTransformParams,
    n: usize,
    cost_dim: WtaCostDim,
}

impl WtaIndex {
    pub fn build(
        tds: &TransformedDataset,
        n_tables: usize,
        p_perms: usize,
        prefix_k: usize,
        seed: u64,
    ) -> Result<Self> {
        let hasher = WtaHasher::new(tds.dim(), n_tables, p_perms, prefix_k, seed)?;
        let tables = build_tables(tds.n(), n_tables, |t, j| hasher.code(t, tds.row(j)));
        Ok(WtaIndex {
            hasher,
            tables,
            params: *tds.params(),
            n: tds.n(),
            cost_dim: WtaCostDim::Hashed,
        })
    }

    pub fn with_cost_dim(mut self, cost_dim: WtaCostDim) -> Self {
        self.cost_dim = cost_dim;
        self
    }

    pub fn hasher(&self) -> &WtaHasher {
        &self.hasher
    }

    pub fn table(&self, t: usize) -> &HashMap<u64, Vec<usize>> {
        &self.tables[t]
    }

    pub fn params(&self) -> &McssTransformParams {
        &self.params
    }

    pub fn cost_dim(&self) -> WtaCostDim {
        self.cost_dim
    }

    /// `n_tables · p_perms · prefix_k / dim` dot-product equivalents.
    pub fn hash_cost(&self) -> f64 {
        let h = &self.hasher;
        let dim = match self.cost_dim {
            WtaCostDim::Hashed => h.dim,
            WtaCostDim::Original => h.dim - self.params.m,
        };
        (h.n_tables * h.p_perms * h.prefix_k) as f64 / dim as f64
    }

    pub fn candidates(&self, q_t: &[f64], ledger: &mut CostLedger) -> Result<Vec<usize>> {
        if q_t.len() != self.hasher.dim {
            return Err(MipsError::Dimension {
                expected: self.hasher.dim,
                got: q_t.len(),
            });
        }
        ledger.add_hashing(self.hash_cost());
        Ok(union_of_buckets(&self.tables, |t| self.hasher.code(t, q_t)))
    }

    /// Cost: `n_tables · p_perms · prefix_k / dim + |candidates|`.
    pub fn search(&self, ds: &Dataset, q: &[f64], k: usize) -> Result<SearchResult> {
        check_query(ds, self.n, self.hasher.dim - self.params.m, q, k)?;
        let q_t = self.params.apply_q(q);
        let mut ledger = CostLedger::default();
        let cands = self.candidates(&q_t, &mut ledger)?;
        Ok(finish_search(ds, q, &cands, k, ledger))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.hasher;
        let mut enc = Encoder::new(WTAI_MAGIC, INDEX_VERSION);
        enc.u32(h.n_tables as u32);
        enc.u32(h.p_perms as u32);
        enc.u32(h.prefix_k as u32);
        enc.u32(h.dim as u32);
        enc.usize(self.n);
        enc.u8(match self.cost_dim {
            WtaCostDim::Hashed => 0,
            WtaCostDim::Original => 1,
        });
        encode_params(&mut enc, &self.params);
        for &i in &h.prefixes {
            enc.u32(i as u32);
        }
        encode_tables(&mut enc, &self.tables);
        enc.into_bytes()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(buf, WTAI_MAGIC, INDEX_VERSION)?;
        let n_tables = dec.u32()? as usize;
        let p_perms = dec.u32()? as usize;
        let prefix_k = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let n = dec.usize()?;
        let cost_dim = match dec.u8()? {
            0 => WtaCostDim::Hashed,
            1 => WtaCostDim::Original,
            other => return Err(MipsError::Format(format!("unknown WTA cost mode {other}"))),
        };
        let params = decode_params(&mut dec)?;
        if n_tables == 0 || p_perms == 0 || prefix_k == 0 || prefix_k > dim || dim <= params.m {
            return Err(MipsError::Format("bad WTAI header".into()));
        }
        let count = n_tables
            .checked_mul(p_perms)
            .and_then(|c| c.checked_mul(prefix_k))
            .ok_or_else(overflow)?;
        if count > dec.remaining() / 4 {
            return Err(MipsError::Length {
                expected: count as u64 * 4,
                found: dec.remaining() as u64,
            });
        }
        let prefixes = (0..count)
            .map(|_| dec.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let tables = decode_tables(&mut dec, n_tables, n)?;
        dec.finish()?;
        let hasher = WtaHasher::from_prefixes(dim, n_tables, p_perms, prefix_k, prefixes)
            .map_err(|e| MipsError::Format(e.to_string()))?;
        Ok(WtaIndex {
            hasher,
            tables,
            params,
            n,
            cost_dim,
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
