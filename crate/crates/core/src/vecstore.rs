//! Dense vector storage, the `MIPS` binary file format, synthetic data and
//! query corruption.
//!
//! File layout (all little-endian):
//!
//! | bytes | field                           |
//! |-------|---------------------------------|
//! | 4     | magic `MIPS`                    |
//! | 1     | version (`1`)                   |
//! | 1     | element type (`0`=f32, `1`=f64) |
//! | 8     | n, u64                          |
//! | 4     | d, u32                          |
//! | n·d·w | row-major elements              |

use std::ops::Deref;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::read_file;
use crate::error::{MipsError, Result};

pub const MAGIC: &[u8; 4] = b"MIPS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;

/// Seeded generator used for every random draw in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ElementType {
    #[default]
    F32,
    F64,
}

impl ElementType {
    pub fn width(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }

    fn code(self) -> u8 {
        match self {
            ElementType::F32 => 0,
            ElementType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ElementType::F32),
            1 => Ok(ElementType::F64),
            other => Err(MipsError::Format(format!("unknown element type {other}"))),
        }
    }

    /// Rounds `v` to the precision this type stores.
    fn quantize(self, v: f64) -> f64 {
        match self {
            ElementType::F32 => v as f32 as f64,
            ElementType::F64 => v,
        }
    }
}

/// Row-major block of `n` vectors of dimension `d`.
///
/// Elements are held as `f64`; when the element type is `F32` every value is
/// exactly representable in `f32`, so writing the block back is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct Vectors {
    n: usize,
    d: usize,
    elem: ElementType,
    data: Vec<f64>,
}

impl Vectors {
    fn new(d: usize, elem: ElementType, mut data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(MipsError::arg("dimension must be at least 1"));
        }
        if data.is_empty() || data.len() % d != 0 {
            return Err(MipsError::arg(format!(
                "{} elements do not form a nonempty set of rows of width {d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MipsError::Data(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        if elem == ElementType::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Ok(Vectors {
            n: data.len() / d,
            d,
            elem,
            data,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn element_type(&self) -> ElementType {
        self.elem
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d)
    }

    pub fn norm(&self, i: usize) -> f64 {
        crate::linalg::norm(self.row(i))
    }

    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.data.len() * self.elem.width());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.push(self.elem.code());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        match self.elem {
            ElementType::F32 => {
                for &v in &self.data {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            ElementType::F64 => {
                for &v in &self.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN {
            return Err(MipsError::Format(format!(
                "file too short for header ({} bytes)",
                buf.len()
            )));
        }
        if &buf[..4] != MAGIC {
            return Err(MipsError::Format("missing magic \"MIPS\"".into()));
        }
        if buf[4] != VERSION {
            return Err(MipsError::Format(format!("unsupported version {}", buf[4])));
        }
        let elem = ElementType::from_code(buf[5])?;
        let n = u64::from_le_bytes(buf[6..14].try_into().unwrap());
        let d = u32::from_le_bytes(buf[14..18].try_into().unwrap()) as u64;
        if n == 0 || d == 0 {
            return Err(MipsError::Format(format!("header declares n={n}, d={d}")));
        }
        let expected = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(elem.width() as u64))
            .ok_or_else(|| MipsError::Format("header sizes overflow".into()))?;
        let payload = &buf[HEADER_LEN..];
        if payload.len() as u64 != expected {
            return Err(MipsError::Length {
                expected,
                found: payload.len() as u64,
            });
        }
        let data: Vec<f64> = match elem {
            ElementType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            ElementType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Vectors::new(d as usize, elem, data)
    }

    fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| MipsError::io(path, e))
    }
}

/// The searchable collection; item ids are row indices `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset(Vectors);

/// Query vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch(Vectors);

impl Deref for Dataset {
    type Target = Vectors;
    fn deref(&self) -> &Vectors {
        &self.0
    }
}

impl Deref for QueryBatch {
    type Target = Vectors;
    fn deref(&self) -> &Vectors {
        &self.0
    }
}

macro_rules! constructors {
    ($ty:ident) => {
        impl $ty {
            pub fn from_f64(d: usize, data: Vec<f64>) -> Result<Self> {
                Vectors::new(d, ElementType::F64, data).map($ty)
            }

            pub fn from_f32(d: usize, data: Vec<f32>) -> Result<Self> {
                Vectors::new(
                    d,
                    ElementType::F32,
                    data.into_iter().map(f64::from).collect(),
                )
                .map($ty)
            }

            /// Builds from `f64` values, rounding them to `elem`'s precision.
            pub fn with_element_type(d: usize, elem: ElementType, data: Vec<f64>) -> Result<Self> {
                Vectors::new(d, elem, data).map($ty)
            }

            /// `f64` rows; all rows must share one length.
            pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
                let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
                let mut data = Vec::with_capacity(rows.len() * d);
                for r in rows {
                    let r = r.as_ref();
                    if r.len() != d {
                        return Err(MipsError::Dimension {
                            expected: d,
                            got: r.len(),
                        });
                    }
                    data.extend_from_slice(r);
                }
                Self::from_f64(d, data)
            }

            pub fn vectors(&self) -> &Vectors {
                &self.0
            }

            pub fn load(path: impl AsRef<Path>) -> Result<Self> {
                Vectors::decode(&read_file(path.as_ref())?).map($ty)
            }

            pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
                self.0.save(path.as_ref())
            }

            pub fn to_bytes(&self) -> Vec<u8> {
                self.0.encode()
            }

            pub fn from_bytes(buf: &[u8]) -> Result<Self> {
                Vectors::decode(buf).map($ty)
            }
        }
    };
}

constructors!(Dataset);
constructors!(QueryBatch);

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::load(path)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.save(path)
}

impl Dataset {
    /// Splits off the last `count` rows as queries.
    pub fn split_queries(self, count: usize) -> Result<(Dataset, QueryBatch)> {
        let Vectors { n, d, elem, data } = self.0;
        if count == 0 || count >= n {
            return Err(MipsError::arg(format!(
                "cannot split {count} queries from {n} rows"
            )));
        }
        let cut = (n - count) * d;
        let queries = data[cut..].to_vec();
        let mut data = data;
        data.truncate(cut);
        Ok((
            Dataset(Vectors::new(d, elem, data)?),
            QueryBatch(Vectors::new(d, elem, queries)?),
        ))
    }

    /// Copies the given rows into a query batch.
    pub fn select_queries(&self, ids: &[usize]) -> Result<QueryBatch> {
        let mut data = Vec::with_capacity(ids.len() * self.d());
        for &i in ids {
            if i >= self.n() {
                return Err(MipsError::arg(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        Vectors::new(self.d(), self.element_type(), data).map(QueryBatch)
    }

    /// `count` distinct rows chosen uniformly at random (capped at `n`).
    pub fn sample_queries(&self, count: usize, seed: u64) -> Result<QueryBatch> {
        let count = count.min(self.n());
        let mut rng = rng_from_seed(seed);
        let mut ids = index::sample(&mut rng, self.n(), count).into_vec();
        ids.sort_unstable();
        self.select_queries(&ids)
    }
}

impl QueryBatch {
    /// First `count` queries (all of them if fewer).
    pub fn truncated(&self, count: usize) -> QueryBatch {
        let m = count.clamp(1, self.n());
        QueryBatch(Vectors {
            n: m,
            d: self.d(),
            elem: self.element_type(),
            data: self.as_slice()[..m * self.d()].to_vec(),
        })
    }
}

/// Gaussian mixture: `n_clusters` centers with standard-normal components,
/// each point a uniformly chosen center plus isotropic noise of standard
/// deviation `spread`. Output is `f32`.
pub fn gen_synthetic(
    n: usize,
    d: usize,
    n_clusters: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(MipsError::arg("n and d must be at least 1"));
    }
    if n_clusters == 0 || n_clusters > n {
        return Err(MipsError::arg(format!(
            "n_clusters must lie in 1..={n}, got {n_clusters}"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(MipsError::arg(format!(
            "spread must be positive, got {spread}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let centers: Vec<f64> = (0..n_clusters * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.random_range(0..n_clusters);
        let center = &centers[c * d..(c + 1) * d];
        for &mu in center {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mu + spread * z);
        }
    }
    Dataset::with_element_type(d, ElementType::F32, data)
}

/// Adds i.i.d. `N(0, sigma²)` noise to every component.
pub fn corrupt_queries(q: &QueryBatch, sigma: f64, seed: u64) -> Result<QueryBatch> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(MipsError::arg(format!(
            "sigma must be a finite nonnegative number, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(q.clone());
    }
    let elem = q.element_type();
    let mut rng = rng_from_seed(seed);
    let data = q
        .as_slice()
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            elem.quantize(v + sigma * z)
        })
        .collect();
    QueryBatch::with_element_type(q.d(), elem, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_three_file() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"MIPS");
        buf.push(1);
        buf.push(0);
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        for v in [1f32, 0., 0., 0., 1., 0.] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let ds = Dataset::from_bytes(&buf).unwrap();
        assert_eq!((ds.n(), ds.d()), (2, 3));
        assert_eq!(ds.row(1), &[0.0, 1.0, 0.0]);
        assert_eq!(ds.to_bytes(), buf);
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let ds = Dataset::from_f32(2, vec![1.0; 10]).unwrap();
        let mut buf = ds.to_bytes();
        buf[6..14].copy_from_slice(&6u64.to_le_bytes());
        assert!(matches!(
            Dataset::from_bytes(&buf),
            Err(MipsError::Length {
                expected: 48,
                found: 40
            })
        ));
    }

    #[test]
    fn bad_magic_and_nan() {
        let ds = Dataset::from_f32(1, vec![1.0]).unwrap();
        let mut buf = ds.to_bytes();
        buf[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&buf),
            Err(MipsError::Format(_))
        ));

        let mut buf = ds.to_bytes();
        buf[18..22].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(Dataset::from_bytes(&buf), Err(MipsError::Data(_))));

        let mut buf = ds.to_bytes();
        buf[5] = 7;
        assert!(matches!(
            Dataset::from_bytes(&buf),
            Err(MipsError::Format(_))
        ));
    }

    #[test]
    fn encoded_sizes() {
        let ds = Dataset::from_f32(2, vec![3.5, -1.25]).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 8);
        assert_eq!(&bytes[HEADER_LEN..HEADER_LEN + 4], &3.5f32.to_le_bytes());

        let ds = Dataset::from_f64(3, vec![0.5; 12]).unwrap();
        assert_eq!(ds.to_bytes().len() - HEADER_LEN, 4 * 3 * 8);
    }

    #[test]
    fn empty_path_is_io_error() {
        let ds = Dataset::from_f32(1, vec![1.0]).unwrap();
        assert!(matches!(save_dataset(&ds, ""), Err(MipsError::Io { .. })));
        assert!(matches!(load_dataset(""), Err(MipsError::Io { .. })));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(100, 8, 5, 0.1, 7).unwrap();
        let b = gen_synthetic(100, 8, 5, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic(100, 8, 5, 0.1, 8).unwrap());
    }

    #[test]
    fn tiny_spread_collapses_points() {
        let ds = gen_synthetic(10, 2, 1, 1e-9, 1).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let dist = crate::linalg::sq_dist(ds.row(i), ds.row(j)).sqrt();
                assert!(dist < 1e-6, "rows {i},{j} at distance {dist}");
            }
        }
    }

    #[test]
    fn synthetic_argument_errors() {
        assert!(matches!(
            gen_synthetic(10, 2, 0, 1.0, 1),
            Err(MipsError::Argument(_))
        ));
        assert!(matches!(
            gen_synthetic(10, 2, 11, 1.0, 1),
            Err(MipsError::Argument(_))
        ));
        assert!(matches!(
            gen_synthetic(10, 2, 2, 0.0, 1),
            Err(MipsError::Argument(_))
        ));
    }

    #[test]
    fn zero_noise_is_identity() {
        let q = QueryBatch::from_f32(3, vec![0.1, 0.2, 0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(corrupt_queries(&q, 0.0, 9).unwrap(), q);
        assert!(matches!(
            corrupt_queries(&q, -0.1, 9),
            Err(MipsError::Argument(_))
        ));
        let a = corrupt_queries(&q, 0.4, 3).unwrap();
        let b = corrupt_queries(&q, 0.4, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, q);
    }

    #[test]
    fn noise_sample_std() {
        let q = QueryBatch::from_f32(300, vec![0.25; 2000 * 300]).unwrap();
        let noisy = corrupt_queries(&q, 0.4, 11).unwrap();
        let diffs: Vec<f64> = noisy
            .as_slice()
            .iter()
            .zip(q.as_slice())
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.38..=0.42).contains(&std), "sample std {std}");
    }

    #[test]
    fn split_and_sample() {
        let ds = gen_synthetic(20, 3, 2, 0.5, 1).unwrap();
        let full = ds.clone();
        let (db, q) = ds.split_queries(5).unwrap();
        assert_eq!((db.n(), q.n()), (15, 5));
        assert_eq!(q.row(0), full.row(15));
        let s = full.sample_queries(4, 2).unwrap();
        assert_eq!(s, full.sample_queries(4, 2).unwrap());
        assert_eq!(s.n(), 4);
    }
}
