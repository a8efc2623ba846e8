//! Reductions of inner-product search to cosine search (asymmetric P/Q
//! augmentation) and to Euclidean nearest-neighbour search (constant-norm
//! augmentation).

use rayon::prelude::*;

use crate::error::{MipsError, Result};
use crate::linalg::{dot, sq_norm};
use crate::vecstore::Dataset;

pub const DEFAULT_U: f64 = 0.83;
pub const DEFAULT_M: usize = 3;

/// Parameters of the cosine-search reduction: data are scaled by `scale` so
/// the largest norm becomes `u`, then `m` norm-dependent components are
/// appended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McssTransformParams {
    pub u: f64,
    pub m: usize,
    pub scale: f64,
}

impl McssTransformParams {
    pub fn new(u: f64, m: usize, scale: f64) -> Result<Self> {
        check_u_m(u, m)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(MipsError::arg(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(McssTransformParams { u, m, scale })
    }

    /// Fits `scale = u / max_i ||x_i||`.
    pub fn fit(ds: &Dataset, u: f64, m: usize) -> Result<Self> {
        check_u_m(u, m)?;
        let max_norm = max_norm(ds);
        if max_norm == 0.0 {
            return Err(MipsError::Degenerate("every data vector is zero".into()));
        }
        Ok(McssTransformParams {
            u,
            m,
            scale: u / max_norm,
        })
    }

    pub fn output_dim(&self, d: usize) -> usize {
        d + self.m
    }

    /// `P(s·x) = [s·x, 1/2 − ‖s·x‖², 1/2 − ‖s·x‖⁴, …, 1/2 − ‖s·x‖^(2^m)]`.
    pub fn apply_p(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len() + self.m);
        self.apply_p_into(x, &mut out);
        out
    }

    fn apply_p_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(x.iter().map(|v| v * self.scale));
        let mut power = sq_norm(&out[out.len() - x.len()..]);
        for _ in 0..self.m {
            out.push(0.5 - power);
            power *= power;
        }
    }

    /// `Q(q) = [q, 0, …, 0]`; the query is not rescaled.
    pub fn apply_q(&self, q: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(q.len() + self.m);
        out.extend_from_slice(q);
        out.resize(q.len() + self.m, 0.0);
        out
    }

    /// The exact value `‖P(x)‖²` should take: `m/4 + ‖s·x‖^(2^(m+1))`.
    pub fn predicted_sq_norm(&self, x: &[f64]) -> f64 {
        let r2 = sq_norm(x) * self.scale * self.scale;
        self.m as f64 / 4.0 + r2.powi(1 << self.m)
    }
}

fn check_u_m(u: f64, m: usize) -> Result<()> {
    if !(u > 0.0 && u < 1.0) {
        return Err(MipsError::arg(format!("U must lie in (0, 1), got {u}")));
    }
    if m == 0 {
        return Err(MipsError::arg("m must be at least 1"));
    }
    if m > 16 {
        return Err(MipsError::arg(format!("m = {m} is unreasonably large")));
    }
    Ok(())
}

pub fn max_norm(ds: &Dataset) -> f64 {
    ds.rows().map(sq_norm).fold(0.0, f64::max).sqrt()
}

/// P-mapped copy of a dataset, `n × (d + m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedDataset {
    params: McssTransformParams,
    source_dim: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TransformedDataset {
    pub fn new(ds: &Dataset, params: McssTransformParams) -> Self {
        let d = ds.d();
        let dim = params.output_dim(d);
        let rows: Vec<Vec<f64>> = (0..ds.n())
            .into_par_iter()
            .map(|i| params.apply_p(ds.row(i)))
            .collect();
        let mut data = Vec::with_capacity(ds.n() * dim);
        for r in rows {
            data.extend_from_slice(&r);
        }
        TransformedDataset {
            params,
            source_dim: d,
            dim,
            data,
        }
    }

    /// Fits the parameters on `ds` and applies P to every row.
    pub fn fit(ds: &Dataset, u: f64, m: usize) -> Result<Self> {
        Ok(Self::new(ds, McssTransformParams::fit(ds, u, m)?))
    }

    /// Wraps rows that are already in the augmented space (tests and
    /// hierarchical levels).
    pub fn from_raw(
        params: McssTransformParams,
        source_dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let dim = params.output_dim(source_dim);
        if data.is_empty() || data.len() % dim != 0 {
            return Err(MipsError::arg(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(TransformedDataset {
            params,
            source_dim,
            dim,
            data,
        })
    }

    pub fn params(&self) -> &McssTransformParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn apply_q(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.source_dim {
            return Err(MipsError::Dimension {
                expected: self.source_dim,
                got: q.len(),
            });
        }
        Ok(self.params.apply_q(q))
    }
}

/// Constant-norm augmentation: row `x` becomes `[x, sqrt(φ² − ‖x‖²)]` with
/// `φ = max ‖x_i‖`; queries become `[q, 0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnsTransformParams {
    /// `φ²`, kept exactly so the longest row gets a zero extra coordinate.
    pub phi_sq: f64,
}

impl NnsTransformParams {
    pub fn phi(&self) -> f64 {
        self.phi_sq.sqrt()
    }

    pub fn augment_data(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len() + 1);
        out.extend_from_slice(x);
        out.push((self.phi_sq - sq_norm(x)).max(0.0).sqrt());
        out
    }

    pub fn augment_query(&self, q: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(q.len() + 1);
        out.extend_from_slice(q);
        out.push(0.0);
        out
    }
}

pub fn fit_apply_nns(ds: &Dataset) -> Result<(NnsTransformParams, Dataset)> {
    let phi_sq = ds.rows().map(sq_norm).fold(0.0, f64::max);
    if phi_sq == 0.0 {
        return Err(MipsError::Degenerate("every data vector is zero".into()));
    }
    let params = NnsTransformParams { phi_sq };
    let mut data = Vec::with_capacity(ds.n() * (ds.d() + 1));
    for row in ds.rows() {
        data.extend(params.augment_data(row));
    }
    Ok((params, Dataset::from_f64(ds.d() + 1, data)?))
}

/// `Q(q)·P(x)`; with the query unscaled this equals `scale · (q·x)`.
pub fn transformed_score(q_t: &[f64], p_x: &[f64]) -> f64 {
    dot(q_t, p_x)
}
