//! Model parameters, per-sample design matrices, and covariance assembly.
//!
//! The mean surface is `a(t)^T Theta u(z)` over a tensor-product spline
//! basis; the covariance of the latent curves at covariate `z` is
//! `b(t)^T C(z) C(z)^T b(t')` where each entry of the m-by-r factor `C(z)`
//! is a spline in `z`. Stacking the per-entry spline coefficients gives the
//! (m q)-by-r coefficient matrix whose columns are penalized and optimized.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{kron_vec, DomainPolicy, SplineBasis};
use crate::error::{Error, Result};

/// The four spline bases of a model.
///
/// `mean_t`/`mean_z` span the mean surface, `cov_t` (orthonormalized) and
/// `cov_z` span the covariance factor. Immutable once built.
#[derive(Clone, Debug)]
pub struct ModelBases {
    pub mean_t: SplineBasis,
    pub mean_z: SplineBasis,
    pub cov_t: SplineBasis,
    pub cov_z: SplineBasis,
}

impl ModelBases {
    /// Build cubic bases of the given sizes on the given domains and
    /// orthonormalize the covariance-time basis.
    pub fn build(
        mean_t_size: usize,
        mean_z_size: usize,
        cov_t_size: usize,
        cov_z_size: usize,
        degree: usize,
        t_domain: (f64, f64),
        z_domain: (f64, f64),
    ) -> Result<Self> {
        let interior = |size: usize, name: &str| -> Result<usize> {
            if size < degree + 1 {
                return Err(Error::invalid(format!(
                    "{name} basis size {size} must be at least degree + 1 = {}",
                    degree + 1
                )));
            }
            Ok(size - degree - 1)
        };
        let mean_t = SplineBasis::uniform(degree, interior(mean_t_size, "mean-time")?, t_domain)?;
        let mean_z =
            SplineBasis::uniform(degree, interior(mean_z_size, "mean-covariate")?, z_domain)?;
        let cov_t_raw =
            SplineBasis::uniform(degree, interior(cov_t_size, "covariance-time")?, t_domain)?;
        let cov_t = cov_t_raw.orthonormalized(cov_t_raw.default_quad_order())?;
        let cov_z = SplineBasis::uniform(
            degree,
            interior(cov_z_size, "covariance-covariate")?,
            z_domain,
        )?;
        Ok(ModelBases {
            mean_t,
            mean_z,
            cov_t,
            cov_z,
        })
    }

    /// Length of the vectorized mean coefficients (l * p).
    pub fn mean_dim(&self) -> usize {
        self.mean_t.len() * self.mean_z.len()
    }

    /// Rows of the factor coefficient matrix (m * q).
    pub fn factor_rows(&self) -> usize {
        self.cov_t.len() * self.cov_z.len()
    }
}

/// Fitted or in-progress model parameters.
///
/// The noise variance is stored on the log scale so unconstrained descent
/// keeps it positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Vectorized mean coefficients, row-major over (time, covariate).
    pub mean_coefs: DVector<f64>,
    /// Factor coefficients, (m q) x r; column j stacks the m per-row
    /// covariate-spline coefficient blocks of factor column j.
    pub factor_coefs: DMatrix<f64>,
    /// log of the noise variance.
    pub log_noise_var: f64,
}

impl ModelParams {
    pub fn zeros(bases: &ModelBases, rank: usize, noise_var: f64) -> Result<Self> {
        if noise_var <= 0.0 || !noise_var.is_finite() {
            return Err(Error::invalid("noise variance must be positive"));
        }
        Ok(ModelParams {
            mean_coefs: DVector::zeros(bases.mean_dim()),
            factor_coefs: DMatrix::zeros(bases.factor_rows(), rank),
            log_noise_var: noise_var.ln(),
        })
    }

    pub fn rank(&self) -> usize {
        self.factor_coefs.ncols()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    pub fn validate(&self, bases: &ModelBases) -> Result<()> {
        if self.mean_coefs.len() != bases.mean_dim() {
            return Err(Error::invalid(format!(
                "mean coefficient length {} does not match basis dimension {}",
                self.mean_coefs.len(),
                bases.mean_dim()
            )));
        }
        if self.factor_coefs.nrows() != bases.factor_rows() {
            return Err(Error::invalid(format!(
                "factor coefficient rows {} do not match basis dimension {}",
                self.factor_coefs.nrows(),
                bases.factor_rows()
            )));
        }
        if !self.factor_coefs.iter().all(|v| v.is_finite())
            || !self.mean_coefs.iter().all(|v| v.is_finite())
            || !self.log_noise_var.is_finite()
        {
            return Err(Error::numerical("non-finite model parameters"));
        }
        Ok(())
    }
}

/// One observed curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub id: String,
    /// Observation times, sorted nondecreasing.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Scalar covariate shared by the whole curve.
    pub covariate: f64,
    /// Optional per-observation measurement error standard deviations.
    pub noise_sd: Option<Vec<f64>>,
}

impl FunctionalSample {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(Error::data(format!(
                "sample {}: {} times but {} values",
                self.id,
                self.times.len(),
                self.values.len()
            )));
        }
        if self.times.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::data(format!(
                "sample {}: times not sorted nondecreasing",
                self.id
            )));
        }
        if !self.covariate.is_finite() {
            return Err(Error::data(format!(
                "sample {}: covariate not finite",
                self.id
            )));
        }
        if let Some(sd) = &self.noise_sd {
            if sd.len() != self.times.len() {
                return Err(Error::data(format!(
                    "sample {}: {} noise sds but {} observations",
                    self.id,
                    sd.len(),
                    self.times.len()
                )));
            }
            if sd.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(Error::data(format!(
                    "sample {}: noise sds must be positive and finite",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Stacked basis evaluations for one sample: `b` holds the covariance-time
/// rows, `h` the tensor-product mean rows.
#[derive(Clone, Debug)]
pub struct DesignPair {
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

/// Covariance factor `C(z)` given the covariate-basis values `v = v(z)`:
/// entry (i, j) is `v^T gamma_block(i, j)`.
pub fn factor_at(factor_coefs: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let q = v.len();
    let m = factor_coefs.nrows() / q;
    let r = factor_coefs.ncols();
    let mut c = DMatrix::zeros(m, r);
    for j in 0..r {
        let col = factor_coefs.column(j);
        for i in 0..m {
            let mut acc = 0.0;
            for k in 0..q {
                acc += v[k] * col[i * q + k];
            }
            c[(i, j)] = acc;
        }
    }
    c
}

/// Covariance factor at covariate `z`; m x r.
pub fn c_matrix(params: &ModelParams, z: f64, cov_z: &SplineBasis) -> Result<DMatrix<f64>> {
    let v = cov_z.eval(z)?;
    if cov_z.len() * (params.factor_coefs.nrows() / cov_z.len()) != params.factor_coefs.nrows() {
        return Err(Error::invalid(
            "factor coefficient rows not divisible by covariate basis size",
        ));
    }
    Ok(factor_at(&params.factor_coefs, &v))
}

/// Coefficient-space covariance `Sigma(z) = C(z) C(z)^T`; m x m, PSD with
/// rank at most r by construction.
pub fn sigma_of_z(params: &ModelParams, z: f64, cov_z: &SplineBasis) -> Result<DMatrix<f64>> {
    let c = c_matrix(params, z, cov_z)?;
    Ok(&c * c.transpose())
}

/// Design matrices for a sample; observations outside the basis domains are
/// rejected with their index.
pub fn design(sample: &FunctionalSample, bases: &ModelBases) -> Result<DesignPair> {
    sample.validate()?;
    let m_n = sample.len();
    let mut b = DMatrix::zeros(m_n, bases.cov_t.len());
    let mut h = DMatrix::zeros(m_n, bases.mean_dim());
    let u = bases
        .mean_z
        .eval(sample.covariate)
        .map_err(|e| Error::SampleRejected {
            id: sample.id.clone(),
            index: 0,
            reason: format!("covariate: {e}"),
        })?;
    for (i, &t) in sample.times.iter().enumerate() {
        let b_row = bases.cov_t.eval(t).map_err(|e| Error::SampleRejected {
            id: sample.id.clone(),
            index: i,
            reason: e.to_string(),
        })?;
        let a_row = bases.mean_t.eval(t).map_err(|e| Error::SampleRejected {
            id: sample.id.clone(),
            index: i,
            reason: e.to_string(),
        })?;
        b.row_mut(i).copy_from(&b_row.transpose());
        h.row_mut(i).copy_from(&kron_vec(&a_row, &u).transpose());
    }
    Ok(DesignPair { b, h })
}

/// Dense marginal covariance of a sample's observation vector. When the
/// sample carries measurement errors the noise term is their squared
/// diagonal instead of the common noise variance.
pub fn marginal_cov(
    sample: &FunctionalSample,
    params: &ModelParams,
    bases: &ModelBases,
) -> Result<DMatrix<f64>> {
    let pair = design(sample, bases)?;
    let c = c_matrix(params, sample.covariate, &bases.cov_z)?;
    let bc = &pair.b * &c;
    let mut cov = &bc * bc.transpose();
    match &sample.noise_sd {
        Some(sd) => {
            for (i, s) in sd.iter().enumerate() {
                cov[(i, i)] += s * s;
            }
        }
        None => {
            let nv = params.noise_var();
            for i in 0..sample.len() {
                cov[(i, i)] += nv;
            }
        }
    }
    Ok(cov)
}

/// Eigenpairs of the coefficient-space covariance at `z`, largest first.
///
/// Returns the eigenvalues and the m x r matrix of eigenvectors with the
/// sign convention that each vector's largest-magnitude entry is positive.
/// Computed through the SVD of the factor so the result is PSD and rank-r
/// by construction.
pub fn eigen_at(
    params: &ModelParams,
    z: f64,
    cov_z: &SplineBasis,
    policy: DomainPolicy,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let v = cov_z.eval_with(z, policy)?;
    let c = factor_at(&params.factor_coefs, &v);
    eigen_of_factor(&c)
}

/// Eigenpairs of `C C^T` from the SVD of `C`.
pub fn eigen_of_factor(c: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let r = c.ncols();
    let m = c.nrows();
    let svd = c.clone().svd(true, false);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::numerical("SVD did not produce singular vectors"))?;
    // Singular values arrive sorted nonincreasing.
    let mut evals = DVector::zeros(r);
    let mut vectors = DMatrix::zeros(m, r);
    for j in 0..r.min(svd.singular_values.len()) {
        evals[j] = svd.singular_values[j] * svd.singular_values[j];
        vectors.column_mut(j).copy_from(&u.column(j));
    }
    for j in 0..r {
        let col = vectors.column(j);
        let mut max_idx = 0;
        let mut max_abs = 0.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_idx = i;
            }
        }
        if vectors[(max_idx, j)] < 0.0 {
            for i in 0..m {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
    Ok((evals, vectors))
}

/// Eigenvalues and eigenfunction values on a time grid at fixed `z`.
///
/// Row j of the function matrix is the j-th eigenfunction evaluated over
/// `t_grid`; the functions are orthonormal in L2 because the time basis is
/// orthonormal and the eigenvectors are orthonormal.
pub fn eigenfunctions_at(
    params: &ModelParams,
    z: f64,
    bases: &ModelBases,
    t_grid: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (evals, vectors) = eigen_at(params, z, &bases.cov_z, DomainPolicy::Strict)?;
    let r = params.rank();
    let mut funcs = DMatrix::zeros(r, t_grid.len());
    for (g, &t) in t_grid.iter().enumerate() {
        let b = bases.cov_t.eval(t)?;
        for j in 0..r {
            funcs[(j, g)] = vectors.column(j).dot(&b);
        }
    }
    Ok((evals, funcs))
}

/// One covariate slice of an eigenfunction surface sweep.
#[derive(Clone, Debug)]
pub struct EigenSlice {
    pub z: f64,
    pub eigenvalues: DVector<f64>,
    /// m x r eigenvector coefficients, sign-aligned to the previous slice.
    pub vectors: DMatrix<f64>,
}

/// Eigendecompositions over a covariate sweep with signs aligned between
/// adjacent slices so the eigenfunction surfaces vary continuously.
pub fn eigen_surface(
    params: &ModelParams,
    cov_z: &SplineBasis,
    z_grid: &[f64],
) -> Result<Vec<EigenSlice>> {
    let mut slices: Vec<EigenSlice> = Vec::with_capacity(z_grid.len());
    for &z in z_grid {
        let (evals, mut vectors) = eigen_at(params, z, cov_z, DomainPolicy::Strict)?;
        if let Some(prev) = slices.last() {
            for j in 0..vectors.ncols() {
                if vectors.column(j).dot(&prev.vectors.column(j)) < 0.0 {
                    vectors.column_mut(j).neg_mut();
                }
            }
        }
        slices.push(EigenSlice {
            z,
            eigenvalues: evals,
            vectors,
        });
    }
    Ok(slices)
}
