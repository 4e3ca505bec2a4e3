//! Fast and reference evaluation of the Gaussian negative log-likelihood
//! and its gradients.
//!
//! The marginal covariance of a curve is a rank-r update of a diagonal,
//! so the determinant lemma and the Sherman-Morrison-Woodbury identity
//! reduce every per-sample solve from the observation dimension to r.
//! Samples with per-observation measurement errors are pre-whitened by
//! their inverse standard deviations, which turns the heteroscedastic case
//! into the unit-noise form of the same formulas; the scalar-noise case
//! uses the constant weight 1/sigma^2 and is bit-identical to passing that
//! constant as a measurement error.
//!
//! The dense `*_dense` functions evaluate the same quantities by explicit
//! factorization of each marginal covariance; they are the reference
//! implementations the fast path is tested against.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{design, factor_at, FunctionalSample, ModelBases, ModelParams};
use crate::penalty::PenaltyOperator;

/// A sample with its design matrices evaluated once.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    /// Covariance-basis rows, m_n x m.
    pub b: DMatrix<f64>,
    /// Tensor mean-basis rows, m_n x (l p).
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Inverse noise variances per observation when measurement errors are
    /// supplied; `None` means the common noise variance applies.
    pub weights: Option<DVector<f64>>,
    /// Covariate-basis values v(z_n).
    pub v_row: DVector<f64>,
    pub covariate: f64,
}

impl PreparedSample {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }
}

/// A training set with designs evaluated and noise weights resolved.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<PreparedSample>,
    /// True when every sample carries measurement errors, in which case the
    /// common noise variance is not a free parameter.
    pub all_weighted: bool,
    /// Observed time and covariate ranges of the raw samples.
    pub t_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn total_obs(&self) -> usize {
        self.samples.iter().map(|s| s.n_obs()).sum()
    }
}

/// Evaluate design matrices for every sample.
pub fn prepare(samples: &[FunctionalSample], bases: &ModelBases) -> Result<Dataset> {
    let prepared: Result<Vec<PreparedSample>> = samples
        .par_iter()
        .map(|s| {
            let pair = design(s, bases)?;
            let weights = s
                .noise_sd
                .as_ref()
                .map(|sd| DVector::from_iterator(sd.len(), sd.iter().map(|v| 1.0 / (v * v))));
            Ok(PreparedSample {
                id: s.id.clone(),
                b: pair.b,
                h: pair.h,
                y: DVector::from_column_slice(&s.values),
                weights,
                v_row: bases.cov_z.eval(s.covariate)?,
                covariate: s.covariate,
            })
        })
        .collect();
    let prepared = prepared?;
    let all_weighted = !prepared.is_empty() && prepared.iter().all(|s| s.weights.is_some());
    let mut t_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut z_range = (f64::INFINITY, f64::NEG_INFINITY);
    for s in samples {
        for &t in &s.times {
            t_range.0 = t_range.0.min(t);
            t_range.1 = t_range.1.max(t);
        }
        z_range.0 = z_range.0.min(s.covariate);
        z_range.1 = z_range.1.max(s.covariate);
    }
    Ok(Dataset {
        samples: prepared,
        all_weighted,
        t_range,
        z_range,
    })
}

/// Per-sample factorization shared by the fast value and gradient paths.
///
/// All quantities live in the whitened frame: `phi` is the loading matrix
/// scaled by the square-root weights and `chol` is the lower Cholesky
/// factor of `I_r + phi^T phi`, so for scalar noise `chol` factors
/// `I_r + W_n / sigma^2` with `W_n = C_n^T B_n^T B_n C_n`.
pub struct SampleWorkspace {
    /// Whitened loading Gram `phi^T phi`, symmetric PSD.
    pub gram: DMatrix<f64>,
    /// Lower Cholesky factor of `I_r + gram`.
    pub chol: DMatrix<f64>,
    /// Loadings projected onto the whitened residual.
    pub proj: DVector<f64>,
    /// Forward solve of `proj` through `chol`.
    pub half: DVector<f64>,
    /// Whitened loadings, m_n x r.
    pub phi: DMatrix<f64>,
    /// Whitened residual.
    pub resid: DVector<f64>,
    /// Square-root weights used for the whitening.
    pub sqrt_w: DVector<f64>,
    /// log det of the sample's marginal covariance.
    pub logdet: f64,
    /// Residual quadratic form through the inverse marginal covariance.
    pub quad: f64,
}

fn chol_with_jitter(mut a: DMatrix<f64>, id: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    match nalgebra::Cholesky::new(a.clone()) {
        Some(c) => Ok(c),
        None => {
            let bump = 1e-10 * a.trace() / a.nrows() as f64;
            for i in 0..a.nrows() {
                a[(i, i)] += bump;
            }
            nalgebra::Cholesky::new(a).ok_or_else(|| {
                Error::numerical(format!(
                    "sample {id}: Cholesky of the reduced system failed even after jitter"
                ))
            })
        }
    }
}

impl SampleWorkspace {
    /// Factorize one sample at the given factor matrix, mean coefficients,
    /// and noise variance.
    pub fn build(
        sample: &PreparedSample,
        c: &DMatrix<f64>,
        mean_coefs: &DVector<f64>,
        noise_var: f64,
    ) -> Result<Self> {
        let m_n = sample.n_obs();
        let r = c.ncols();
        let sqrt_w = match &sample.weights {
            Some(w) => w.map(|v| v.sqrt()),
            None => DVector::from_element(m_n, (1.0 / noise_var).sqrt()),
        };
        let mut phi = &sample.b * c;
        let mut resid = &sample.y - &sample.h * mean_coefs;
        let mut log_inv_w = 0.0;
        for i in 0..m_n {
            phi.row_mut(i).scale_mut(sqrt_w[i]);
            resid[i] *= sqrt_w[i];
            log_inv_w -= 2.0 * sqrt_w[i].ln();
        }
        let gram = phi.transpose() * &phi;
        let mut shifted = gram.clone();
        for i in 0..r {
            shifted[(i, i)] += 1.0;
        }
        let chol = chol_with_jitter(shifted, &sample.id)?;
        let chol_l: DMatrix<f64> = chol.l();
        let proj = phi.transpose() * &resid;
        let half = chol_l
            .solve_lower_triangular(&proj)
            .ok_or_else(|| Error::numerical(format!("sample {}: singular factor", sample.id)))?;
        let mut logdet = log_inv_w;
        for i in 0..r {
            logdet += 2.0 * chol_l[(i, i)].ln();
        }
        let quad = resid.norm_squared() - half.norm_squared();
        let out = SampleWorkspace {
            gram,
            chol: chol_l,
            proj,
            half,
            phi,
            resid,
            sqrt_w,
            logdet,
            quad,
        };
        if !out.logdet.is_finite() || !out.quad.is_finite() {
            return Err(Error::numerical(format!(
                "sample {}: non-finite likelihood term",
                sample.id
            )));
        }
        Ok(out)
    }

    /// `(I + gram)^-1 proj`, via the two triangular solves.
    fn score_solve(&self) -> DVector<f64> {
        self.chol
            .transpose()
            .solve_upper_triangular(&self.half)
            .expect("triangular solve")
    }

    /// Whitened residual pushed through the inverse whitened covariance.
    fn resid_isolve(&self) -> DVector<f64> {
        &self.resid - &self.phi * self.score_solve()
    }
}

fn factor_of(sample: &PreparedSample, params: &ModelParams) -> DMatrix<f64> {
    factor_at(&params.factor_coefs, &sample.v_row)
}

/// Negative log-likelihood (up to the 2 pi constant) through the low-rank
/// factorization; per-sample cost O(m_n m r + r^3).
pub fn nll_fast(data: &Dataset, params: &ModelParams) -> Result<f64> {
    let noise_var = params.noise_var();
    let terms: Result<Vec<f64>> = data
        .samples
        .par_iter()
        .map(|s| {
            let c = factor_of(s, params);
            let ws = SampleWorkspace::build(s, &c, &params.mean_coefs, noise_var)?;
            Ok(ws.logdet + ws.quad)
        })
        .collect();
    Ok(terms?.iter().sum())
}

/// Negative log-likelihood by dense factorization of each marginal
/// covariance; the O(m_n^3) reference path.
pub fn nll_dense(data: &Dataset, params: &ModelParams) -> Result<f64> {
    let terms: Result<Vec<f64>> = data
        .samples
        .par_iter()
        .map(|s| {
            let sigma = dense_marginal(s, params);
            let chol = nalgebra::Cholesky::new(sigma).ok_or_else(|| {
                Error::numerical(format!("sample {}: marginal covariance not PD", s.id))
            })?;
            let resid = &s.y - &s.h * &params.mean_coefs;
            let solved = chol.solve(&resid);
            let l: DMatrix<f64> = chol.l();
            let mut logdet = 0.0;
            for i in 0..l.nrows() {
                logdet += 2.0 * l[(i, i)].ln();
            }
            let val = logdet + resid.dot(&solved);
            if !val.is_finite() {
                return Err(Error::numerical(format!(
                    "sample {}: non-finite likelihood term",
                    s.id
                )));
            }
            Ok(val)
        })
        .collect();
    Ok(terms?.iter().sum())
}

fn dense_marginal(sample: &PreparedSample, params: &ModelParams) -> DMatrix<f64> {
    let c = factor_of(sample, params);
    let bc = &sample.b * &c;
    let mut sigma = &bc * bc.transpose();
    match &sample.weights {
        Some(w) => {
            for i in 0..sample.n_obs() {
                sigma[(i, i)] += 1.0 / w[i];
            }
        }
        None => {
            let nv = params.noise_var();
            for i in 0..sample.n_obs() {
                sigma[(i, i)] += nv;
            }
        }
    }
    sigma
}

/// Likelihood gradients with respect to the three parameter blocks.
#[derive(Clone, Debug)]
pub struct LikelihoodGrads {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
    /// Derivative with respect to the noise variance itself (not its log);
    /// zero when every sample has measurement errors.
    pub noise_var: f64,
}

struct SampleGrads {
    value: f64,
    mean: DVector<f64>,
    d_factor: DMatrix<f64>,
    noise_var: f64,
}

fn sample_value_grads(
    sample: &PreparedSample,
    params: &ModelParams,
    noise_var: f64,
    want: GradSet,
) -> Result<SampleGrads> {
    let c = factor_of(sample, params);
    let ws = SampleWorkspace::build(sample, &c, &params.mean_coefs, noise_var)?;
    let r = c.ncols();
    let q_tilde = ws.resid_isolve();

    let mean = if want.mean {
        // -2 H^T Sigma^-1 resid, in whitened form.
        let weighted = DVector::from_fn(sample.n_obs(), |i, _| q_tilde[i] * ws.sqrt_w[i]);
        sample.h.transpose() * weighted * -2.0
    } else {
        DVector::zeros(0)
    };

    let d_factor = if want.factor {
        // d nll / d C_n = 2 [ Bw^T phi (I + gram)^-1 - (Bw^T q)(phi^T q)^T ]
        // with Bw the weight-whitened design rows.
        let mut bw = sample.b.clone();
        for i in 0..sample.n_obs() {
            bw.row_mut(i).scale_mut(ws.sqrt_w[i]);
        }
        let bw_phi = bw.transpose() * &ws.phi;
        let inv_applied = ws
            .chol
            .solve_lower_triangular(&bw_phi.transpose())
            .and_then(|x| ws.chol.transpose().solve_upper_triangular(&x))
            .ok_or_else(|| Error::numerical(format!("sample {}: singular factor", sample.id)))?;
        let first = inv_applied.transpose(); // Bw^T phi (I+gram)^-1
        let bq = bw.transpose() * &q_tilde; // m
        let pq = ws.phi.transpose() * &q_tilde; // r
        let mut d = first * 2.0;
        d.ger(-2.0, &bq, &pq, 1.0);
        debug_assert_eq!(d.ncols(), r);
        d
    } else {
        DMatrix::zeros(0, 0)
    };

    let noise = if want.noise && sample.weights.is_none() {
        // d/d sigma^2 = tr(Sigma^-1) - resid^T Sigma^-2 resid.
        let inv_chol = ws
            .chol
            .solve_lower_triangular(&DMatrix::identity(r, r))
            .ok_or_else(|| Error::numerical(format!("sample {}: singular factor", sample.id)))?;
        let trace_term = sample.n_obs() as f64 - r as f64 + inv_chol.norm_squared();
        (trace_term - q_tilde.norm_squared()) / noise_var
    } else {
        0.0
    };

    Ok(SampleGrads {
        value: ws.logdet + ws.quad,
        mean,
        d_factor,
        noise_var: noise,
    })
}

#[derive(Clone, Copy)]
struct GradSet {
    mean: bool,
    factor: bool,
    noise: bool,
}

fn accumulate(
    data: &Dataset,
    params: &ModelParams,
    want: GradSet,
) -> Result<(f64, LikelihoodGrads)> {
    let noise_var = params.noise_var();
    let per_sample: Result<Vec<SampleGrads>> = data
        .samples
        .par_iter()
        .map(|s| sample_value_grads(s, params, noise_var, want))
        .collect();
    let per_sample = per_sample?;
    let mut value = 0.0;
    let mut mean = DVector::zeros(if want.mean { params.mean_coefs.len() } else { 0 });
    let mut factor = DMatrix::zeros(
        if want.factor { params.factor_coefs.nrows() } else { 0 },
        if want.factor { params.factor_coefs.ncols() } else { 0 },
    );
    let mut noise = 0.0;
    let q = data
        .samples
        .first()
        .map(|s| s.v_row.len())
        .unwrap_or(1);
    for (sg, sample) in per_sample.iter().zip(&data.samples) {
        value += sg.value;
        if want.mean {
            mean += &sg.mean;
        }
        if want.factor {
            // Scatter dL/dC_n into the coefficient gradient: block row i of
            // column j receives dC[(i, j)] * v(z_n).
            let m = sg.d_factor.nrows();
            for j in 0..sg.d_factor.ncols() {
                for i in 0..m {
                    let scale = sg.d_factor[(i, j)];
                    if scale == 0.0 {
                        continue;
                    }
                    for k in 0..q {
                        factor[(i * q + k, j)] += scale * sample.v_row[k];
                    }
                }
            }
        }
        noise += sg.noise_var;
    }
    Ok((
        value,
        LikelihoodGrads {
            mean,
            factor,
            noise_var: noise,
        },
    ))
}

/// Fast gradient of the negative log-likelihood with respect to the
/// vectorized mean coefficients.
pub fn grad_theta_fast(data: &Dataset, params: &ModelParams) -> Result<DVector<f64>> {
    let (_, g) = accumulate(
        data,
        params,
        GradSet {
            mean: true,
            factor: false,
            noise: false,
        },
    )?;
    Ok(g.mean)
}

/// Fast gradient with respect to the noise variance; zero when every
/// sample carries measurement errors.
pub fn grad_sigma_fast(data: &Dataset, params: &ModelParams) -> Result<f64> {
    if data.all_weighted {
        return Ok(0.0);
    }
    let (_, g) = accumulate(
        data,
        params,
        GradSet {
            mean: false,
            factor: false,
            noise: true,
        },
    )?;
    Ok(g.noise_var)
}

/// Fast gradient with respect to the factor coefficient matrix.
pub fn grad_beta_fast(data: &Dataset, params: &ModelParams) -> Result<DMatrix<f64>> {
    let (_, g) = accumulate(
        data,
        params,
        GradSet {
            mean: false,
            factor: true,
            noise: false,
        },
    )?;
    Ok(g.factor)
}

/// Value and all three gradients in one sweep over the samples.
pub fn nll_value_grads(data: &Dataset, params: &ModelParams) -> Result<(f64, LikelihoodGrads)> {
    accumulate(
        data,
        params,
        GradSet {
            mean: true,
            factor: true,
            noise: !data.all_weighted,
        },
    )
}

/// Penalized objective value and gradients.
///
/// Gradients combine the fast likelihood gradients with the penalty
/// gradients; the noise gradient is untouched by the penalty.
pub fn objective(
    data: &Dataset,
    params: &ModelParams,
    pen: &PenaltyOperator,
) -> Result<(f64, LikelihoodGrads)> {
    let (nll, mut grads) = nll_value_grads(data, params)?;
    let pen_val = pen.value(&params.mean_coefs, &params.factor_coefs)?;
    let (pg_mean, pg_factor) = pen.grad(&params.mean_coefs, &params.factor_coefs)?;
    grads.mean += pg_mean;
    grads.factor += pg_factor;
    Ok((nll + pen_val, grads))
}

/// Dense reference gradient with respect to the mean coefficients.
pub fn grad_theta_dense(data: &Dataset, params: &ModelParams) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(params.mean_coefs.len());
    for s in &data.samples {
        let sigma = dense_marginal(s, params);
        let inv = dense_inverse(&sigma, &s.id)?;
        let resid = &s.y - &s.h * &params.mean_coefs;
        out += s.h.transpose() * (&inv * &resid) * -2.0;
    }
    Ok(out)
}

/// Dense reference gradient with respect to the noise variance.
pub fn grad_sigma_dense(data: &Dataset, params: &ModelParams) -> Result<f64> {
    let mut out = 0.0;
    for s in &data.samples {
        if s.weights.is_some() {
            continue;
        }
        let sigma = dense_marginal(s, params);
        let inv = dense_inverse(&sigma, &s.id)?;
        let resid = &s.y - &s.h * &params.mean_coefs;
        let solved = &inv * &resid;
        out += inv.trace() - solved.norm_squared();
    }
    Ok(out)
}

/// Dense reference gradient with respect to the factor coefficients.
pub fn grad_beta_dense(data: &Dataset, params: &ModelParams) -> Result<DMatrix<f64>> {
    let q = data.samples.first().map(|s| s.v_row.len()).unwrap_or(1);
    let mut out = DMatrix::zeros(params.factor_coefs.nrows(), params.factor_coefs.ncols());
    for s in &data.samples {
        let c = factor_of(s, params);
        let sigma = dense_marginal(s, params);
        let inv = dense_inverse(&sigma, &s.id)?;
        let resid = &s.y - &s.h * &params.mean_coefs;
        let solved = &inv * &resid;
        let middle = &inv - &solved * solved.transpose();
        let d_c = s.b.transpose() * middle * &s.b * &c * 2.0;
        for j in 0..d_c.ncols() {
            for i in 0..d_c.nrows() {
                for k in 0..q {
                    out[(i * q + k, j)] += d_c[(i, j)] * s.v_row[k];
                }
            }
        }
    }
    Ok(out)
}

fn dense_inverse(sigma: &DMatrix<f64>, id: &str) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(sigma.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::numerical(format!("sample {id}: marginal covariance not PD")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::{random_instance, InstanceSpec};
    use approx::assert_abs_diff_eq;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + b.abs())
    }

    #[test]
    fn zero_factor_reduces_to_diagonal_gaussian() {
        let inst = random_instance(&InstanceSpec {
            seed: 5,
            n_samples: 4,
            obs_range: (3, 8),
            cov_t_size: 5,
            rank: 2,
            noise_var: 0.7,
            weighted: false,
        });
        let mut params = inst.params.clone();
        params.factor_coefs.fill(0.0);
        let got = nll_fast(&inst.data, &params).unwrap();
        let mut expected = 0.0;
        for s in &inst.data.samples {
            let resid = &s.y - &s.h * &params.mean_coefs;
            expected += s.n_obs() as f64 * 0.7f64.ln() + resid.norm_squared() / 0.7;
        }
        assert!(rel_err(got, expected) < 1e-12);
    }

    #[test]
    fn fast_matches_dense_on_random_instances() {
        for seed in 0..20u64 {
            let inst = random_instance(&InstanceSpec {
                seed,
                n_samples: 6,
                obs_range: (1, 12),
                cov_t_size: 4 + (seed % 5) as usize,
                rank: 1 + (seed % 3) as usize,
                noise_var: [0.05, 1.0, 10.0][(seed % 3) as usize],
                weighted: seed % 4 == 3,
            });
            let fast = nll_fast(&inst.data, &inst.params).unwrap();
            let dense = nll_dense(&inst.data, &inst.params).unwrap();
            assert!(
                rel_err(fast, dense) < 1e-10,
                "seed {seed}: fast {fast} dense {dense}"
            );
        }
    }

    #[test]
    fn value_invariant_under_sample_permutation() {
        let inst = random_instance(&InstanceSpec {
            seed: 8,
            n_samples: 7,
            obs_range: (2, 9),
            cov_t_size: 6,
            rank: 2,
            noise_var: 0.4,
            weighted: false,
        });
        let v1 = nll_fast(&inst.data, &inst.params).unwrap();
        let mut reversed = inst.data.clone();
        reversed.samples.reverse();
        let v2 = nll_fast(&reversed, &inst.params).unwrap();
        assert!(rel_err(v1, v2) < 1e-12);
    }

    #[test]
    fn residual_shift_invariance() {
        // Shifting the data and the mean by the same constant leaves the
        // likelihood unchanged; the tensor basis reproduces constants.
        let inst = random_instance(&InstanceSpec {
            seed: 3,
            n_samples: 5,
            obs_range: (2, 10),
            cov_t_size: 6,
            rank: 2,
            noise_var: 1.0,
            weighted: false,
        });
        let v1 = nll_dense(&inst.data, &inst.params).unwrap();
        let c = 3.7;
        let mut shifted = inst.data.clone();
        for s in &mut shifted.samples {
            s.y.add_scalar_mut(c);
        }
        let mut params = inst.params.clone();
        params.mean_coefs.add_scalar_mut(c);
        let v2 = nll_dense(&shifted, &params).unwrap();
        assert!(rel_err(v1, v2) < 1e-9);
    }

    #[test]
    fn workspace_cholesky_identities() {
        let inst = random_instance(&InstanceSpec {
            seed: 13,
            n_samples: 1,
            obs_range: (8, 9),
            cov_t_size: 6,
            rank: 3,
            noise_var: 0.5,
            weighted: false,
        });
        let s = &inst.data.samples[0];
        let c = factor_at(&inst.params.factor_coefs, &s.v_row);
        let ws = SampleWorkspace::build(s, &c, &inst.params.mean_coefs, 0.5).unwrap();
        // F F^T = I + W / sigma^2 with W the unwhitened loading Gram.
        let bc = &s.b * &c;
        let w_raw = bc.transpose() * &bc;
        let target = DMatrix::identity(3, 3) + &w_raw / 0.5;
        let ff = &ws.chol * ws.chol.transpose();
        assert!((ff - target).abs().max() < 1e-10);
        // L = sigma F factors sigma^2 I + W.
        let l = &ws.chol * 0.5f64.sqrt();
        let ll = &l * l.transpose();
        let target2 = DMatrix::identity(3, 3) * 0.5 + w_raw.clone();
        assert!((ll - target2).abs().max() < 1e-10);
        // W is symmetric PSD.
        assert!((w_raw.clone() - w_raw.transpose()).abs().max() < 1e-12);
        assert!(w_raw.symmetric_eigenvalues().min() >= -1e-10 * w_raw.trace());
    }

    #[test]
    fn woodbury_inverse_identity() {
        let inst = random_instance(&InstanceSpec {
            seed: 17,
            n_samples: 3,
            obs_range: (5, 12),
            cov_t_size: 7,
            rank: 2,
            noise_var: 0.3,
            weighted: false,
        });
        for s in &inst.data.samples {
            let c = factor_at(&inst.params.factor_coefs, &s.v_row);
            let bc = &s.b * &c;
            let w = bc.transpose() * &bc;
            let m_n = s.n_obs();
            let nv = inst.params.noise_var();
            let shifted = DMatrix::identity(2, 2) * nv + &w;
            let inv_small = shifted.try_inverse().unwrap();
            let woodbury =
                (DMatrix::identity(m_n, m_n) - &bc * inv_small * bc.transpose()) / nv;
            let sigma = dense_marginal(s, &inst.params);
            let prod = woodbury * sigma;
            assert!((prod - DMatrix::identity(m_n, m_n)).abs().max() < 1e-9);
        }
    }

    #[test]
    fn theta_gradient_zero_at_gls_solution() {
        let inst = random_instance(&InstanceSpec {
            seed: 23,
            n_samples: 6,
            obs_range: (6, 12),
            cov_t_size: 5,
            rank: 2,
            noise_var: 0.9,
            weighted: false,
        });
        let mut params = inst.params.clone();
        params.factor_coefs.fill(0.0);
        // With zero factor the GLS solution is ordinary least squares.
        let dim = params.mean_coefs.len();
        let mut xtx = DMatrix::zeros(dim, dim);
        let mut xty = DVector::zeros(dim);
        for s in &inst.data.samples {
            xtx += s.h.transpose() * &s.h;
            xty += s.h.transpose() * &s.y;
        }
        for i in 0..dim {
            xtx[(i, i)] += 1e-10;
        }
        params.mean_coefs = xtx.lu().solve(&xty).unwrap();
        let g = grad_theta_fast(&inst.data, &params).unwrap();
        let scale = 1.0 + nll_fast(&inst.data, &params).unwrap().abs();
        assert!(g.abs().max() / scale < 1e-7, "gradient {:.3e}", g.abs().max());
    }

    #[test]
    fn beta_gradient_zero_at_zero_factor() {
        let inst = random_instance(&InstanceSpec {
            seed: 29,
            n_samples: 4,
            obs_range: (3, 9),
            cov_t_size: 6,
            rank: 2,
            noise_var: 0.6,
            weighted: false,
        });
        let mut params = inst.params.clone();
        params.factor_coefs.fill(0.0);
        let g = grad_beta_fast(&inst.data, &params).unwrap();
        assert_eq!(g.abs().max(), 0.0);
    }

    #[test]
    fn gradients_match_dense_references() {
        for seed in 0..10u64 {
            let inst = random_instance(&InstanceSpec {
                seed: 100 + seed,
                n_samples: 5,
                obs_range: (1, 12),
                cov_t_size: 4 + (seed % 4) as usize,
                rank: 1 + (seed % 3) as usize,
                noise_var: [0.05, 1.0, 10.0][(seed % 3) as usize],
                weighted: seed % 5 == 4,
            });
            let gt_fast = grad_theta_fast(&inst.data, &inst.params).unwrap();
            let gt_dense = grad_theta_dense(&inst.data, &inst.params).unwrap();
            let scale = 1.0 + gt_dense.abs().max();
            assert!(
                (gt_fast - &gt_dense).abs().max() / scale < 1e-9,
                "seed {seed} theta"
            );
            let gb_fast = grad_beta_fast(&inst.data, &inst.params).unwrap();
            let gb_dense = grad_beta_dense(&inst.data, &inst.params).unwrap();
            let scale = 1.0 + gb_dense.abs().max();
            assert!(
                (gb_fast - &gb_dense).abs().max() / scale < 1e-9,
                "seed {seed} beta"
            );
            if !inst.data.all_weighted {
                let gs_fast = grad_sigma_fast(&inst.data, &inst.params).unwrap();
                let gs_dense = grad_sigma_dense(&inst.data, &inst.params).unwrap();
                assert!(rel_err(gs_fast, gs_dense) < 1e-9, "seed {seed} sigma");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let inst = random_instance(&InstanceSpec {
            seed: 41,
            n_samples: 4,
            obs_range: (4, 9),
            cov_t_size: 5,
            rank: 2,
            noise_var: 0.8,
            weighted: false,
        });
        let f = |p: &ModelParams| nll_fast(&inst.data, p).unwrap();
        let g_theta = grad_theta_fast(&inst.data, &inst.params).unwrap();
        let g_beta = grad_beta_fast(&inst.data, &inst.params).unwrap();
        let g_sigma = grad_sigma_fast(&inst.data, &inst.params).unwrap();
        for idx in [0usize, 3, 9, inst.params.mean_coefs.len() - 1] {
            let h = 1e-5 * (1.0 + inst.params.mean_coefs[idx].abs());
            let mut pp = inst.params.clone();
            let mut pm = inst.params.clone();
            pp.mean_coefs[idx] += h;
            pm.mean_coefs[idx] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            assert!(
                (fd - g_theta[idx]).abs() / (1.0 + fd.abs()) < 1e-5,
                "theta {idx}: fd {fd} analytic {}",
                g_theta[idx]
            );
        }
        let nrows = inst.params.factor_coefs.nrows();
        for k in 0..20usize {
            let i = (k * 7) % nrows;
            let j = k % inst.params.rank();
            let h = 1e-5 * (1.0 + inst.params.factor_coefs[(i, j)].abs());
            let mut pp = inst.params.clone();
            let mut pm = inst.params.clone();
            pp.factor_coefs[(i, j)] += h;
            pm.factor_coefs[(i, j)] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            assert!(
                (fd - g_beta[(i, j)]).abs() / (1.0 + fd.abs()) < 1e-5,
                "beta ({i},{j}): fd {fd} analytic {}",
                g_beta[(i, j)]
            );
        }
        let h = 1e-6;
        let mut pp = inst.params.clone();
        let mut pm = inst.params.clone();
        pp.log_noise_var = (inst.params.noise_var() + h).ln();
        pm.log_noise_var = (inst.params.noise_var() - h).ln();
        let fd = (f(&pp) - f(&pm)) / (2.0 * h);
        assert!((fd - g_sigma).abs() / (1.0 + fd.abs()) < 1e-5);
    }

    #[test]
    fn sigma_gradient_closed_form_when_factor_zero() {
        let inst = random_instance(&InstanceSpec {
            seed: 51,
            n_samples: 5,
            obs_range: (2, 8),
            cov_t_size: 5,
            rank: 2,
            noise_var: 0.35,
            weighted: false,
        });
        let mut params = inst.params.clone();
        params.factor_coefs.fill(0.0);
        let got = grad_sigma_fast(&inst.data, &params).unwrap();
        let nv = params.noise_var();
        let mut expected = 0.0;
        for s in &inst.data.samples {
            let resid = &s.y - &s.h * &params.mean_coefs;
            expected += s.n_obs() as f64 / nv - resid.norm_squared() / (nv * nv);
        }
        assert!(rel_err(got, expected) < 1e-10);
    }

    #[test]
    fn constant_measurement_error_reproduces_scalar_path() {
        let inst = random_instance(&InstanceSpec {
            seed: 61,
            n_samples: 5,
            obs_range: (3, 10),
            cov_t_size: 6,
            rank: 2,
            noise_var: 0.45,
            weighted: false,
        });
        let mut weighted = inst.data.clone();
        let sd = inst.params.noise_var().sqrt();
        for s in &mut weighted.samples {
            s.weights = Some(DVector::from_element(s.n_obs(), 1.0 / (sd * sd)));
        }
        weighted.all_weighted = true;
        let v_scalar = nll_fast(&inst.data, &inst.params).unwrap();
        let v_weighted = nll_fast(&weighted, &inst.params).unwrap();
        assert!((v_scalar - v_weighted).abs() <= 1e-12 * (1.0 + v_scalar.abs()));
        let gt_s = grad_theta_fast(&inst.data, &inst.params).unwrap();
        let gt_w = grad_theta_fast(&weighted, &inst.params).unwrap();
        assert!((gt_s - gt_w).abs().max() < 1e-10);
        assert_eq!(grad_sigma_fast(&weighted, &inst.params).unwrap(), 0.0);
    }

    #[test]
    fn objective_reduces_to_likelihood_without_penalty() {
        let inst = random_instance(&InstanceSpec {
            seed: 71,
            n_samples: 4,
            obs_range: (3, 8),
            cov_t_size: 6,
            rank: 2,
            noise_var: 0.5,
            weighted: false,
        });
        let pen = crate::penalty::assemble(&inst.bases, crate::penalty::Lambdas::zero()).unwrap();
        let (obj, _) = objective(&inst.data, &inst.params, &pen).unwrap();
        let nll = nll_fast(&inst.data, &inst.params).unwrap();
        assert_abs_diff_eq!(obj, nll, epsilon = 1e-12 * (1.0 + nll.abs()));
    }

    #[test]
    fn objective_descends_along_negative_gradient() {
        let inst = random_instance(&InstanceSpec {
            seed: 73,
            n_samples: 5,
            obs_range: (4, 9),
            cov_t_size: 6,
            rank: 2,
            noise_var: 0.5,
            weighted: false,
        });
        let pen = crate::penalty::assemble(
            &inst.bases,
            crate::penalty::Lambdas {
                t_cov: 0.1,
                z_cov: 0.1,
                t_mean: 0.1,
                z_mean: 0.1,
            },
        )
        .unwrap();
        let (v0, g) = objective(&inst.data, &inst.params, &pen).unwrap();
        let pen_val = pen
            .value(&inst.params.mean_coefs, &inst.params.factor_coefs)
            .unwrap();
        assert!(pen_val >= 0.0);
        let norm2 = g.mean.norm_squared() + g.factor.norm_squared() + g.noise_var * g.noise_var;
        let step = 1e-7 / (1.0 + norm2.sqrt());
        let mut moved = inst.params.clone();
        moved.mean_coefs -= &g.mean * step;
        moved.factor_coefs -= &g.factor * step;
        moved.log_noise_var =
            (inst.params.noise_var() - step * g.noise_var).ln();
        let (v1, _) = objective(&inst.data, &moved, &pen).unwrap();
        assert!(v1 < v0, "no descent: {v0} -> {v1}");
    }
}
