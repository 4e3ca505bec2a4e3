//! Block coordinate descent for the penalized likelihood, plus
//! cross-validation over the smoothing weights and prediction scoring.
//!
//! The three parameter blocks (mean coefficients, factor coefficients, log
//! noise variance) are cycled; each block runs Armijo-backtracking steepest
//! descent to an inner tolerance. Every block evaluator caches the pieces
//! of the likelihood its block cannot change, and evaluates candidates
//! along the current ray from precomputed scalars, so backtracking steps
//! are nearly free:
//!
//! * mean block: the objective is exactly quadratic along any ray;
//! * factor block: candidates need only r x r algebra per sample;
//! * noise block: candidates reuse per-sample Gram summaries.
//!
//! The recorded objective trace is monotone nonincreasing by construction:
//! a step is only accepted when it improves on the best recorded value.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{initialize, InitConfig};
use crate::likelihood::{prepare, Dataset};
use crate::model::{factor_at, FunctionalSample, ModelBases, ModelParams};
use crate::penalty::{assemble, Lambdas, PenaltyOperator};
use crate::seedmix::derive_seed;

/// Everything that controls a fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitConfig {
    pub rank: usize,
    /// Basis sizes: mean time (l), mean covariate (p), covariance time (m),
    /// covariance covariate (q).
    pub mean_t_size: usize,
    pub mean_z_size: usize,
    pub cov_t_size: usize,
    pub cov_z_size: usize,
    pub degree: usize,
    pub lambdas: Lambdas,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Relative objective change that ends the outer loop.
    pub rel_tol: f64,
    /// Relative objective change that ends a block's inner loop.
    pub inner_tol: f64,
    pub ls_shrink: f64,
    pub ls_armijo: f64,
    pub ls_init_step: f64,
    pub seed: u64,
    /// Covariate bins for initialization; `None` derives from the sample
    /// count.
    pub n_bins: Option<usize>,
    pub min_per_bin: usize,
    pub cv_folds: usize,
    /// Domain overrides; `None` uses the observed ranges.
    pub t_domain: Option<(f64, f64)>,
    pub z_domain: Option<(f64, f64)>,
}

impl FitConfig {
    pub fn defaults(rank: usize) -> Self {
        FitConfig {
            rank,
            mean_t_size: 10,
            mean_z_size: 5,
            cov_t_size: 10,
            cov_z_size: 7,
            degree: 3,
            lambdas: Lambdas {
                t_cov: 1e-3,
                z_cov: 1e-3,
                t_mean: 1e-3,
                z_mean: 1e-3,
            },
            max_outer: 50,
            max_inner: 200,
            rel_tol: 1e-6,
            inner_tol: 1e-4,
            ls_shrink: 0.5,
            ls_armijo: 1e-4,
            ls_init_step: 1.0,
            seed: 0,
            n_bins: None,
            min_per_bin: 10,
            cv_folds: 5,
            t_domain: None,
            z_domain: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank > self.cov_t_size {
            return Err(Error::invalid(format!(
                "rank {} must be in 1..={}",
                self.rank, self.cov_t_size
            )));
        }
        if self.rel_tol <= 0.0 || self.rel_tol >= 1.0 {
            return Err(Error::invalid("rel_tol must be in (0, 1)"));
        }
        if self.inner_tol <= 0.0 || self.inner_tol >= 1.0 {
            return Err(Error::invalid("inner_tol must be in (0, 1)"));
        }
        if !(0.0 < self.ls_shrink && self.ls_shrink < 1.0) {
            return Err(Error::invalid("line-search shrink must be in (0, 1)"));
        }
        if self.ls_armijo <= 0.0 || self.ls_armijo >= 1.0 {
            return Err(Error::invalid("Armijo constant must be in (0, 1)"));
        }
        if self.ls_init_step <= 0.0 {
            return Err(Error::invalid("initial step must be positive"));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::invalid("iteration limits must be positive"));
        }
        self.lambdas.validate()
    }
}

/// Fit run record.
#[derive(Clone, Debug, Default)]
pub struct FitDiagnostics {
    /// Objective after the initial point and every accepted step.
    pub objective_trace: Vec<f64>,
    pub outer_iters: usize,
    pub converged: bool,
    pub line_search_failures: usize,
    /// Final gradient norms per block (mean, factor, noise), soft
    /// stationarity report.
    pub final_grad_norms: [f64; 3],
    pub final_objective: f64,
}

/// Training metadata kept with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n_samples: usize,
    pub n_obs: usize,
    pub t_range: (f64, f64),
    pub z_range: (f64, f64),
    pub heteroscedastic: bool,
    pub seed: u64,
}

/// A fitted model: parameters, bases, smoothing weights, and run record.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub params: ModelParams,
    pub bases: ModelBases,
    pub lambdas: Lambdas,
    pub diagnostics: FitDiagnostics,
    pub meta: TrainingMeta,
}

fn data_ranges(samples: &[FunctionalSample]) -> Result<((f64, f64), (f64, f64))> {
    let mut t_lo = f64::INFINITY;
    let mut t_hi = f64::NEG_INFINITY;
    let mut z_lo = f64::INFINITY;
    let mut z_hi = f64::NEG_INFINITY;
    for s in samples {
        for &t in &s.times {
            t_lo = t_lo.min(t);
            t_hi = t_hi.max(t);
        }
        z_lo = z_lo.min(s.covariate);
        z_hi = z_hi.max(s.covariate);
    }
    if !(t_lo < t_hi) {
        return Err(Error::data("degenerate time range in training data"));
    }
    if !(z_lo < z_hi) {
        return Err(Error::data("degenerate covariate range in training data"));
    }
    Ok(((t_lo, t_hi), (z_lo, z_hi)))
}

/// Build the model bases for a training set under a config.
pub fn bases_for(samples: &[FunctionalSample], config: &FitConfig) -> Result<ModelBases> {
    let (t_range, z_range) = data_ranges(samples)?;
    let t_domain = config.t_domain.unwrap_or(t_range);
    let z_domain = config.z_domain.unwrap_or(z_range);
    ModelBases::build(
        config.mean_t_size,
        config.mean_z_size,
        config.cov_t_size,
        config.cov_z_size,
        config.degree,
        t_domain,
        z_domain,
    )
}

// ---------------------------------------------------------------------------
// Block evaluators
// ---------------------------------------------------------------------------

trait Block {
    fn eval_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    /// Fix the ray `x + alpha d` for subsequent `eval_along` calls.
    fn begin_direction(&mut self, x: &DVector<f64>, d: &DVector<f64>) -> Result<()>;
    fn eval_along(&mut self, alpha: f64) -> Result<f64>;
    /// Optional initial trial step for the current ray; blocks whose ray
    /// objective has a cheap exact minimizer return it here and the
    /// backtracking search verifies it.
    fn suggest_step(&self) -> Option<f64> {
        None
    }
}

fn lower_solve(l: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    l.solve_lower_triangular(rhs)
        .ok_or_else(|| Error::numerical("singular triangular factor"))
}

fn chol_shifted(gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = gram.nrows();
    let mut shifted = gram.clone();
    for i in 0..r {
        shifted[(i, i)] += 1.0;
    }
    match nalgebra::Cholesky::new(shifted.clone()) {
        Some(c) => Ok(c.l()),
        None => {
            let bump = 1e-10 * shifted.trace() / r as f64;
            for i in 0..r {
                shifted[(i, i)] += bump;
            }
            nalgebra::Cholesky::new(shifted)
                .map(|c| c.l())
                .ok_or_else(|| Error::numerical("reduced system not positive definite"))
        }
    }
}

/// Mean-block evaluator. The factor and noise are frozen, so each sample's
/// whitened loadings and their Cholesky factor are fixed; along a ray the
/// objective is exactly quadratic and is evaluated from three scalars.
struct MeanBlock<'a> {
    data: &'a Dataset,
    pen: &'a PenaltyOperator,
    factor_coefs: DMatrix<f64>,
    phis: Vec<DMatrix<f64>>,
    chols: Vec<DMatrix<f64>>,
    sqrt_ws: Vec<DVector<f64>>,
    logdets: Vec<f64>,
    pen_factor_const: f64,
    // Ray state: value(alpha) = q0 + q1 alpha + q2 alpha^2.
    ray: Option<(f64, f64, f64)>,
}

impl<'a> MeanBlock<'a> {
    fn new(data: &'a Dataset, pen: &'a PenaltyOperator, params: &ModelParams) -> Result<Self> {
        let noise_var = params.noise_var();
        let per: Result<Vec<(DMatrix<f64>, DMatrix<f64>, DVector<f64>, f64)>> = data
            .samples
            .par_iter()
            .map(|s| {
                let c = factor_at(&params.factor_coefs, &s.v_row);
                let m_n = s.n_obs();
                let sqrt_w = match &s.weights {
                    Some(w) => w.map(|v| v.sqrt()),
                    None => DVector::from_element(m_n, (1.0 / noise_var).sqrt()),
                };
                let mut phi = &s.b * &c;
                let mut log_inv_w = 0.0;
                for i in 0..m_n {
                    phi.row_mut(i).scale_mut(sqrt_w[i]);
                    log_inv_w -= 2.0 * sqrt_w[i].ln();
                }
                let gram = phi.transpose() * &phi;
                let chol = chol_shifted(&gram)?;
                let mut logdet = log_inv_w;
                for i in 0..chol.nrows() {
                    logdet += 2.0 * chol[(i, i)].ln();
                }
                Ok((phi, chol, sqrt_w, logdet))
            })
            .collect();
        let mut phis = Vec::with_capacity(data.n_samples());
        let mut chols = Vec::with_capacity(data.n_samples());
        let mut sqrt_ws = Vec::with_capacity(data.n_samples());
        let mut logdets = Vec::with_capacity(data.n_samples());
        for (phi, chol, sw, ld) in per? {
            phis.push(phi);
            chols.push(chol);
            sqrt_ws.push(sw);
            logdets.push(ld);
        }
        let zero_mean = DVector::zeros(params.mean_coefs.len());
        let pen_factor_const = pen.value(&zero_mean, &params.factor_coefs)?;
        Ok(MeanBlock {
            data,
            pen,
            factor_coefs: params.factor_coefs.clone(),
            phis,
            chols,
            sqrt_ws,
            logdets,
            pen_factor_const,
            ray: None,
        })
    }

    fn pen_mean_value(&self, theta: &DVector<f64>) -> Result<f64> {
        let zero_factor = DMatrix::zeros(self.factor_coefs.nrows(), self.factor_coefs.ncols());
        self.pen.value(theta, &zero_factor)
    }
}

impl Block for MeanBlock<'_> {
    fn eval_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let per: Result<Vec<(f64, DVector<f64>)>> = self
            .data
            .samples
            .par_iter()
            .enumerate()
            .map(|(n, s)| {
                let phi = &self.phis[n];
                let chol = &self.chols[n];
                let sw = &self.sqrt_ws[n];
                let mut resid = &s.y - &s.h * x;
                for i in 0..s.n_obs() {
                    resid[i] *= sw[i];
                }
                let g = phi.transpose() * &resid;
                let h = lower_solve(chol, &g)?;
                let value = self.logdets[n] + resid.norm_squared() - h.norm_squared();
                let s_vec = chol
                    .transpose()
                    .solve_upper_triangular(&h)
                    .ok_or_else(|| Error::numerical("triangular solve failed"))?;
                let mut q = resid - phi * s_vec;
                for i in 0..s.n_obs() {
                    q[i] *= sw[i];
                }
                let grad = s.h.transpose() * q * -2.0;
                Ok((value, grad))
            })
            .collect();
        let mut value = 0.0;
        let mut grad = DVector::zeros(x.len());
        for (v, g) in per? {
            value += v;
            grad += g;
        }
        value += self.pen_mean_value(x)? + self.pen_factor_const;
        let (pg, _) = self.pen.grad(x, &DMatrix::zeros(self.factor_coefs.nrows(), self.factor_coefs.ncols()))?;
        grad += pg;
        Ok((value, grad))
    }

    fn begin_direction(&mut self, x: &DVector<f64>, d: &DVector<f64>) -> Result<()> {
        let pieces: Result<Vec<(f64, f64, f64)>> = self
            .data
            .samples
            .par_iter()
            .enumerate()
            .map(|(n, s)| {
                let phi = &self.phis[n];
                let chol = &self.chols[n];
                let sw = &self.sqrt_ws[n];
                let mut r0 = &s.y - &s.h * x;
                let mut hd = &s.h * d;
                for i in 0..s.n_obs() {
                    r0[i] *= sw[i];
                    hd[i] *= sw[i];
                }
                let g0 = phi.transpose() * &r0;
                let gd = phi.transpose() * &hd;
                let h0 = lower_solve(chol, &g0)?;
                let hd_s = lower_solve(chol, &gd)?;
                // ||r0 - a hd||^2 - ||h0 - a hd_s||^2 expanded in a.
                let c0 = self.logdets[n] + r0.norm_squared() - h0.norm_squared();
                let c1 = -2.0 * (r0.dot(&hd) - h0.dot(&hd_s));
                let c2 = hd.norm_squared() - hd_s.norm_squared();
                Ok((c0, c1, c2))
            })
            .collect();
        let mut q0 = self.pen_factor_const;
        let mut q1 = 0.0;
        let mut q2 = 0.0;
        for (c0, c1, c2) in pieces? {
            q0 += c0;
            q1 += c1;
            q2 += c2;
        }
        // Penalty along the ray is quadratic too.
        q0 += self.pen_mean_value(x)?;
        let zero_factor = DMatrix::zeros(self.factor_coefs.nrows(), self.factor_coefs.ncols());
        let (pg, _) = self.pen.grad(x, &zero_factor)?;
        q1 += pg.dot(d);
        q2 += self.pen_mean_value(d)?;
        self.ray = Some((q0, q1, q2));
        Ok(())
    }

    fn eval_along(&mut self, alpha: f64) -> Result<f64> {
        let (q0, q1, q2) = self.ray.ok_or_else(|| Error::invalid("no ray"))?;
        Ok(q0 + alpha * (q1 + alpha * q2))
    }

    fn suggest_step(&self) -> Option<f64> {
        // The ray objective is exactly quadratic; jump to its minimizer.
        let (_, q1, q2) = self.ray?;
        if q2 > 0.0 && q1 < 0.0 {
            Some(-q1 / (2.0 * q2))
        } else {
            None
        }
    }
}

/// Factor-block evaluator: the whitened residuals are frozen; candidates
/// along a ray only need the r x r Gram pieces of `phi0 + alpha phi_d`.
struct FactorBlock<'a> {
    data: &'a Dataset,
    pen: &'a PenaltyOperator,
    mean_coefs: DVector<f64>,
    rank: usize,
    resids: Vec<DVector<f64>>,
    b_whites: Vec<DMatrix<f64>>,
    logw_consts: Vec<f64>,
    pen_mean_const: f64,
    // Ray state per sample.
    ray: Option<RayFactor>,
}

struct RayFactor {
    per: Vec<RayFactorSample>,
    pen0: f64,
    pen1: f64,
    pen2: f64,
}

struct RayFactorSample {
    g00: DMatrix<f64>,
    g0d: DMatrix<f64>,
    gdd: DMatrix<f64>,
    p0: DVector<f64>,
    pd: DVector<f64>,
    rnorm2: f64,
    logw: f64,
}

impl<'a> FactorBlock<'a> {
    fn new(data: &'a Dataset, pen: &'a PenaltyOperator, params: &ModelParams) -> Result<Self> {
        let noise_var = params.noise_var();
        let per: Vec<(DVector<f64>, DMatrix<f64>, f64)> = data
            .samples
            .par_iter()
            .map(|s| {
                let m_n = s.n_obs();
                let sqrt_w = match &s.weights {
                    Some(w) => w.map(|v| v.sqrt()),
                    None => DVector::from_element(m_n, (1.0 / noise_var).sqrt()),
                };
                let mut resid = &s.y - &s.h * &params.mean_coefs;
                let mut bw = s.b.clone();
                let mut log_inv_w = 0.0;
                for i in 0..m_n {
                    resid[i] *= sqrt_w[i];
                    bw.row_mut(i).scale_mut(sqrt_w[i]);
                    log_inv_w -= 2.0 * sqrt_w[i].ln();
                }
                (resid, bw, log_inv_w)
            })
            .collect();
        let mut resids = Vec::with_capacity(data.n_samples());
        let mut b_whites = Vec::with_capacity(data.n_samples());
        let mut logw_consts = Vec::with_capacity(data.n_samples());
        for (r, b, lw) in per {
            resids.push(r);
            b_whites.push(b);
            logw_consts.push(lw);
        }
        let zero_factor = DMatrix::zeros(params.factor_coefs.nrows(), params.factor_coefs.ncols());
        let pen_mean_const = pen.value(&params.mean_coefs, &zero_factor)?;
        Ok(FactorBlock {
            data,
            pen,
            mean_coefs: params.mean_coefs.clone(),
            rank: params.rank(),
            resids,
            b_whites,
            logw_consts,
            pen_mean_const,
            ray: None,
        })
    }

    fn gamma_of(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let rows = self.pen.s_t_cov.nrows();
        DMatrix::from_column_slice(rows, self.rank, x.as_slice())
    }

    fn pen_factor_value(&self, gamma: &DMatrix<f64>) -> Result<f64> {
        let zero_mean = DVector::zeros(self.mean_coefs.len());
        self.pen.value(&zero_mean, gamma)
    }
}

impl Block for FactorBlock<'_> {
    fn eval_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let gamma = self.gamma_of(x);
        let q = self.data.samples.first().map(|s| s.v_row.len()).unwrap_or(1);
        let per: Result<Vec<(f64, DMatrix<f64>)>> = self
            .data
            .samples
            .par_iter()
            .enumerate()
            .map(|(n, s)| {
                let bw = &self.b_whites[n];
                let resid = &self.resids[n];
                let c = factor_at(&gamma, &s.v_row);
                let phi = bw * &c;
                let gram = phi.transpose() * &phi;
                let chol = chol_shifted(&gram)?;
                let g = phi.transpose() * resid;
                let h = lower_solve(&chol, &g)?;
                let mut logdet = self.logw_consts[n];
                for i in 0..chol.nrows() {
                    logdet += 2.0 * chol[(i, i)].ln();
                }
                let value = logdet + resid.norm_squared() - h.norm_squared();
                // dL/dC = 2 [ Bw^T phi (I+gram)^-1 - (Bw^T q)(phi^T q)^T ].
                let s_vec = chol
                    .transpose()
                    .solve_upper_triangular(&h)
                    .ok_or_else(|| Error::numerical("triangular solve failed"))?;
                let q_t = resid - &phi * s_vec;
                let bw_phi = bw.transpose() * &phi;
                let tmp = chol
                    .solve_lower_triangular(&bw_phi.transpose())
                    .and_then(|v| chol.transpose().solve_upper_triangular(&v))
                    .ok_or_else(|| Error::numerical("triangular solve failed"))?;
                let mut d_c = tmp.transpose() * 2.0;
                let bq = bw.transpose() * &q_t;
                let pq = phi.transpose() * &q_t;
                d_c.ger(-2.0, &bq, &pq, 1.0);
                Ok((value, d_c))
            })
            .collect();
        let mut value = 0.0;
        let mut grad_gamma = DMatrix::zeros(gamma.nrows(), gamma.ncols());
        for ((v, d_c), s) in per?.iter().zip(&self.data.samples) {
            value += v;
            for j in 0..d_c.ncols() {
                for i in 0..d_c.nrows() {
                    let scale = d_c[(i, j)];
                    if scale == 0.0 {
                        continue;
                    }
                    for k in 0..q {
                        grad_gamma[(i * q + k, j)] += scale * s.v_row[k];
                    }
                }
            }
        }
        value += self.pen_factor_value(&gamma)? + self.pen_mean_const;
        let (_, pg) = self.pen.grad(&DVector::zeros(self.mean_coefs.len()), &gamma)?;
        grad_gamma += pg;
        let grad = DVector::from_column_slice(grad_gamma.as_slice());
        Ok((value, grad))
    }

    fn begin_direction(&mut self, x: &DVector<f64>, d: &DVector<f64>) -> Result<()> {
        let gamma0 = self.gamma_of(x);
        let gamma_d = self.gamma_of(d);
        let per: Vec<RayFactorSample> = self
            .data
            .samples
            .par_iter()
            .enumerate()
            .map(|(n, s)| {
                let bw = &self.b_whites[n];
                let resid = &self.resids[n];
                let phi0 = bw * factor_at(&gamma0, &s.v_row);
                let phid = bw * factor_at(&gamma_d, &s.v_row);
                RayFactorSample {
                    g00: phi0.transpose() * &phi0,
                    g0d: phi0.transpose() * &phid,
                    gdd: phid.transpose() * &phid,
                    p0: phi0.transpose() * resid,
                    pd: phid.transpose() * resid,
                    rnorm2: resid.norm_squared(),
                    logw: self.logw_consts[n],
                }
            })
            .collect();
        let pen0 = self.pen_factor_value(&gamma0)?;
        let (_, pg) = self.pen.grad(&DVector::zeros(self.mean_coefs.len()), &gamma0)?;
        let pen1 = crate::fit::frob_dot(&pg, &gamma_d);
        let pen2 = self.pen_factor_value(&gamma_d)?;
        self.ray = Some(RayFactor {
            per,
            pen0,
            pen1,
            pen2,
        });
        Ok(())
    }

    fn eval_along(&mut self, alpha: f64) -> Result<f64> {
        let ray = self.ray.as_ref().ok_or_else(|| Error::invalid("no ray"))?;
        let r = self.rank;
        let mut value = ray.pen0 + alpha * (ray.pen1 + alpha * ray.pen2) + self.pen_mean_const;
        for s in &ray.per {
            let mut gram = s.g00.clone();
            for j in 0..r {
                for i in 0..r {
                    gram[(i, j)] +=
                        alpha * (s.g0d[(i, j)] + s.g0d[(j, i)] + alpha * s.gdd[(i, j)]);
                }
            }
            let chol = match chol_shifted(&gram) {
                Ok(c) => c,
                Err(_) => return Ok(f64::INFINITY),
            };
            let g = &s.p0 + &s.pd * alpha;
            let h = match lower_solve(&chol, &g) {
                Ok(h) => h,
                Err(_) => return Ok(f64::INFINITY),
            };
            let mut logdet = s.logw;
            for i in 0..r {
                logdet += 2.0 * chol[(i, i)].ln();
            }
            value += logdet + s.rnorm2 - h.norm_squared();
        }
        Ok(value)
    }
}

pub(crate) fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Noise-block evaluator over eta = log sigma^2. Only scalar-noise samples
/// depend on eta; their Gram summaries make every candidate O(r^3).
struct NoiseBlock {
    pen_const: f64,
    weighted_const: f64,
    per: Vec<NoiseSample>,
    ray: Option<(f64, f64)>,
}

struct NoiseSample {
    gram_raw: DMatrix<f64>,
    proj_raw: DVector<f64>,
    rnorm2: f64,
    n_obs: f64,
}

impl NoiseBlock {
    fn new(
        data: &Dataset,
        pen: &PenaltyOperator,
        params: &ModelParams,
    ) -> Result<Self> {
        let pen_const = pen.value(&params.mean_coefs, &params.factor_coefs)?;
        let mut per = Vec::new();
        let mut weighted_const = 0.0;
        let items: Result<Vec<(Option<NoiseSample>, f64)>> = data
            .samples
            .par_iter()
            .map(|s| {
                let c = factor_at(&params.factor_coefs, &s.v_row);
                if s.weights.is_some() {
                    let ws =
                        crate::likelihood::SampleWorkspace::build(s, &c, &params.mean_coefs, 1.0)?;
                    Ok((None, ws.logdet + ws.quad))
                } else {
                    let p = &s.b * &c;
                    let resid = &s.y - &s.h * &params.mean_coefs;
                    Ok((
                        Some(NoiseSample {
                            gram_raw: p.transpose() * &p,
                            proj_raw: p.transpose() * &resid,
                            rnorm2: resid.norm_squared(),
                            n_obs: s.n_obs() as f64,
                        }),
                        0.0,
                    ))
                }
            })
            .collect();
        for (ns, wc) in items? {
            if let Some(ns) = ns {
                per.push(ns);
            }
            weighted_const += wc;
        }
        Ok(NoiseBlock {
            pen_const,
            weighted_const,
            per,
            ray: None,
        })
    }

    /// Extended-value objective: out-of-range candidates score +inf so
    /// the backtracking search shrinks into the valid region.
    fn value_at(&self, eta: f64) -> Result<f64> {
        let nv = eta.exp();
        if !nv.is_finite() || nv <= 0.0 || nv < 1e-300 {
            return Ok(f64::INFINITY);
        }
        let mut value = self.pen_const + self.weighted_const;
        for s in &self.per {
            let gram = &s.gram_raw / nv;
            let chol = match chol_shifted(&gram) {
                Ok(c) => c,
                Err(_) => return Ok(f64::INFINITY),
            };
            let g = &s.proj_raw / nv;
            let h = match lower_solve(&chol, &g) {
                Ok(h) => h,
                Err(_) => return Ok(f64::INFINITY),
            };
            let mut logdet = s.n_obs * eta;
            for i in 0..chol.nrows() {
                logdet += 2.0 * chol[(i, i)].ln();
            }
            value += logdet + s.rnorm2 / nv - h.norm_squared();
        }
        Ok(value)
    }
}

impl Block for NoiseBlock {
    fn eval_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let eta = x[0];
        let nv = eta.exp();
        if !nv.is_finite() || nv <= 0.0 {
            return Err(Error::numerical("noise variance overflow"));
        }
        let mut value = self.pen_const + self.weighted_const;
        let mut d_sigma2 = 0.0;
        for s in &self.per {
            let r = s.gram_raw.nrows();
            let gram = &s.gram_raw / nv;
            let chol = chol_shifted(&gram)?;
            let g = &s.proj_raw / nv;
            let h = lower_solve(&chol, &g)?;
            let mut logdet = s.n_obs * eta;
            for i in 0..r {
                logdet += 2.0 * chol[(i, i)].ln();
            }
            value += logdet + s.rnorm2 / nv - h.norm_squared();
            let s_vec = chol
                .transpose()
                .solve_upper_triangular(&h)
                .ok_or_else(|| Error::numerical("triangular solve failed"))?;
            // ||q||^2 with q the whitened residual through the inverse:
            // r'r/nv - 2 s'g + s' (gram) s, all from cached pieces.
            let q_norm2 = s.rnorm2 / nv - 2.0 * s_vec.dot(&g)
                + (s_vec.transpose() * &gram * &s_vec)[(0, 0)];
            let inv_chol = chol
                .solve_lower_triangular(&DMatrix::identity(r, r))
                .ok_or_else(|| Error::numerical("triangular solve failed"))?;
            let trace_term = s.n_obs - r as f64 + inv_chol.norm_squared();
            d_sigma2 += (trace_term - q_norm2) / nv;
        }
        // Chain rule to eta.
        let grad = DVector::from_element(1, d_sigma2 * nv);
        Ok((value, grad))
    }

    fn begin_direction(&mut self, x: &DVector<f64>, d: &DVector<f64>) -> Result<()> {
        self.ray = Some((x[0], d[0]));
        Ok(())
    }

    fn eval_along(&mut self, alpha: f64) -> Result<f64> {
        let (x0, d) = self.ray.ok_or_else(|| Error::invalid("no ray"))?;
        self.value_at(x0 + alpha * d)
    }
}

// ---------------------------------------------------------------------------
// Inner loop
// ---------------------------------------------------------------------------

struct BlockOutcome {
    x: DVector<f64>,
    line_search_failed: bool,
    grad_norm: f64,
}

/// Armijo-backtracking steepest descent on one block.
///
/// `best` is the best objective recorded so far; acceptance is measured
/// against `min(f(x), best)` so the global trace stays exactly monotone
/// even across block switches.
fn descend_block(
    block: &mut dyn Block,
    x0: DVector<f64>,
    best: &mut f64,
    trace: &mut Vec<f64>,
    config: &FitConfig,
) -> Result<BlockOutcome> {
    let mut x = x0;
    let mut step = config.ls_init_step;
    let mut failed = false;
    let mut grad_norm = 0.0;
    for _ in 0..config.max_inner {
        let (f0, g) = block.eval_grad(&x)?;
        if !f0.is_finite() {
            return Err(Error::numerical("non-finite objective"));
        }
        grad_norm = g.norm();
        let f_ref = f0.min(*best);
        if grad_norm <= 1e-12 * (1.0 + f_ref.abs()) {
            break;
        }
        let gnorm2 = grad_norm * grad_norm;
        let d = -&g;
        block.begin_direction(&x, &d)?;
        let mut alpha = block.suggest_step().unwrap_or(step);
        let mut accepted = None;
        while alpha >= 1e-14 {
            let f_try = block.eval_along(alpha)?;
            if f_try.is_finite() && f_try <= f_ref - config.ls_armijo * alpha * gnorm2 {
                accepted = Some((alpha, f_try));
                break;
            }
            alpha *= config.ls_shrink;
        }
        match accepted {
            None => {
                failed = true;
                break;
            }
            Some((alpha, f_new)) => {
                x += &d * alpha;
                trace.push(f_new);
                let improved = f_ref - f_new;
                *best = f_new;
                // Warm-start the next search a bit above the accepted step.
                step = (alpha * 2.0).min(1e6).max(1e-14);
                if improved <= config.inner_tol * (1.0 + f_ref.abs()) {
                    break;
                }
            }
        }
    }
    Ok(BlockOutcome {
        x,
        line_search_failed: failed,
        grad_norm,
    })
}

// ---------------------------------------------------------------------------
// Public fitting entry points
// ---------------------------------------------------------------------------

/// Fit the model by block coordinate descent from the binned-covariance
/// initialization.
pub fn fit(samples: &[FunctionalSample], config: &FitConfig) -> Result<FittedModel> {
    config.validate()?;
    if samples.len() < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let bases = bases_for(samples, config)?;
    let data = prepare(samples, &bases)?;
    fit_prepared(samples, &data, &bases, config)
}

/// Fit using already-prepared designs (used by cross-validation).
pub fn fit_prepared(
    samples: &[FunctionalSample],
    data: &Dataset,
    bases: &ModelBases,
    config: &FitConfig,
) -> Result<FittedModel> {
    let pen = assemble(bases, config.lambdas)?;
    let mut init_cfg = InitConfig::for_data(samples.len(), bases.cov_z.len());
    if let Some(n) = config.n_bins {
        init_cfg.n_bins = n;
    }
    init_cfg.min_per_bin = config.min_per_bin;
    let (gamma0, sigma2_0) = initialize(samples, bases, config.rank, &init_cfg)?;
    let params = ModelParams {
        mean_coefs: DVector::zeros(bases.mean_dim()),
        factor_coefs: gamma0,
        log_noise_var: sigma2_0.ln(),
    };
    fit_from(params, data, bases, &pen, config)
}

/// Run the descent from explicit starting parameters.
pub fn fit_from(
    mut params: ModelParams,
    data: &Dataset,
    bases: &ModelBases,
    pen: &PenaltyOperator,
    config: &FitConfig,
) -> Result<FittedModel> {
    params.validate(bases)?;
    let (f_init, _) = crate::likelihood::objective(data, &params, pen)
        .map_err(|e| Error::numerical(format!("objective not evaluable at start: {e}")))?;
    if !f_init.is_finite() {
        return Err(Error::numerical("objective not finite at start"));
    }
    let mut diagnostics = FitDiagnostics {
        objective_trace: vec![f_init],
        ..FitDiagnostics::default()
    };
    let mut best = f_init;
    let mut converged = false;
    let mut outer = 0;
    while outer < config.max_outer {
        outer += 1;
        let sweep_start = best;

        let mut mean_block = MeanBlock::new(data, pen, &params)?;
        let out = descend_block(
            &mut mean_block,
            params.mean_coefs.clone(),
            &mut best,
            &mut diagnostics.objective_trace,
            config,
        )?;
        params.mean_coefs = out.x;
        diagnostics.line_search_failures += out.line_search_failed as usize;
        diagnostics.final_grad_norms[0] = out.grad_norm;
        drop(mean_block);

        let mut factor_block = FactorBlock::new(data, pen, &params)?;
        let x0 = DVector::from_column_slice(params.factor_coefs.as_slice());
        let out = descend_block(
            &mut factor_block,
            x0,
            &mut best,
            &mut diagnostics.objective_trace,
            config,
        )?;
        params.factor_coefs = DMatrix::from_column_slice(
            params.factor_coefs.nrows(),
            params.factor_coefs.ncols(),
            out.x.as_slice(),
        );
        diagnostics.line_search_failures += out.line_search_failed as usize;
        diagnostics.final_grad_norms[1] = out.grad_norm;
        drop(factor_block);

        if !data.all_weighted {
            let mut noise_block = NoiseBlock::new(data, pen, &params)?;
            let out = descend_block(
                &mut noise_block,
                DVector::from_element(1, params.log_noise_var),
                &mut best,
                &mut diagnostics.objective_trace,
                config,
            )?;
            params.log_noise_var = out.x[0];
            diagnostics.line_search_failures += out.line_search_failed as usize;
            diagnostics.final_grad_norms[2] = out.grad_norm;
        } else {
            diagnostics.final_grad_norms[2] = 0.0;
        }

        if sweep_start - best <= config.rel_tol * (1.0 + sweep_start.abs()) {
            converged = true;
            break;
        }
    }
    diagnostics.outer_iters = outer;
    diagnostics.converged = converged;
    diagnostics.final_objective = best;

    Ok(FittedModel {
        params,
        bases: bases.clone(),
        lambdas: config.lambdas,
        diagnostics,
        meta: TrainingMeta {
            n_samples: data.n_samples(),
            n_obs: data.total_obs(),
            t_range: data.t_range,
            z_range: data.z_range,
            heteroscedastic: data.all_weighted,
            seed: config.seed,
        },
    })
}

/// Held-out prediction mean squared error under a seeded conditioning split.
#[derive(Clone, Debug)]
pub struct MseReport {
    pub mse: f64,
    pub n_points: usize,
    pub n_skipped: usize,
}

/// Condition each curve's scores on a seeded random fraction of its points
/// and measure squared error on the rest.
pub fn predict_mse(
    model: &FittedModel,
    samples: &[FunctionalSample],
    observe_fraction: f64,
    seed: u64,
) -> Result<MseReport> {
    if !(0.0 < observe_fraction && observe_fraction < 1.0) {
        return Err(Error::invalid("observe fraction must be in (0, 1)"));
    }
    let per: Result<Vec<Option<(f64, usize)>>> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, s)| {
            let split = match split_sample(s, observe_fraction, seed, idx as u64) {
                Some(sp) => sp,
                None => return Ok(None),
            };
            let posterior = crate::predict::infer_scores(model, &split.observed)?;
            let (mean, _) = crate::predict::predict_curve(
                model,
                &posterior,
                s.covariate,
                &split.holdout_times,
                crate::predict::PredictTarget::Observation,
            )?;
            let mut sq = 0.0;
            for (i, &y) in split.holdout_values.iter().enumerate() {
                let d = y - mean[i];
                sq += d * d;
            }
            Ok(Some((sq, split.holdout_values.len())))
        })
        .collect();
    let mut sq_sum = 0.0;
    let mut n_points = 0usize;
    let mut n_skipped = 0usize;
    for item in per? {
        match item {
            Some((sq, n)) => {
                sq_sum += sq;
                n_points += n;
            }
            None => n_skipped += 1,
        }
    }
    if n_points == 0 {
        return Err(Error::data("no holdout points to score"));
    }
    if n_skipped > 0 {
        log::warn!("{n_skipped} curves skipped (fewer than 2 observations)");
    }
    Ok(MseReport {
        mse: sq_sum / n_points as f64,
        n_points,
        n_skipped,
    })
}

pub(crate) struct SampleSplit {
    pub observed: FunctionalSample,
    pub holdout_times: Vec<f64>,
    pub holdout_values: Vec<f64>,
}

/// Seeded per-curve split into conditioning and holdout points. Returns
/// `None` when the curve has fewer than 2 observations.
pub(crate) fn split_sample(
    sample: &FunctionalSample,
    observe_fraction: f64,
    seed: u64,
    stream: u64,
) -> Option<SampleSplit> {
    use rand::Rng;
    use rand::SeedableRng;
    let m_n = sample.len();
    if m_n < 2 {
        return None;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
    let k = ((observe_fraction * m_n as f64).round() as usize).clamp(1, m_n - 1);
    let mut index: Vec<usize> = (0..m_n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..m_n);
        index.swap(i, j);
    }
    let mut chosen = index[..k].to_vec();
    chosen.sort_unstable();
    let mut mask = vec![false; m_n];
    for &i in &chosen {
        mask[i] = true;
    }
    let observed = FunctionalSample {
        id: format!("{}/obs", sample.id),
        times: chosen.iter().map(|&i| sample.times[i]).collect(),
        values: chosen.iter().map(|&i| sample.values[i]).collect(),
        covariate: sample.covariate,
        noise_sd: sample
            .noise_sd
            .as_ref()
            .map(|sd| chosen.iter().map(|&i| sd[i]).collect()),
    };
    let holdout: Vec<usize> = (0..m_n).filter(|i| !mask[*i]).collect();
    Some(SampleSplit {
        observed,
        holdout_times: holdout.iter().map(|&i| sample.times[i]).collect(),
        holdout_values: holdout.iter().map(|&i| sample.values[i]).collect(),
    })
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// Candidate smoothing weights, searched in two stages: the mean pair on a
/// reduced model with the factor frozen at its initialization, then the
/// covariance pair on the full model.
#[derive(Clone, Debug)]
pub struct LambdaGrid {
    pub t_mean: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub t_cov: Vec<f64>,
    pub z_cov: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CvEntry {
    pub lambdas: Lambdas,
    /// Mean held-out predictive negative log-likelihood per point.
    pub score: f64,
    pub stage: u8,
    pub folds_used: usize,
}

/// K-fold cross-validation by whole curves.
pub fn cross_validate(
    samples: &[FunctionalSample],
    config: &FitConfig,
    grid: &LambdaGrid,
) -> Result<(Lambdas, Vec<CvEntry>)> {
    if grid.t_mean.is_empty()
        || grid.z_mean.is_empty()
        || grid.t_cov.is_empty()
        || grid.z_cov.is_empty()
    {
        return Err(Error::invalid("lambda grid must be nonempty in all four axes"));
    }
    if config.cv_folds < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    let folds = make_folds(samples.len(), config.cv_folds, config.seed);
    let mut table = Vec::new();

    // Stage 1: mean lambdas on the mean-only reduced model.
    let mut best_mean = (grid.t_mean[0], grid.z_mean[0]);
    let mut best_score = f64::INFINITY;
    for &lt in &grid.t_mean {
        for &lz in &grid.z_mean {
            let lambdas = Lambdas {
                t_mean: lt,
                z_mean: lz,
                t_cov: config.lambdas.t_cov,
                z_cov: config.lambdas.z_cov,
            };
            let (score, folds_used) =
                cv_score(samples, config, &folds, lambdas, CvStage::MeanOnly)?;
            table.push(CvEntry {
                lambdas,
                score,
                stage: 1,
                folds_used,
            });
            if score < best_score
                || (score == best_score && lt + lz > best_mean.0 + best_mean.1)
            {
                best_score = score;
                best_mean = (lt, lz);
            }
        }
    }

    // Stage 2: covariance lambdas on the full model.
    let mut best = Lambdas {
        t_mean: best_mean.0,
        z_mean: best_mean.1,
        t_cov: grid.t_cov[0],
        z_cov: grid.z_cov[0],
    };
    let mut best_score = f64::INFINITY;
    for &lt in &grid.t_cov {
        for &lz in &grid.z_cov {
            let lambdas = Lambdas {
                t_mean: best_mean.0,
                z_mean: best_mean.1,
                t_cov: lt,
                z_cov: lz,
            };
            let (score, folds_used) = cv_score(samples, config, &folds, lambdas, CvStage::Full)?;
            table.push(CvEntry {
                lambdas,
                score,
                stage: 2,
                folds_used,
            });
            if score < best_score
                || (score == best_score && lt + lz > best.t_cov + best.z_cov)
            {
                best_score = score;
                best = lambdas;
            }
        }
    }
    Ok((best, table))
}

#[derive(Clone, Copy, PartialEq)]
enum CvStage {
    MeanOnly,
    Full,
}

fn make_folds(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF01D));
    let mut index: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        index.swap(i, j);
    }
    let mut folds = vec![Vec::new(); k];
    for (pos, idx) in index.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    folds
}

fn cv_score(
    samples: &[FunctionalSample],
    config: &FitConfig,
    folds: &[Vec<usize>],
    lambdas: Lambdas,
    stage: CvStage,
) -> Result<(f64, usize)> {
    let mut total_nll = 0.0;
    let mut total_points = 0usize;
    let mut folds_used = 0usize;
    for (fold_idx, heldout) in folds.iter().enumerate() {
        let mut mask = vec![false; samples.len()];
        for &i in heldout {
            mask[i] = true;
        }
        let train: Vec<FunctionalSample> = samples
            .iter()
            .enumerate()
            .filter(|(i, _)| !mask[*i])
            .map(|(_, s)| s.clone())
            .collect();
        let test: Vec<&FunctionalSample> =
            heldout.iter().map(|&i| &samples[i]).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let mut fold_config = config.clone();
        fold_config.lambdas = lambdas;
        if stage == CvStage::MeanOnly {
            // One sweep of the mean block is enough: that subproblem is
            // quadratic and the factor stays at its initialization.
            fold_config.max_outer = 1;
        }
        let model = match fit(&train, &fold_config) {
            Ok(m) => m,
            Err(Error::Data(msg)) | Err(Error::InvalidArgument(msg)) => {
                log::warn!("fold {fold_idx} skipped: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        for (t_idx, s) in test.iter().enumerate() {
            if let Some((nll, n)) = crate::predict::heldout_predictive_nll(
                &model,
                s,
                0.25,
                derive_seed(config.seed, (fold_idx * 65_537 + t_idx) as u64),
            )? {
                total_nll += nll;
                total_points += n;
            }
        }
        folds_used += 1;
    }
    if total_points == 0 {
        return Err(Error::data("cross-validation scored no points"));
    }
    Ok((total_nll / total_points as f64, folds_used))
}
