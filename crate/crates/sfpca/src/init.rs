//! Parameter initialization by covariate binning.
//!
//! The factor coefficients get their starting value from a covariate-free
//! covariance estimate per covariate bin: each bin's pooled observations
//! give a smoothed covariance on the time basis, its best rank-r factor is
//! the bin's target, the targets are sign/order aligned across bins, and a
//! per-entry least-squares fit of the covariate splines to the aligned
//! targets yields the starting coefficient matrix. The same pass produces
//! a starting noise variance from the residual-minus-smooth variance gap.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::SplineBasis;
use crate::error::{Error, Result};
use crate::model::{FunctionalSample, ModelBases};
use crate::penalty::{kron, raw_penalty_matrix};

/// Tuning for the initializer; the defaults follow the sample count.
#[derive(Clone, Debug)]
pub struct InitConfig {
    pub n_bins: usize,
    /// Bins with fewer samples are dropped.
    pub min_per_bin: usize,
    /// Curvature penalty weight for the per-bin mean fit.
    pub mean_smoothing: f64,
    /// Ridge fallback scale for the covariance regression and the
    /// covariate-spline fit.
    pub ridge: f64,
    /// Lower bound for the starting noise variance.
    pub sigma2_floor: f64,
}

impl InitConfig {
    /// Defaults driven by the sample count and the covariate basis size:
    /// enough bins that the cross-bin spline fit smooths rather than
    /// interpolates the noisy per-bin targets (floor `cov_z_size + 2`),
    /// while keeping roughly fifteen curves per bin.
    pub fn for_data(n_samples: usize, cov_z_size: usize) -> Self {
        let floor = (cov_z_size + 2).min(15);
        InitConfig {
            n_bins: (n_samples / 15).clamp(floor, 15).max(1),
            min_per_bin: 10,
            mean_smoothing: 1e-2,
            ridge: 1e-8,
            sigma2_floor: 1e-4,
        }
    }
}

/// One covariate bin and its covariance estimate.
#[derive(Clone, Debug)]
pub struct BinSummary {
    pub bin_index: usize,
    /// Mean covariate of the bin members.
    pub z_center: f64,
    pub sample_idx: Vec<usize>,
    /// Smoothed PSD covariance estimate on the time basis.
    pub sigma_hat: Option<DMatrix<f64>>,
    /// Rank-r factor target.
    pub c_target: Option<DMatrix<f64>>,
    /// Mean squared residual of the bin mean fit.
    pub resid_var: f64,
    /// Mean fitted smooth variance at the observed points.
    pub smooth_var: f64,
}

/// Partition samples into equal-width covariate bins; underpopulated bins
/// are dropped with a warning.
pub fn bin_samples(
    samples: &[FunctionalSample],
    n_bins: usize,
    min_per_bin: usize,
) -> Result<Vec<BinSummary>> {
    if n_bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no samples to bin"));
    }
    let lo = samples.iter().map(|s| s.covariate).fold(f64::INFINITY, f64::min);
    let hi = samples
        .iter()
        .map(|s| s.covariate)
        .fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (idx, s) in samples.iter().enumerate() {
        let raw = ((s.covariate - lo) / width * n_bins as f64) as usize;
        members[raw.min(n_bins - 1)].push(idx);
    }
    let mut bins = Vec::new();
    for (b, idx) in members.into_iter().enumerate() {
        if idx.is_empty() {
            log::warn!("covariate bin {b} is empty; dropping it");
            continue;
        }
        if idx.len() < min_per_bin {
            log::warn!(
                "covariate bin {b} has {} samples (< {min_per_bin}); dropping it",
                idx.len()
            );
            continue;
        }
        let z_center =
            idx.iter().map(|&i| samples[i].covariate).sum::<f64>() / idx.len() as f64;
        bins.push(BinSummary {
            bin_index: b,
            z_center,
            sample_idx: idx,
            sigma_hat: None,
            c_target: None,
            resid_var: 0.0,
            smooth_var: 0.0,
        });
    }
    if bins.is_empty() {
        return Err(Error::invalid(format!(
            "every covariate bin has fewer than {min_per_bin} samples; use fewer bins"
        )));
    }
    Ok(bins)
}

/// Covariate-free covariance estimate for one bin.
///
/// Fits the pooled bin mean by penalized least squares on the time basis,
/// regresses off-diagonal residual cross-products onto the basis outer
/// products (the diagonal is excluded so the noise variance does not leak
/// into the smooth part), and projects the result onto the PSD cone by
/// eigenvalue clipping.
pub fn bin_covariance(
    mut bin: BinSummary,
    samples: &[FunctionalSample],
    cov_t: &SplineBasis,
    cfg: &InitConfig,
) -> Result<BinSummary> {
    let m = cov_t.len();
    let designs: Vec<DMatrix<f64>> = bin
        .sample_idx
        .iter()
        .map(|&i| {
            let s = &samples[i];
            let mut b = DMatrix::zeros(s.len(), m);
            for (row, &t) in s.times.iter().enumerate() {
                b.row_mut(row).copy_from(&cov_t.eval(t)?.transpose());
            }
            Ok(b)
        })
        .collect::<Result<_>>()?;

    // Pooled penalized least-squares mean curve.
    let pen = raw_penalty_matrix(cov_t);
    let mut btb = DMatrix::zeros(m, m);
    let mut bty = DVector::zeros(m);
    let mut n_obs = 0usize;
    for (b, &i) in designs.iter().zip(&bin.sample_idx) {
        btb += b.transpose() * b;
        bty += b.transpose() * DVector::from_column_slice(&samples[i].values);
        n_obs += samples[i].len();
    }
    let mut system = btb + pen * cfg.mean_smoothing;
    let ridge = cfg.ridge * system.trace() / m as f64;
    for i in 0..m {
        system[(i, i)] += ridge;
    }
    let mean_coef = nalgebra::Cholesky::new(system)
        .ok_or_else(|| Error::numerical("bin mean system not positive definite"))?
        .solve(&bty);

    // Normal equations for the off-diagonal cross-product regression on
    // the m^2 outer-product features, accumulated per curve:
    // sum over pairs (i != j) of u u^T with u = b_i (x) b_j.
    let mm = m * m;
    let mut normal = DMatrix::zeros(mm, mm);
    let mut rhs = DVector::zeros(mm);
    let mut resid_sq_sum = 0.0;
    for (b, &i) in designs.iter().zip(&bin.sample_idx) {
        let y = DVector::from_column_slice(&samples[i].values);
        let resid = &y - b * &mean_coef;
        resid_sq_sum += resid.norm_squared();
        let g = b.transpose() * b;
        normal += kron(&g, &g);
        let be = b.transpose() * &resid;
        rhs += crate::basis::kron_vec(&be, &be);
        for row in 0..b.nrows() {
            let brow = b.row(row).transpose();
            let u = crate::basis::kron_vec(&brow, &brow);
            normal.syger(-1.0, &u, &u, 1.0);
            rhs -= &u * (resid[row] * resid[row]);
        }
    }
    // syger only touched the lower triangle for the subtraction; the lower
    // triangle is the complete one, mirror it up.
    for i in 0..mm {
        for j in (i + 1)..mm {
            normal[(i, j)] = normal[(j, i)];
        }
    }
    let coef = match nalgebra::Cholesky::new(normal.clone()) {
        Some(c) => c.solve(&rhs),
        None => {
            let bump = cfg.ridge * normal.trace().max(1.0) / mm as f64;
            for i in 0..mm {
                normal[(i, i)] += bump;
            }
            nalgebra::Cholesky::new(normal)
                .ok_or_else(|| {
                    Error::numerical("bin covariance regression is rank-deficient")
                })?
                .solve(&rhs)
        }
    };
    let mut raw = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            raw[(i, j)] = coef[i * m + j];
        }
    }
    let sym = (&raw + raw.transpose()) * 0.5;

    // PSD projection by eigenvalue clipping.
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut sigma_hat = DMatrix::zeros(m, m);
    for k in 0..m {
        let lambda = eig.eigenvalues[k].max(0.0);
        if lambda > 0.0 {
            let v = eig.eigenvectors.column(k).clone_owned();
            sigma_hat.syger(lambda, &v, &v, 1.0);
        }
    }
    for i in 0..m {
        for j in (i + 1)..m {
            sigma_hat[(i, j)] = sigma_hat[(j, i)];
        }
    }

    bin.resid_var = resid_sq_sum / n_obs as f64;
    let mut smooth = 0.0;
    for b in &designs {
        for row in 0..b.nrows() {
            let brow = b.row(row).transpose();
            smooth += (brow.transpose() * &sigma_hat * &brow)[(0, 0)];
        }
    }
    bin.smooth_var = smooth / n_obs as f64;
    bin.sigma_hat = Some(sigma_hat);
    Ok(bin)
}

/// Best rank-r factor of a PSD matrix: eigenvectors of the top r
/// eigenvalues scaled by their square roots, signs fixed so each column's
/// largest-magnitude entry is positive.
pub fn rank_r_factor(sigma_hat: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let m = sigma_hat.nrows();
    let eig = nalgebra::SymmetricEigen::new(sigma_hat.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut c = DMatrix::zeros(m, r);
    for (j, &k) in order.iter().take(r).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        let scale = lambda.sqrt();
        let col = eig.eigenvectors.column(k);
        let mut max_idx = 0;
        let mut max_abs = 0.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_idx = i;
            }
        }
        let sign = if col[max_idx] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            c[(i, j)] = sign * scale * col[i];
        }
    }
    c
}

/// Align factor targets across bins and solve the per-entry least-squares
/// fit of the covariate basis to the aligned targets.
///
/// Bins are processed in covariate order; each bin's columns are greedily
/// permuted and sign-flipped to match the previous aligned factor, which
/// removes the per-bin eigenvector ambiguity before the spline fit while
/// leaving already-consistent targets untouched.
pub fn align_and_solve(
    bins: &[BinSummary],
    cov_z: &SplineBasis,
    r: usize,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    let q = cov_z.len();
    let targets: Vec<(&BinSummary, &DMatrix<f64>)> = bins
        .iter()
        .map(|b| {
            b.c_target
                .as_ref()
                .map(|c| (b, c))
                .ok_or_else(|| Error::invalid("bin has no factor target"))
        })
        .collect::<Result<_>>()?;
    if targets.is_empty() {
        return Err(Error::invalid("no bins to fit"));
    }
    let m = targets[0].1.nrows();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        targets[a]
            .0
            .z_center
            .partial_cmp(&targets[b].0.z_center)
            .unwrap()
    });

    let mut aligned: Vec<(f64, DMatrix<f64>)> = Vec::with_capacity(targets.len());
    for &u in &order {
        let (bin, c) = targets[u];
        let adjusted = match aligned.last() {
            None => c.clone(),
            Some((_, prev)) => {
                let mut used = vec![false; r];
                let mut out = DMatrix::zeros(m, r);
                for j in 0..r {
                    let prev_col = prev.column(j);
                    let mut best = None;
                    let mut best_abs = -1.0;
                    for k in 0..r {
                        if used[k] {
                            continue;
                        }
                        let dot = prev_col.dot(&c.column(k));
                        if dot.abs() > best_abs {
                            best_abs = dot.abs();
                            best = Some((k, dot));
                        }
                    }
                    let (k, dot) = best.expect("unused column remains");
                    used[k] = true;
                    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
                    for i in 0..m {
                        out[(i, j)] = sign * c[(i, k)];
                    }
                }
                out
            }
        };
        aligned.push((bin.z_center, adjusted));
    }

    if aligned.len() == 1 {
        log::warn!("single covariate bin: fitting covariate-constant factor coefficients");
        let (_, c) = &aligned[0];
        let mut gamma = DMatrix::zeros(m * q, r);
        for j in 0..r {
            for i in 0..m {
                for k in 0..q {
                    // Constant functions have equal B-spline coefficients.
                    gamma[(i * q + k, j)] = c[(i, j)];
                }
            }
        }
        return Ok(gamma);
    }

    let n_bins = aligned.len();
    let mut v_mat = DMatrix::zeros(n_bins, q);
    for (row, (z, _)) in aligned.iter().enumerate() {
        v_mat.row_mut(row).copy_from(&cov_z.eval(*z)?.transpose());
    }
    let mut vtv = v_mat.transpose() * &v_mat;
    for i in 0..q {
        vtv[(i, i)] += ridge;
    }
    let chol = nalgebra::Cholesky::new(vtv)
        .ok_or_else(|| Error::numerical("covariate design for the factor fit is singular"))?;
    let mut gamma = DMatrix::zeros(m * q, r);
    for j in 0..r {
        for i in 0..m {
            let targets_ij = DVector::from_iterator(
                n_bins,
                aligned.iter().map(|(_, c)| c[(i, j)]),
            );
            let beta = chol.solve(&(v_mat.transpose() * targets_ij));
            for k in 0..q {
                gamma[(i * q + k, j)] = beta[k];
            }
        }
    }
    Ok(gamma)
}

/// Ridge least-squares fit of the tensor-product mean surface, used to
/// pre-center the data before the per-bin covariance estimation. Without
/// it, covariate variation of the mean inside a bin leaks a spurious
/// component into the bin covariance (the per-bin mean curve depends on
/// time only and cannot absorb it), which can seed the descent in a bad
/// basin.
fn global_mean_fit(samples: &[FunctionalSample], bases: &ModelBases) -> Result<DVector<f64>> {
    let dim = bases.mean_dim();
    let mut xtx = DMatrix::zeros(dim, dim);
    let mut xty = DVector::zeros(dim);
    for s in samples {
        let pair = crate::model::design(s, bases)?;
        xtx += pair.h.transpose() * &pair.h;
        xty += pair.h.transpose() * DVector::from_column_slice(&s.values);
    }
    let ridge = 1e-8 * xtx.trace().max(1.0) / dim as f64;
    for i in 0..dim {
        xtx[(i, i)] += ridge;
    }
    nalgebra::Cholesky::new(xtx)
        .ok_or_else(|| Error::numerical("global mean system not positive definite"))
        .map(|c| c.solve(&xty))
}

/// Full initialization: starting factor coefficients and noise variance.
pub fn initialize(
    samples: &[FunctionalSample],
    bases: &ModelBases,
    r: usize,
    cfg: &InitConfig,
) -> Result<(DMatrix<f64>, f64)> {
    let theta_pre = global_mean_fit(samples, bases)?;
    let centered: Vec<FunctionalSample> = samples
        .par_iter()
        .map(|s| {
            let pair = crate::model::design(s, bases)?;
            let fitted = pair.h * &theta_pre;
            let values = s
                .values
                .iter()
                .zip(fitted.iter())
                .map(|(y, m)| y - m)
                .collect();
            Ok(FunctionalSample {
                values,
                ..s.clone()
            })
        })
        .collect::<Result<_>>()?;
    let samples = centered.as_slice();
    let bins = bin_samples(samples, cfg.n_bins, cfg.min_per_bin)?;
    let mut bins: Vec<BinSummary> = bins
        .into_par_iter()
        .map(|bin| bin_covariance(bin, samples, &bases.cov_t, cfg))
        .collect::<Result<_>>()?;
    for bin in &mut bins {
        let sigma = bin.sigma_hat.as_ref().expect("covariance just computed");
        bin.c_target = Some(rank_r_factor(sigma, r));
    }
    let gamma = align_and_solve(&bins, &bases.cov_z, r, cfg.ridge)?;
    let mut gaps: Vec<f64> = bins.iter().map(|b| b.resid_var - b.smooth_var).collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if gaps.len() % 2 == 1 {
        gaps[gaps.len() / 2]
    } else {
        0.5 * (gaps[gaps.len() / 2 - 1] + gaps[gaps.len() / 2])
    };
    Ok((gamma, median.max(cfg.sigma2_floor)))
}
