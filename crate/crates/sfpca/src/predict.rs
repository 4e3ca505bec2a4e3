//! Score inference and curve prediction for new partially observed curves.
//!
//! Conditioning a new curve's observations on the fitted model is plain
//! Gaussian conditioning: the scores on the covariance eigenvectors at the
//! curve's covariate are jointly Gaussian with the observations, giving a
//! closed-form posterior mean and covariance, and pointwise predictive
//! means and variances anywhere on the time axis.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::DomainPolicy;
use crate::error::{Error, Result};
use crate::fit::{split_sample, FittedModel};
use crate::model::{eigen_at, FunctionalSample};

/// Posterior of a new curve's scores on the covariance eigenvectors at its
/// covariate.
#[derive(Clone, Debug)]
pub struct ScorePosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Eigenvector coefficients at the curve's covariate, m x r.
    pub basis_vectors: DMatrix<f64>,
    /// Prior score variances (the covariance eigenvalues), largest first.
    pub prior_var: DVector<f64>,
}

/// What the predictive variance should cover.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictTarget {
    /// A new noisy observation: includes the noise variance.
    Observation,
    /// The latent curve value: smooth part only.
    Latent,
}

/// Condition the score posterior on a curve's observations.
///
/// The noise term is the sample's per-observation measurement variances
/// when present, the fitted noise variance otherwise. A covariate outside
/// the training range is allowed with a warning; the spline extrapolation
/// there is polynomial and unreliable.
pub fn infer_scores(model: &FittedModel, sample: &FunctionalSample) -> Result<ScorePosterior> {
    sample.validate()?;
    if sample.is_empty() {
        return Err(Error::invalid("need at least one observation"));
    }
    let (z_lo, z_hi) = model.meta.z_range;
    if sample.covariate < z_lo || sample.covariate > z_hi {
        log::warn!(
            "sample {}: covariate {} outside trained range [{z_lo}, {z_hi}]; extrapolating",
            sample.id,
            sample.covariate
        );
    }
    let (prior_var, vectors) = eigen_at(
        &model.params,
        sample.covariate,
        &model.bases.cov_z,
        DomainPolicy::Extrapolate,
    )?;
    let r = model.params.rank();
    let m_n = sample.len();

    // Stacked designs at the observation points.
    let mut b_star = DMatrix::zeros(m_n, model.bases.cov_t.len());
    let mut h_star = DMatrix::zeros(m_n, model.bases.mean_dim());
    let u_row = model
        .bases
        .mean_z
        .eval_with(sample.covariate, DomainPolicy::Extrapolate)?;
    for (i, &t) in sample.times.iter().enumerate() {
        let b = model.bases.cov_t.eval_with(t, DomainPolicy::Extrapolate)?;
        let a = model.bases.mean_t.eval_with(t, DomainPolicy::Extrapolate)?;
        b_star.row_mut(i).copy_from(&b.transpose());
        h_star
            .row_mut(i)
            .copy_from(&crate::basis::kron_vec(&a, &u_row).transpose());
    }

    // Cross-covariance loading G = B* Theta* D*; marginal = G Theta*^T B*^T
    // restructured as B* Sigma B*^T + noise.
    let loadings = &b_star * &vectors; // m_n x r
    let mut marginal = DMatrix::zeros(m_n, m_n);
    for j in 0..r {
        let col = loadings.column(j).clone_owned();
        marginal.syger(prior_var[j], &col, &col, 1.0);
    }
    for i in 0..m_n {
        for j in (i + 1)..m_n {
            marginal[(i, j)] = marginal[(j, i)];
        }
    }
    match &sample.noise_sd {
        Some(sd) => {
            for (i, s) in sd.iter().enumerate() {
                marginal[(i, i)] += s * s;
            }
        }
        None => {
            let nv = model.params.noise_var();
            for i in 0..m_n {
                marginal[(i, i)] += nv;
            }
        }
    }
    let chol = nalgebra::Cholesky::new(marginal).ok_or_else(|| {
        Error::numerical(format!(
            "sample {}: singular conditioning covariance",
            sample.id
        ))
    })?;
    let resid = DVector::from_column_slice(&sample.values) - &h_star * &model.params.mean_coefs;
    // Cross term B* Theta* D, columns scaled by the prior variances.
    let mut cross = loadings.clone();
    for j in 0..r {
        cross.column_mut(j).scale_mut(prior_var[j]);
    }
    let solved = chol.solve(&cross); // marginal^-1 B* Theta* D
    let mean = solved.transpose() * &resid;
    let mut cov = DMatrix::zeros(r, r);
    for i in 0..r {
        cov[(i, i)] = prior_var[i];
    }
    cov -= cross.transpose() * &solved;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(ScorePosterior {
        mean,
        cov,
        basis_vectors: vectors,
        prior_var,
    })
}

/// Pointwise predictive mean and variance on a time grid.
pub fn predict_curve(
    model: &FittedModel,
    posterior: &ScorePosterior,
    z: f64,
    t_grid: &[f64],
    target: PredictTarget,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let u_row = model.bases.mean_z.eval_with(z, DomainPolicy::Extrapolate)?;
    let nv = model.params.noise_var();
    let mut mean = DVector::zeros(t_grid.len());
    let mut var = DVector::zeros(t_grid.len());
    for (g, &t) in t_grid.iter().enumerate() {
        let b = model.bases.cov_t.eval_with(t, DomainPolicy::Extrapolate)?;
        let a = model.bases.mean_t.eval_with(t, DomainPolicy::Extrapolate)?;
        let h = crate::basis::kron_vec(&a, &u_row);
        let fb = posterior.basis_vectors.transpose() * &b; // r eigenfunction values
        mean[g] = h.dot(&model.params.mean_coefs) + fb.dot(&posterior.mean);
        let smooth = (fb.transpose() * &posterior.cov * &fb)[(0, 0)];
        var[g] = match target {
            PredictTarget::Observation => smooth + nv,
            PredictTarget::Latent => smooth,
        };
    }
    Ok((mean, var))
}

/// Fraction of variation explained on a sample set.
///
/// Each curve's scores are inferred from a seeded random fraction of its
/// points and the model reconstruction is compared with the data at every
/// point. The baseline is the pointwise cross-curve mean when all curves
/// share one time grid, and the global observation mean otherwise.
pub fn fve(
    model: &FittedModel,
    samples: &[FunctionalSample],
    observe_fraction: f64,
    seed: u64,
) -> Result<f64> {
    if !(0.0 < observe_fraction && observe_fraction < 1.0) {
        return Err(Error::invalid("observe fraction must be in (0, 1)"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }

    // Numerator: residuals of the score-conditioned reconstruction.
    let per: Result<Vec<Option<f64>>> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, s)| {
            let split = match split_sample(s, observe_fraction, seed, idx as u64) {
                Some(sp) => sp,
                None => return Ok(None),
            };
            let posterior = infer_scores(model, &split.observed)?;
            let (mean, _) = predict_curve(
                model,
                &posterior,
                s.covariate,
                &s.times,
                PredictTarget::Latent,
            )?;
            let mut sq = 0.0;
            for (i, &y) in s.values.iter().enumerate() {
                let d = y - mean[i];
                sq += d * d;
            }
            Ok(Some(sq))
        })
        .collect();
    let mut numerator = 0.0;
    let mut skipped = 0usize;
    for item in per? {
        match item {
            Some(sq) => numerator += sq,
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} curves skipped in FVE (fewer than 2 observations)");
    }

    // Denominator: centered total sum of squares.
    let common_grid = samples
        .windows(2)
        .all(|w| w[0].times == w[1].times);
    let mut denominator = 0.0;
    if common_grid {
        let m = samples[0].len();
        let mut pointwise = vec![0.0; m];
        for s in samples {
            for (i, &y) in s.values.iter().enumerate() {
                pointwise[i] += y;
            }
        }
        for v in &mut pointwise {
            *v /= samples.len() as f64;
        }
        for s in samples {
            for (i, &y) in s.values.iter().enumerate() {
                let d = y - pointwise[i];
                denominator += d * d;
            }
        }
    } else {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in samples {
            total += s.values.iter().sum::<f64>();
            count += s.len();
        }
        let global = total / count as f64;
        for s in samples {
            for &y in &s.values {
                let d = y - global;
                denominator += d * d;
            }
        }
    }
    if denominator <= f64::MIN_POSITIVE {
        return Err(Error::data("constant data: fraction of variation undefined"));
    }
    Ok(1.0 - numerator / denominator)
}

/// Gaussian predictive negative log-likelihood of a curve's holdout points
/// under a seeded conditioning split; `None` when the curve is too short
/// to split. Used as the cross-validation score.
pub fn heldout_predictive_nll(
    model: &FittedModel,
    sample: &FunctionalSample,
    observe_fraction: f64,
    seed: u64,
) -> Result<Option<(f64, usize)>> {
    let split = match split_sample(sample, observe_fraction, seed, 1) {
        Some(sp) => sp,
        None => return Ok(None),
    };
    let posterior = infer_scores(model, &split.observed)?;
    let (mean, var) = predict_curve(
        model,
        &posterior,
        sample.covariate,
        &split.holdout_times,
        PredictTarget::Observation,
    )?;
    let mut nll = 0.0;
    for (i, &y) in split.holdout_values.iter().enumerate() {
        let v = var[i].max(f64::MIN_POSITIVE);
        let d = y - mean[i];
        nll += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v);
    }
    Ok(Some((nll, split.holdout_values.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{FitDiagnostics, TrainingMeta};
    use crate::model::{ModelBases, ModelParams};
    use crate::penalty::Lambdas;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    /// A handmade model with known parameters (no fitting involved).
    fn toy_model(seed: u64, rank: usize, noise_var: f64) -> FittedModel {
        let bases = ModelBases::build(6, 4, 6, 5, 3, (0.0, 1.0), (0.0, 1.0)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams {
            mean_coefs: DVector::from_fn(bases.mean_dim(), |_, _| rng.gen_range(-1.0..1.0)),
            factor_coefs: DMatrix::from_fn(bases.factor_rows(), rank, |_, _| {
                rng.gen_range(-0.8..0.8)
            }),
            log_noise_var: noise_var.ln(),
        };
        FittedModel {
            params,
            bases,
            lambdas: Lambdas::zero(),
            diagnostics: FitDiagnostics::default(),
            meta: TrainingMeta {
                n_samples: 0,
                n_obs: 0,
                t_range: (0.0, 1.0),
                z_range: (0.0, 1.0),
                heteroscedastic: false,
                seed,
            },
        }
    }

    fn model_mean_at(model: &FittedModel, t: f64, z: f64) -> f64 {
        crate::basis::tensor_row(&model.bases.mean_t, &model.bases.mean_z, t, z)
            .unwrap()
            .dot(&model.params.mean_coefs)
    }

    #[test]
    fn zero_residual_gives_zero_posterior_mean() {
        let model = toy_model(1, 2, 0.2);
        let z = 0.4;
        let times = vec![0.1, 0.35, 0.6, 0.9];
        let values: Vec<f64> = times.iter().map(|&t| model_mean_at(&model, t, z)).collect();
        let sample = FunctionalSample {
            id: "mean".into(),
            times,
            values,
            covariate: z,
            noise_sd: None,
        };
        let post = infer_scores(&model, &sample).unwrap();
        assert!(post.mean.abs().max() < 1e-10);
    }

    #[test]
    fn infinite_noise_recovers_the_prior() {
        let model = toy_model(2, 2, 0.2);
        let z = 0.55;
        let times = vec![0.2, 0.5, 0.85];
        let values = vec![3.0, -1.0, 2.5];
        let sample = FunctionalSample {
            id: "vague".into(),
            times,
            values,
            covariate: z,
            noise_sd: Some(vec![1e7; 3]),
        };
        let post = infer_scores(&model, &sample).unwrap();
        assert!(post.mean.abs().max() < 1e-4);
        for j in 0..2 {
            assert_abs_diff_eq!(
                post.cov[(j, j)],
                post.prior_var[j],
                epsilon = 1e-6 * (1.0 + post.prior_var[j])
            );
        }
    }

    #[test]
    fn matches_dense_joint_conditioning_oracle() {
        let model = toy_model(3, 3, 0.3);
        let z = 0.62;
        let times = vec![0.05, 0.3, 0.55, 0.7, 0.95];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f64> = times.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sample = FunctionalSample {
            id: "joint".into(),
            times: times.clone(),
            values: values.clone(),
            covariate: z,
            noise_sd: None,
        };
        let post = infer_scores(&model, &sample).unwrap();

        // Oracle: build the joint Gaussian of (y, xi) and condition by
        // dense block inversion.
        let (d, vectors) = eigen_at(
            &model.params,
            z,
            &model.bases.cov_z,
            DomainPolicy::Strict,
        )
        .unwrap();
        let m_n = times.len();
        let r = 3;
        let mut b_star = DMatrix::zeros(m_n, model.bases.cov_t.len());
        for (i, &t) in times.iter().enumerate() {
            b_star
                .row_mut(i)
                .copy_from(&model.bases.cov_t.eval(t).unwrap().transpose());
        }
        let loadings = &b_star * &vectors;
        let mut top = &loadings * DMatrix::from_diagonal(&d) * loadings.transpose();
        for i in 0..m_n {
            top[(i, i)] += model.params.noise_var();
        }
        let cross = &loadings * DMatrix::from_diagonal(&d);
        let top_inv = top.try_inverse().unwrap();
        let resid = DVector::from_column_slice(&values)
            - DVector::from_fn(m_n, |i, _| model_mean_at(&model, times[i], z));
        let mean_oracle = cross.transpose() * &top_inv * resid;
        let cov_oracle =
            DMatrix::from_diagonal(&d) - cross.transpose() * &top_inv * &cross;
        assert!((post.mean - mean_oracle).abs().max() < 1e-9);
        assert!((post.cov - cov_oracle).abs().max() < 1e-9);
    }

    #[test]
    fn posterior_contracts_the_prior() {
        let model = toy_model(4, 3, 0.15);
        let sample = FunctionalSample {
            id: "c".into(),
            times: vec![0.1, 0.2, 0.4, 0.6, 0.8],
            values: vec![1.0, 0.4, -0.2, 0.9, 1.3],
            covariate: 0.3,
            noise_sd: None,
        };
        let post = infer_scores(&model, &sample).unwrap();
        let gap = DMatrix::from_diagonal(&post.prior_var) - &post.cov;
        let min_eig = gap.symmetric_eigenvalues().min();
        assert!(min_eig >= -1e-10, "contraction violated: {min_eig}");
    }

    #[test]
    fn extra_observations_never_inflate_posterior_variance() {
        let model = toy_model(5, 2, 0.25);
        let times = vec![0.1, 0.25, 0.4, 0.55, 0.7, 0.85];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let values: Vec<f64> = times.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut prev = None;
        for k in 1..=times.len() {
            let sample = FunctionalSample {
                id: format!("n{k}"),
                times: times[..k].to_vec(),
                values: values[..k].to_vec(),
                covariate: 0.45,
                noise_sd: None,
            };
            let post = infer_scores(&model, &sample).unwrap();
            if let Some(prev_cov) = prev {
                let prev_cov: DMatrix<f64> = prev_cov;
                for j in 0..2 {
                    assert!(post.cov[(j, j)] <= prev_cov[(j, j)] + 1e-12);
                }
            }
            prev = Some(post.cov.clone());
        }
    }

    #[test]
    fn observation_variance_is_at_least_the_noise_floor() {
        let model = toy_model(6, 2, 0.3);
        let sample = FunctionalSample {
            id: "v".into(),
            times: vec![0.2, 0.6],
            values: vec![0.5, -0.5],
            covariate: 0.5,
            noise_sd: None,
        };
        let post = infer_scores(&model, &sample).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let (_, var_obs) =
            predict_curve(&model, &post, 0.5, &grid, PredictTarget::Observation).unwrap();
        let (_, var_lat) =
            predict_curve(&model, &post, 0.5, &grid, PredictTarget::Latent).unwrap();
        for i in 0..grid.len() {
            assert!(var_obs[i] >= 0.3 - 1e-12);
            assert_abs_diff_eq!(var_obs[i] - var_lat[i], 0.3, epsilon = 1e-12);
            assert!(var_lat[i] >= -1e-12);
        }
    }

    #[test]
    fn tiny_noise_interpolates_model_draws() {
        let model = toy_model(7, 2, 0.2);
        let z = 0.35;
        // Draw a curve from the model itself so it is exactly representable.
        let (d, vectors) = eigen_at(
            &model.params,
            z,
            &model.bases.cov_z,
            DomainPolicy::Strict,
        )
        .unwrap();
        let xi = DVector::from_vec(vec![0.8 * d[0].sqrt(), -1.1 * d[1].sqrt()]);
        let times: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|&t| {
                let b = model.bases.cov_t.eval(t).unwrap();
                let f = vectors.transpose() * b;
                model_mean_at(&model, t, z) + f.dot(&xi)
            })
            .collect();
        let sample = FunctionalSample {
            id: "interp".into(),
            times: times.clone(),
            values: values.clone(),
            covariate: z,
            noise_sd: Some(vec![1e-4; times.len()]),
        };
        let post = infer_scores(&model, &sample).unwrap();
        let (mean, _) =
            predict_curve(&model, &post, z, &times, PredictTarget::Latent).unwrap();
        for (i, &y) in values.iter().enumerate() {
            assert!(
                (mean[i] - y).abs() < 1e-5,
                "interpolation off by {} at {}",
                (mean[i] - y).abs(),
                times[i]
            );
        }
    }

    #[test]
    fn predictions_invariant_to_factor_rotation() {
        // Post-multiplying the factor coefficients by an orthogonal matrix
        // leaves Sigma(z), and therefore every prediction, unchanged even
        // when the spectrum is degenerate.
        let model = toy_model(8, 2, 0.2);
        let mut rotated = model.clone();
        let theta = 0.73f64;
        let rot =
            DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        rotated.params.factor_coefs = &model.params.factor_coefs * rot;
        let sample = FunctionalSample {
            id: "rot".into(),
            times: vec![0.15, 0.4, 0.75],
            values: vec![1.2, -0.3, 0.8],
            covariate: 0.6,
            noise_sd: None,
        };
        let grid: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let p1 = infer_scores(&model, &sample).unwrap();
        let p2 = infer_scores(&rotated, &sample).unwrap();
        let (m1, v1) = predict_curve(&model, &p1, 0.6, &grid, PredictTarget::Observation).unwrap();
        let (m2, v2) =
            predict_curve(&rotated, &p2, 0.6, &grid, PredictTarget::Observation).unwrap();
        assert!((m1 - m2).abs().max() < 1e-9);
        assert!((v1 - v2).abs().max() < 1e-9);
    }

    #[test]
    fn fve_perfect_and_baseline_cases() {
        let model = toy_model(9, 2, 1e-8);
        let z = 0.5;
        // Curves drawn exactly from the model: reconstruction is near
        // perfect and the fraction explained approaches 1.
        let times: Vec<f64> = (0..15).map(|i| i as f64 / 14.0).collect();
        let (d, vectors) = eigen_at(
            &model.params,
            z,
            &model.bases.cov_z,
            DomainPolicy::Strict,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let samples: Vec<FunctionalSample> = (0..30)
            .map(|k| {
                let xi = DVector::from_fn(2, |j, _| {
                    d[j].sqrt() * rng.gen_range(-1.5..1.5f64)
                });
                let values: Vec<f64> = times
                    .iter()
                    .map(|&t| {
                        let b = model.bases.cov_t.eval(t).unwrap();
                        let f = vectors.transpose() * b;
                        model_mean_at(&model, t, z) + f.dot(&xi)
                    })
                    .collect();
                FunctionalSample {
                    id: format!("f{k}"),
                    times: times.clone(),
                    values,
                    covariate: z,
                    noise_sd: None,
                }
            })
            .collect();
        let v = fve(&model, &samples, 0.5, 7).unwrap();
        assert!(v > 0.999, "fve {v}");

        // Constant data has no variation to explain.
        let flat: Vec<FunctionalSample> = (0..5)
            .map(|k| FunctionalSample {
                id: format!("c{k}"),
                times: times.clone(),
                values: vec![2.0; times.len()],
                covariate: z,
                noise_sd: None,
            })
            .collect();
        assert!(fve(&model, &flat, 0.5, 7).is_err());
    }
}
