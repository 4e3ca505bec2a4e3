//! Roughness penalties for the mean and covariance coefficient blocks.
//!
//! Curvature in time and in the covariate is penalized through integrated
//! squared second derivatives. The bivariate penalties are reduced to
//! sparse Kronecker quadratic forms by re-expressing each marginal penalty
//! matrix through a collocation matrix on a regular grid, so a coefficient
//! slice that is linear across the grid sits exactly in the null space.

use nalgebra::{DMatrix, DVector};

use crate::basis::{DomainPolicy, SplineBasis};
use crate::error::{Error, Result};
use crate::model::ModelBases;
use crate::quadrature::gauss_legendre;

/// Smoothing weights for the four penalty terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Lambdas {
    /// Temporal curvature of the covariance factor functions.
    pub t_cov: f64,
    /// Covariate curvature of the covariance factor functions.
    pub z_cov: f64,
    /// Temporal curvature of the mean surface.
    pub t_mean: f64,
    /// Covariate curvature of the mean surface.
    pub z_mean: f64,
}

impl Lambdas {
    pub fn zero() -> Self {
        Lambdas {
            t_cov: 0.0,
            z_cov: 0.0,
            t_mean: 0.0,
            z_mean: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_t", self.t_cov),
            ("lambda_z", self.z_cov),
            ("lambda_t_mean", self.t_mean),
            ("lambda_z_mean", self.z_mean),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Assembled penalty matrices and their weights.
///
/// `s_t_cov`/`s_z_cov` act on each column of the covariance coefficient
/// matrix (length m*q); `s_t_mean`/`s_z_mean` act on the vectorized mean
/// coefficients (length l*p). All four are symmetric positive semi-definite
/// and immutable after assembly.
#[derive(Clone, Debug)]
pub struct PenaltyOperator {
    pub s_t_cov: DMatrix<f64>,
    pub s_z_cov: DMatrix<f64>,
    pub s_t_mean: DMatrix<f64>,
    pub s_z_mean: DMatrix<f64>,
    pub lambdas: Lambdas,
}

/// Integrated squared second derivative matrix of a basis:
/// `S[i, j] = integral of b_i''(t) b_j''(t) dt` over the basis domain.
pub fn raw_penalty_matrix(basis: &SplineBasis) -> DMatrix<f64> {
    let n = basis.len();
    let (nodes, weights) = gauss_legendre(basis.default_quad_order());
    let breaks = basis.breakpoints();
    let mut acc = DMatrix::zeros(n, n);
    for pair in breaks.windows(2) {
        let half = 0.5 * (pair[1] - pair[0]);
        let mid = 0.5 * (pair[1] + pair[0]);
        for (x, w) in nodes.iter().zip(&weights) {
            let d2 = basis
                .eval_deriv2_with(mid + half * x, DomainPolicy::Strict)
                .expect("quadrature node inside domain");
            acc.syger(half * w, &d2, &d2, 1.0);
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            acc[(i, j)] = acc[(j, i)];
        }
    }
    acc
}

/// Basis values on a regular grid over the domain: row j holds
/// `b(t_j*)` with `t_j* = lo + j (hi - lo) / (n_points - 1)`.
pub fn collocation_matrix(basis: &SplineBasis, n_points: usize) -> Result<DMatrix<f64>> {
    if n_points != basis.len() {
        return Err(Error::invalid(format!(
            "collocation grid size {n_points} must equal basis size {}",
            basis.len()
        )));
    }
    if n_points < 2 {
        return Err(Error::invalid("collocation grid needs at least 2 points"));
    }
    let (lo, hi) = basis.domain();
    let mut mat = DMatrix::zeros(n_points, n_points);
    for j in 0..n_points {
        // Pin the endpoints exactly: lo + (hi - lo) can overshoot hi by a
        // rounding ulp for data-derived domains.
        let t = if j == 0 {
            lo
        } else if j + 1 == n_points {
            hi
        } else {
            lo + (hi - lo) * j as f64 / (n_points as f64 - 1.0)
        };
        let row = basis.eval(t)?;
        mat.row_mut(j).copy_from(&row.transpose());
    }
    if !mat.clone().lu().is_invertible() {
        return Err(Error::numerical(
            "singular collocation matrix; knot layout is degenerate",
        ));
    }
    Ok(mat)
}

/// `colloc^-T * s * colloc^-1`, symmetrized against rounding.
fn grid_reparam(colloc: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = colloc
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular collocation matrix"))?;
    let m = inv.transpose() * s * inv;
    Ok(symmetrize(&m))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Kronecker product of two dense matrices.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let scale = a[(i, j)];
            if scale == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc))
                .copy_from(&(b * scale));
        }
    }
    out
}

/// Build the four penalty matrices from the model bases.
pub fn assemble(bases: &ModelBases, lambdas: Lambdas) -> Result<PenaltyOperator> {
    lambdas.validate()?;
    let m = bases.cov_t.len();
    let q = bases.cov_z.len();
    let l = bases.mean_t.len();
    let p = bases.mean_z.len();

    let s_t = raw_penalty_matrix(&bases.cov_t);
    let b_col = collocation_matrix(&bases.cov_t, m)?;
    let s_t_grid = grid_reparam(&b_col, &s_t)?;
    let s_t_cov = kron(&s_t_grid, &DMatrix::identity(q, q));

    let s_z = raw_penalty_matrix(&bases.cov_z);
    let a_col = collocation_matrix(&bases.cov_z, q)?;
    let s_z_grid = grid_reparam(&a_col, &s_z)?;
    let s_z_cov = kron(&DMatrix::identity(m, m), &s_z_grid);

    let s_t_mu = raw_penalty_matrix(&bases.mean_t);
    let e_col = collocation_matrix(&bases.mean_t, l)?;
    let s_t_mu_grid = grid_reparam(&e_col, &s_t_mu)?;
    let s_t_mean = kron(&s_t_mu_grid, &DMatrix::identity(p, p));

    let s_z_mu = raw_penalty_matrix(&bases.mean_z);
    let f_col = collocation_matrix(&bases.mean_z, p)?;
    let s_z_mu_grid = grid_reparam(&f_col, &s_z_mu)?;
    let s_z_mean = kron(&DMatrix::identity(l, l), &s_z_mu_grid);

    Ok(PenaltyOperator {
        s_t_cov,
        s_z_cov,
        s_t_mean,
        s_z_mean,
        lambdas,
    })
}

impl PenaltyOperator {
    fn check_dims(&self, mean_coefs: &DVector<f64>, factor_coefs: &DMatrix<f64>) -> Result<()> {
        if mean_coefs.len() != self.s_t_mean.nrows() {
            return Err(Error::invalid(format!(
                "mean coefficient length {} does not match penalty dimension {}",
                mean_coefs.len(),
                self.s_t_mean.nrows()
            )));
        }
        if factor_coefs.nrows() != self.s_t_cov.nrows() {
            return Err(Error::invalid(format!(
                "factor coefficient rows {} do not match penalty dimension {}",
                factor_coefs.nrows(),
                self.s_t_cov.nrows()
            )));
        }
        Ok(())
    }

    /// Penalty value for the given parameters; always nonnegative.
    pub fn value(&self, mean_coefs: &DVector<f64>, factor_coefs: &DMatrix<f64>) -> Result<f64> {
        self.check_dims(mean_coefs, factor_coefs)?;
        let l = &self.lambdas;
        let mut total = 0.0;
        if l.t_mean > 0.0 {
            total += l.t_mean * (mean_coefs.transpose() * &self.s_t_mean * mean_coefs)[(0, 0)];
        }
        if l.z_mean > 0.0 {
            total += l.z_mean * (mean_coefs.transpose() * &self.s_z_mean * mean_coefs)[(0, 0)];
        }
        if l.t_cov > 0.0 || l.z_cov > 0.0 {
            for j in 0..factor_coefs.ncols() {
                let col = factor_coefs.column(j);
                if l.t_cov > 0.0 {
                    total += l.t_cov * (col.transpose() * &self.s_t_cov * col)[(0, 0)];
                }
                if l.z_cov > 0.0 {
                    total += l.z_cov * (col.transpose() * &self.s_z_cov * col)[(0, 0)];
                }
            }
        }
        Ok(total)
    }

    /// Gradients of the penalty with respect to the mean coefficients and
    /// the factor coefficient matrix, using the `S + S^T` form.
    pub fn grad(
        &self,
        mean_coefs: &DVector<f64>,
        factor_coefs: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_dims(mean_coefs, factor_coefs)?;
        let l = &self.lambdas;
        let mut g_mean = DVector::zeros(mean_coefs.len());
        if l.t_mean > 0.0 {
            g_mean += (&self.s_t_mean * mean_coefs + self.s_t_mean.transpose() * mean_coefs)
                * l.t_mean;
        }
        if l.z_mean > 0.0 {
            g_mean += (&self.s_z_mean * mean_coefs + self.s_z_mean.transpose() * mean_coefs)
                * l.z_mean;
        }
        let mut g_factor = DMatrix::zeros(factor_coefs.nrows(), factor_coefs.ncols());
        if l.t_cov > 0.0 {
            g_factor += (&self.s_t_cov * factor_coefs
                + self.s_t_cov.transpose() * factor_coefs)
                * l.t_cov;
        }
        if l.z_cov > 0.0 {
            g_factor += (&self.s_z_cov * factor_coefs
                + self.s_z_cov.transpose() * factor_coefs)
                * l.z_cov;
        }
        Ok((g_mean, g_factor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bases_small() -> ModelBases {
        ModelBases::build(6, 4, 6, 5, 3, (0.0, 1.0), (0.0, 1.0)).unwrap()
    }

    fn greville_line(basis: &SplineBasis, a: f64, b: f64) -> DVector<f64> {
        // Coefficients reproducing a + b t: values of the line at the
        // Greville abscissae of an untransformed B-spline basis.
        let d = basis.degree();
        let n = basis.len();
        let mut coefs = DVector::zeros(n);
        let lo = basis.domain().0;
        let hi = basis.domain().1;
        let step = (hi - lo) / (basis.n_interior() as f64 + 1.0);
        // Reconstruct the full knot vector to average interior runs.
        let mut knots = vec![lo; d + 1];
        for k in 1..=basis.n_interior() {
            knots.push(lo + step * k as f64);
        }
        knots.extend(std::iter::repeat(hi).take(d + 1));
        for i in 0..n {
            let g: f64 = knots[i + 1..i + 1 + d].iter().sum::<f64>() / d as f64;
            coefs[i] = a + b * g;
        }
        coefs
    }

    #[test]
    fn raw_penalty_zero_on_linear_functions() {
        let basis = SplineBasis::uniform(3, 5, (0.0, 2.0)).unwrap();
        let s = raw_penalty_matrix(&basis);
        let alpha = greville_line(&basis, 0.7, -1.3);
        let val = (alpha.transpose() * &s * &alpha)[(0, 0)];
        assert_abs_diff_eq!(val, 0.0, epsilon = 1e-9);
        assert!((s.clone() - s.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn raw_penalty_cubic_oracle() {
        // g = t^3 on [0,1] has g'' = 6t, so the penalty is 36/3 = 12.
        let basis = SplineBasis::uniform(3, 0, (0.0, 1.0)).unwrap();
        let s = raw_penalty_matrix(&basis);
        let alpha = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0]);
        let val = (alpha.transpose() * &s * &alpha)[(0, 0)];
        assert_abs_diff_eq!(val, 12.0, epsilon = 1e-10);
    }

    #[test]
    fn collocation_boundary_and_inverse() {
        let basis = SplineBasis::uniform(3, 0, (0.0, 1.0)).unwrap();
        let c = collocation_matrix(&basis, 4).unwrap();
        assert_abs_diff_eq!(c[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[(0, 1)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[(0, 2)], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c[(0, 3)], 0.0, epsilon = 1e-14);
        let inv = c.clone().lu().try_inverse().unwrap();
        let prod = inv * &c;
        assert!((prod - DMatrix::identity(4, 4)).abs().max() < 1e-10);

        let bigger = SplineBasis::uniform(3, 6, (0.0, 1.0)).unwrap();
        let c = collocation_matrix(&bigger, 10).unwrap();
        assert!(c.lu().is_invertible());
    }

    #[test]
    fn collocation_requires_square() {
        let basis = SplineBasis::uniform(3, 0, (0.0, 1.0)).unwrap();
        assert!(collocation_matrix(&basis, 5).is_err());
    }

    #[test]
    fn assembled_matrices_are_psd() {
        let bases = bases_small();
        let op = assemble(
            &bases,
            Lambdas {
                t_cov: 1.0,
                z_cov: 1.0,
                t_mean: 1.0,
                z_mean: 1.0,
            },
        )
        .unwrap();
        for s in [&op.s_t_cov, &op.s_z_cov, &op.s_t_mean, &op.s_z_mean] {
            let eig = s.clone().symmetric_eigenvalues();
            let scale = eig.abs().max();
            assert!(eig.min() >= -1e-10 * scale.max(1.0), "matrix not PSD");
        }
    }

    #[test]
    fn covariate_penalty_has_identical_diagonal_blocks() {
        let bases = bases_small();
        let op = assemble(&bases, Lambdas::zero()).unwrap();
        let m = bases.cov_t.len();
        let q = bases.cov_z.len();
        let first = op.s_z_cov.view((0, 0), (q, q)).clone_owned();
        for i in 1..m {
            let block = op.s_z_cov.view((i * q, i * q), (q, q)).clone_owned();
            assert!((&block - &first).abs().max() < 1e-14);
            // Off-diagonal blocks vanish.
            let off = op.s_z_cov.view((0, i * q), (q, q)).clone_owned();
            assert!(off.abs().max() < 1e-14);
        }
    }

    #[test]
    fn zero_lambdas_give_zero_value() {
        let bases = bases_small();
        let op = assemble(&bases, Lambdas::zero()).unwrap();
        let theta = DVector::from_fn(bases.mean_dim(), |i, _| (i as f64).sin());
        let gamma = DMatrix::from_fn(bases.factor_rows(), 2, |i, j| ((i + j) as f64).cos());
        assert_eq!(op.value(&theta, &gamma).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_scaling_and_nonnegativity() {
        let bases = bases_small();
        let op = assemble(
            &bases,
            Lambdas {
                t_cov: 0.3,
                z_cov: 0.9,
                t_mean: 0.5,
                z_mean: 0.1,
            },
        )
        .unwrap();
        let theta = DVector::zeros(bases.mean_dim());
        let gamma = DMatrix::from_fn(bases.factor_rows(), 2, |i, j| ((i * 7 + j) as f64).sin());
        let v1 = op.value(&theta, &gamma).unwrap();
        let v2 = op.value(&theta, &(&gamma * 2.0)).unwrap();
        assert!(v1 > 0.0);
        assert_abs_diff_eq!(v2, 4.0 * v1, epsilon = 1e-9 * v2.abs());
        assert_eq!(op.value(&theta, &DMatrix::zeros(bases.factor_rows(), 2)).unwrap(), 0.0);
    }

    #[test]
    fn value_matches_per_column_oracle() {
        // Oracle: accumulate the two quadratic forms column by column over
        // the factor matrix, and the two mean forms directly.
        let bases = bases_small();
        let lambdas = Lambdas {
            t_cov: 0.7,
            z_cov: 0.2,
            t_mean: 1.3,
            z_mean: 0.4,
        };
        let op = assemble(&bases, lambdas).unwrap();
        let theta = DVector::from_fn(bases.mean_dim(), |i, _| ((i * 3) as f64).sin());
        let gamma = DMatrix::from_fn(bases.factor_rows(), 3, |i, j| ((i + 2 * j) as f64).cos());
        let mut oracle = (theta.transpose()
            * (&op.s_t_mean * lambdas.t_mean + &op.s_z_mean * lambdas.z_mean)
            * &theta)[(0, 0)];
        for j in 0..3 {
            let col = gamma.column(j).clone_owned();
            oracle += lambdas.t_cov * (col.transpose() * &op.s_t_cov * &col)[(0, 0)];
            oracle += lambdas.z_cov * (col.transpose() * &op.s_z_cov * &col)[(0, 0)];
        }
        let got = op.value(&theta, &gamma).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-10 * (1.0 + oracle.abs()));
    }

    #[test]
    fn grad_matches_finite_differences() {
        let bases = bases_small();
        let op = assemble(
            &bases,
            Lambdas {
                t_cov: 0.8,
                z_cov: 0.15,
                t_mean: 0.6,
                z_mean: 0.25,
            },
        )
        .unwrap();
        let theta = DVector::from_fn(bases.mean_dim(), |i, _| ((i * 5) as f64).sin() * 0.4);
        let gamma =
            DMatrix::from_fn(bases.factor_rows(), 2, |i, j| ((i * 2 + 3 * j) as f64).cos());
        let (g_theta, g_gamma) = op.grad(&theta, &gamma).unwrap();
        let h = 1e-5;
        for idx in [0usize, 3, 7, bases.mean_dim() - 1] {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[idx] += h;
            tm[idx] -= h;
            let fd = (op.value(&tp, &gamma).unwrap() - op.value(&tm, &gamma).unwrap()) / (2.0 * h);
            let scale = fd.abs().max(1e-8);
            assert!((fd - g_theta[idx]).abs() / scale < 1e-7, "theta grad {idx}");
        }
        for (i, j) in [(0usize, 0usize), (5, 1), (bases.factor_rows() - 1, 0)] {
            let mut gp = gamma.clone();
            let mut gm = gamma.clone();
            gp[(i, j)] += h;
            gm[(i, j)] -= h;
            let fd = (op.value(&theta, &gp).unwrap() - op.value(&theta, &gm).unwrap()) / (2.0 * h);
            let scale = fd.abs().max(1e-8);
            assert!((fd - g_gamma[(i, j)]).abs() / scale < 1e-7, "gamma grad {i},{j}");
        }
        // Gradient of a quadratic form is linear in the parameters.
        let (g2_theta, g2_gamma) = op.grad(&(&theta * 2.0), &(&gamma * 2.0)).unwrap();
        assert!((g2_theta - &g_theta * 2.0).abs().max() < 1e-10);
        assert!((g2_gamma - &g_gamma * 2.0).abs().max() < 1e-10);
        // Zero parameters give zero gradients.
        let (gz_t, gz_g) = op
            .grad(
                &DVector::zeros(bases.mean_dim()),
                &DMatrix::zeros(bases.factor_rows(), 2),
            )
            .unwrap();
        assert_eq!(gz_t.abs().max(), 0.0);
        assert_eq!(gz_g.abs().max(), 0.0);
    }

    #[test]
    fn linear_grid_configurations_are_penalty_free() {
        let bases = bases_small();
        let op = assemble(
            &bases,
            Lambdas {
                t_cov: 1.0,
                z_cov: 1.0,
                t_mean: 1.0,
                z_mean: 1.0,
            },
        )
        .unwrap();
        let m = bases.cov_t.len();
        let q = bases.cov_z.len();
        let l = bases.mean_t.len();
        let p = bases.mean_z.len();
        let grid = |n: usize, k: usize| k as f64 / (n as f64 - 1.0);

        // Factor column linear across the temporal grid index: only the
        // covariate penalty can see it, and it is constant there too when
        // the per-row profile is constant, so test the two terms separately.
        let mut gamma_t = DMatrix::zeros(m * q, 1);
        for i in 0..m {
            for k in 0..q {
                gamma_t[(i * q + k, 0)] = (0.4 + 1.7 * grid(m, i)) * ((k + 1) as f64);
            }
        }
        let t_only = (gamma_t.column(0).transpose() * &op.s_t_cov * gamma_t.column(0))[(0, 0)];
        assert_abs_diff_eq!(t_only, 0.0, epsilon = 1e-10);

        let mut gamma_z = DMatrix::zeros(m * q, 1);
        for i in 0..m {
            for k in 0..q {
                gamma_z[(i * q + k, 0)] = ((i + 1) as f64) * (0.2 - 0.9 * grid(q, k));
            }
        }
        let z_only = (gamma_z.column(0).transpose() * &op.s_z_cov * gamma_z.column(0))[(0, 0)];
        assert_abs_diff_eq!(z_only, 0.0, epsilon = 1e-10);

        let mut theta_t = DVector::zeros(l * p);
        for i in 0..l {
            for j in 0..p {
                theta_t[i * p + j] = (1.1 * grid(l, i) - 0.3) * ((j + 2) as f64);
            }
        }
        let vt = (theta_t.transpose() * &op.s_t_mean * &theta_t)[(0, 0)];
        assert_abs_diff_eq!(vt, 0.0, epsilon = 1e-10);

        let mut theta_z = DVector::zeros(l * p);
        for i in 0..l {
            for j in 0..p {
                theta_z[i * p + j] = ((i + 1) as f64) * (0.8 * grid(p, j) + 0.1);
            }
        }
        let vz = (theta_z.transpose() * &op.s_z_mean * &theta_z)[(0, 0)];
        assert_abs_diff_eq!(vz, 0.0, epsilon = 1e-10);
    }
}
