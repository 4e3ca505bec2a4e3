//! B-spline bases on a compact interval: evaluation, second derivatives,
//! Gram-based orthonormalization, and tensor-product rows.
//!
//! A basis is defined by its degree, equally spaced interior knots with
//! (degree+1)-fold repeated boundary knots, and an optional square transform
//! `T` applied as `b(t) = T b_raw(t)`. The transform is how orthonormalized
//! bases are represented: `T = L^-1` for the Cholesky factor `L` of the raw
//! Gram matrix, which makes the transformed Gram the identity.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// Out-of-domain evaluation policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainPolicy {
    /// Reject points outside the domain.
    Strict,
    /// Clamp the point to the nearest domain endpoint before evaluating.
    Clamp,
    /// Evaluate the boundary-span polynomial at the raw point.
    Extrapolate,
}

/// A univariate B-spline basis with optional linear transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    n_interior: usize,
    /// Full knot vector with (degree+1)-fold boundary repetition.
    knots: Vec<f64>,
    domain: (f64, f64),
    /// Applied as `b(t) = transform * b_raw(t)` when present.
    transform: Option<DMatrix<f64>>,
}

impl SplineBasis {
    /// Basis with equally spaced interior knots on `domain`.
    ///
    /// Basis size is `n_interior + degree + 1`.
    pub fn uniform(degree: usize, n_interior: usize, domain: (f64, f64)) -> Result<Self> {
        if degree < 1 {
            return Err(Error::invalid(format!(
                "spline degree must be at least 1, got {degree}"
            )));
        }
        Self::build(degree, n_interior, domain)
    }

    /// Single constant basis function equal to 1 on `domain`.
    ///
    /// Degenerate degree-0 case used for covariate-free covariance models.
    pub fn constant(domain: (f64, f64)) -> Result<Self> {
        Self::build(0, 0, domain)
    }

    fn build(degree: usize, n_interior: usize, domain: (f64, f64)) -> Result<Self> {
        let (lo, hi) = domain;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::invalid(format!(
                "domain [{lo}, {hi}] must be a nonempty finite interval"
            )));
        }
        let mut knots = Vec::with_capacity(n_interior + 2 * (degree + 1));
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        let step = (hi - lo) / (n_interior as f64 + 1.0);
        for k in 1..=n_interior {
            knots.push(lo + step * k as f64);
        }
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(SplineBasis {
            degree,
            n_interior,
            knots,
            domain,
            transform: None,
        })
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.n_interior + self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn is_orthonormalized(&self) -> bool {
        self.transform.is_some()
    }

    pub fn transform(&self) -> Option<&DMatrix<f64>> {
        self.transform.as_ref()
    }

    /// Rebuild a basis from its serialized definition.
    pub fn from_parts(
        degree: usize,
        n_interior: usize,
        domain: (f64, f64),
        transform: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let mut basis = Self::build(degree, n_interior, domain)?;
        if let Some(t) = &transform {
            let n = basis.len();
            if t.nrows() != n || t.ncols() != n {
                return Err(Error::invalid(format!(
                    "transform must be {n}x{n}, got {}x{}",
                    t.nrows(),
                    t.ncols()
                )));
            }
        }
        basis.transform = transform;
        Ok(basis)
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.domain;
        if !t.is_finite() || t < lo || t > hi {
            return Err(Error::Domain { value: t, lo, hi });
        }
        Ok(())
    }

    /// Index `s` with `knots[s] <= t < knots[s+1]`, clamped to the valid
    /// span range so boundary and outside points fall on the edge spans.
    /// At `t = hi` this picks the last span (left-limit convention).
    fn span(&self, t: f64) -> usize {
        let d = self.degree;
        let last = self.len() - 1;
        let mut s = d;
        while s < last && t >= self.knots[s + 1] {
            s += 1;
        }
        s
    }

    /// All raw basis values of the given `degree_k <= self.degree` at `t`,
    /// using `span` for the degree-0 indicator. Output length is
    /// `knots.len() - 1 - degree_k`.
    fn eval_all_raw(&self, t: f64, degree_k: usize, span: usize) -> Vec<f64> {
        let n_funcs = self.knots.len() - 1 - degree_k;
        let mut values = vec![0.0; self.knots.len() - 1];
        values[span] = 1.0;
        for k in 1..=degree_k {
            for i in 0..self.knots.len() - 1 - k {
                let d1 = self.knots[i + k] - self.knots[i];
                let d2 = self.knots[i + k + 1] - self.knots[i + 1];
                let left = if d1 > 0.0 {
                    (t - self.knots[i]) / d1 * values[i]
                } else {
                    0.0
                };
                let right = if d2 > 0.0 {
                    (self.knots[i + k + 1] - t) / d2 * values[i + 1]
                } else {
                    0.0
                };
                values[i] = left + right;
            }
        }
        values.truncate(n_funcs);
        values
    }

    fn raw_values(&self, t: f64) -> DVector<f64> {
        let span = self.span(t);
        DVector::from_vec(self.eval_all_raw(t, self.degree, span))
    }

    fn raw_deriv2(&self, t: f64) -> DVector<f64> {
        let n = self.len();
        let d = self.degree;
        if d < 2 {
            return DVector::zeros(n);
        }
        let span = self.span(t);
        let low = self.eval_all_raw(t, d - 2, span);
        // First derivatives of the degree d-1 functions.
        let df = (d - 1) as f64;
        let mut d1 = vec![0.0; n + 1];
        for (i, slot) in d1.iter_mut().enumerate() {
            let den_a = self.knots[i + d - 1] - self.knots[i];
            let den_b = self.knots[i + d] - self.knots[i + 1];
            let a = if den_a > 0.0 { low[i] / den_a } else { 0.0 };
            let b = if den_b > 0.0 { low[i + 1] / den_b } else { 0.0 };
            *slot = df * (a - b);
        }
        // Second derivatives of the degree d functions.
        let df = d as f64;
        let mut d2 = DVector::zeros(n);
        for i in 0..n {
            let den_a = self.knots[i + d] - self.knots[i];
            let den_b = self.knots[i + d + 1] - self.knots[i + 1];
            let a = if den_a > 0.0 { d1[i] / den_a } else { 0.0 };
            let b = if den_b > 0.0 { d1[i + 1] / den_b } else { 0.0 };
            d2[i] = df * (a - b);
        }
        d2
    }

    fn apply_transform(&self, raw: DVector<f64>) -> DVector<f64> {
        match &self.transform {
            Some(t) => t * raw,
            None => raw,
        }
    }

    /// Basis values at `t`; errors if `t` is outside the domain.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.check_domain(t)?;
        Ok(self.apply_transform(self.raw_values(t)))
    }

    /// Basis values with an explicit out-of-domain policy.
    pub fn eval_with(&self, t: f64, policy: DomainPolicy) -> Result<DVector<f64>> {
        match policy {
            DomainPolicy::Strict => self.eval(t),
            DomainPolicy::Clamp => {
                let (lo, hi) = self.domain;
                Ok(self.apply_transform(self.raw_values(t.clamp(lo, hi))))
            }
            DomainPolicy::Extrapolate => Ok(self.apply_transform(self.raw_values(t))),
        }
    }

    /// Second derivative of each basis function at `t`.
    pub fn eval_deriv2(&self, t: f64) -> Result<DVector<f64>> {
        self.check_domain(t)?;
        Ok(self.apply_transform(self.raw_deriv2(t)))
    }

    pub fn eval_deriv2_with(&self, t: f64, policy: DomainPolicy) -> Result<DVector<f64>> {
        match policy {
            DomainPolicy::Strict => self.eval_deriv2(t),
            DomainPolicy::Clamp => {
                let (lo, hi) = self.domain;
                Ok(self.apply_transform(self.raw_deriv2(t.clamp(lo, hi))))
            }
            DomainPolicy::Extrapolate => Ok(self.apply_transform(self.raw_deriv2(t))),
        }
    }

    /// Distinct knot values, the integration breakpoints.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut breaks = Vec::with_capacity(self.n_interior + 2);
        breaks.push(self.domain.0);
        for &k in &self.knots[self.degree + 1..self.degree + 1 + self.n_interior] {
            breaks.push(k);
        }
        breaks.push(self.domain.1);
        breaks
    }

    /// Gram matrix of the (possibly transformed) basis by per-interval
    /// Gauss-Legendre quadrature.
    pub fn gram(&self, n_quad: usize) -> DMatrix<f64> {
        self.weighted_outer_integral(n_quad, |t| {
            self.apply_transform(self.raw_values(t))
        })
    }

    fn weighted_outer_integral<F>(&self, n_quad: usize, mut rows: F) -> DMatrix<f64>
    where
        F: FnMut(f64) -> DVector<f64>,
    {
        let n = self.len();
        let (nodes, weights) = gauss_legendre(n_quad);
        let breaks = self.breakpoints();
        let mut acc = DMatrix::zeros(n, n);
        for pair in breaks.windows(2) {
            let half = 0.5 * (pair[1] - pair[0]);
            let mid = 0.5 * (pair[1] + pair[0]);
            if half <= 0.0 {
                continue;
            }
            for (x, w) in nodes.iter().zip(&weights) {
                let v = rows(mid + half * x);
                acc.syger(half * w, &v, &v, 1.0);
            }
        }
        // syger fills the lower triangle; mirror it.
        for i in 0..n {
            for j in (i + 1)..n {
                acc[(i, j)] = acc[(j, i)];
            }
        }
        acc
    }

    /// Returns a basis whose Gram matrix is the identity, via Cholesky
    /// whitening of the quadrature Gram. `n_quad >= degree + 1` keeps the
    /// quadrature exact for the piecewise-polynomial integrand.
    pub fn orthonormalized(&self, n_quad: usize) -> Result<Self> {
        let gram = self.gram(n_quad);
        let chol = nalgebra::Cholesky::new(gram.clone()).ok_or_else(|| {
            let eig = gram.symmetric_eigenvalues();
            let max = eig.max();
            let min = eig.min();
            Error::numerical(format!(
                "basis Gram matrix not positive definite (condition estimate {:.3e})",
                max / min.max(f64::MIN_POSITIVE)
            ))
        })?;
        let n = self.len();
        let whiten = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::numerical("singular Cholesky factor"))?;
        let transform = match &self.transform {
            Some(prev) => whiten * prev,
            None => whiten,
        };
        Ok(SplineBasis {
            transform: Some(transform),
            ..self.clone()
        })
    }

    /// Default quadrature order: exact for products of basis functions.
    pub fn default_quad_order(&self) -> usize {
        self.degree + 2
    }
}

/// Kronecker row `a(t) (x) u(z)` of the tensor-product mean basis.
///
/// Entry `i * u.len() + j` is `a_i(t) * u_j(z)`, matching the row-major
/// vectorization of the mean coefficient matrix.
pub fn tensor_row(
    a_basis: &SplineBasis,
    u_basis: &SplineBasis,
    t: f64,
    z: f64,
) -> Result<DVector<f64>> {
    let a = a_basis.eval(t)?;
    let u = u_basis.eval(z)?;
    Ok(kron_vec(&a, &u))
}

/// Kronecker product of two vectors, left index outer.
pub fn kron_vec(a: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * u.len());
    for i in 0..a.len() {
        for j in 0..u.len() {
            out[i * u.len() + j] = a[i] * u[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bernstein_cubic() -> SplineBasis {
        SplineBasis::uniform(3, 0, (0.0, 1.0)).unwrap()
    }

    #[test]
    fn uniform_sizes_match_interior_knot_count() {
        let b = SplineBasis::uniform(3, 6, (0.0, 1.0)).unwrap();
        assert_eq!(b.len(), 10);
        assert_eq!(bernstein_cubic().len(), 4);
        let b = SplineBasis::uniform(3, 1, (0.0, 2.0)).unwrap();
        assert_eq!(b.len(), 5);
        assert_abs_diff_eq!(b.breakpoints()[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn invalid_domain_rejected() {
        assert!(SplineBasis::uniform(3, 2, (1.0, 1.0)).is_err());
        assert!(SplineBasis::uniform(3, 2, (2.0, 1.0)).is_err());
        assert!(SplineBasis::uniform(0, 2, (0.0, 1.0)).is_err());
    }

    #[test]
    fn partition_of_unity_everywhere() {
        let b = SplineBasis::uniform(3, 6, (-1.0, 2.5)).unwrap();
        for k in 0..=200 {
            let t = -1.0 + 3.5 * k as f64 / 200.0;
            let v = b.eval(t).unwrap();
            assert_abs_diff_eq!(v.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn boundary_values_hit_unit_vectors() {
        let b = SplineBasis::uniform(3, 4, (0.0, 1.0)).unwrap();
        let lo = b.eval(0.0).unwrap();
        assert_abs_diff_eq!(lo[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lo.sum() - lo[0], 0.0, epsilon = 1e-14);
        // Left-limit convention at the right endpoint.
        let hi = b.eval(1.0).unwrap();
        assert_abs_diff_eq!(hi[b.len() - 1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn bernstein_values_at_midpoint() {
        // Oracle: direct Bernstein polynomials (1-t)^3, 3t(1-t)^2, 3t^2(1-t), t^3.
        let v = bernstein_cubic().eval(0.5).unwrap();
        assert_abs_diff_eq!(v[0], 0.125, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1], 0.375, epsilon = 1e-14);
        assert_abs_diff_eq!(v[2], 0.375, epsilon = 1e-14);
        assert_abs_diff_eq!(v[3], 0.125, epsilon = 1e-14);
    }

    #[test]
    fn bernstein_second_derivatives_at_zero() {
        // Oracle: symbolic differentiation gives (6, -12, 6, 0) at t = 0.
        let d2 = bernstein_cubic().eval_deriv2(0.0).unwrap();
        assert_abs_diff_eq!(d2[0], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d2[1], -12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d2[2], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d2[3], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn straight_line_has_zero_second_derivative() {
        let b = SplineBasis::uniform(3, 5, (0.0, 2.0)).unwrap();
        // Greville abscissae reproduce t as a spline: coefficient c_i = mean
        // of degree consecutive interior knots.
        let coef: Vec<f64> = (0..b.len())
            .map(|i| {
                b.knots[i + 1..i + 1 + b.degree].iter().sum::<f64>() / b.degree as f64
            })
            .collect();
        for k in 1..20 {
            let t = 2.0 * k as f64 / 20.0;
            let v = b.eval(t).unwrap();
            let d2 = b.eval_deriv2(t).unwrap();
            let line: f64 = coef.iter().zip(v.iter()).map(|(c, bv)| c * bv).sum();
            let curve: f64 = coef.iter().zip(d2.iter()).map(|(c, bv)| c * bv).sum();
            assert_abs_diff_eq!(line, t, epsilon = 1e-12);
            assert_abs_diff_eq!(curve, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn deriv2_matches_central_differences() {
        let b = SplineBasis::uniform(3, 6, (0.0, 1.0)).unwrap().orthonormalized(5).unwrap();
        let h = 1e-4;
        for k in 1..40 {
            let t = 0.02 + 0.96 * k as f64 / 40.0;
            let fd = (b.eval(t + h).unwrap() - b.eval(t).unwrap() * 2.0 + b.eval(t - h).unwrap())
                / (h * h);
            let an = b.eval_deriv2(t).unwrap();
            let err = (fd - an).abs().max();
            assert!(err < 1e-5, "fd mismatch {err} at t={t}");
        }
    }

    #[test]
    fn orthonormalized_gram_is_identity_and_idempotent() {
        let b = SplineBasis::uniform(3, 6, (0.0, 1.0)).unwrap();
        let on = b.orthonormalized(5).unwrap();
        let gram = on.gram(5);
        let eye = DMatrix::identity(on.len(), on.len());
        assert!((gram - &eye).abs().max() < 1e-10);
        let twice = on.orthonormalized(5).unwrap();
        assert!((twice.gram(5) - eye).abs().max() < 1e-10);
    }

    #[test]
    fn bernstein_gram_corner_is_one_seventh() {
        // Oracle: integral of (1-t)^6 over [0,1] is exactly 1/7.
        let g = bernstein_cubic().gram(5);
        assert_abs_diff_eq!(g[(0, 0)], 1.0 / 7.0, epsilon = 1e-12);
    }

    #[test]
    fn local_support_before_transform() {
        let b = SplineBasis::uniform(3, 6, (0.0, 1.0)).unwrap();
        // Function 0 is supported on the first degree+1 knot spans.
        let v = b.eval(0.75).unwrap();
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn strict_eval_rejects_outside_domain() {
        let b = bernstein_cubic();
        assert!(matches!(b.eval(1.5), Err(Error::Domain { .. })));
        assert!(b.eval_with(1.5, DomainPolicy::Clamp).is_ok());
        // Extrapolation extends the boundary polynomial: t^3 at 1.5.
        let v = b.eval_with(1.5, DomainPolicy::Extrapolate).unwrap();
        assert_abs_diff_eq!(v[3], 1.5f64.powi(3), epsilon = 1e-12);
    }

    #[test]
    fn constant_basis_is_one() {
        let c = SplineBasis::constant((0.0, 1.0)).unwrap();
        assert_eq!(c.len(), 1);
        assert_abs_diff_eq!(c.eval(0.3).unwrap()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.eval_deriv2(0.3).unwrap()[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn tensor_row_matches_elementwise_oracle() {
        let a = SplineBasis::uniform(3, 2, (0.0, 1.0)).unwrap();
        let u = SplineBasis::uniform(3, 1, (0.0, 1.0)).unwrap();
        let (t, z) = (0.37, 0.81);
        let row = tensor_row(&a, &u, t, z).unwrap();
        let av = a.eval(t).unwrap();
        let uv = u.eval(z).unwrap();
        assert_eq!(row.len(), a.len() * u.len());
        for i in 0..a.len() {
            for j in 0..u.len() {
                assert_abs_diff_eq!(row[i * u.len() + j], av[i] * uv[j], epsilon = 1e-15);
            }
        }
        // Kronecker sum identity.
        assert_abs_diff_eq!(row.sum(), av.sum() * uv.sum(), epsilon = 1e-12);
    }

    #[test]
    fn kron_of_unit_vectors() {
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let u = DVector::from_vec(vec![0.0, 1.0]);
        let k = kron_vec(&a, &u);
        assert_eq!(k.as_slice(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
