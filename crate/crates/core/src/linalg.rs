//! Exact linear algebra for a single full-dimension Jordan block.
//!
//! Everything here is closed form: the exponential `e^{At}` acting on a
//! vector, and the Gaussian covariances `∫ e^{-Au} a0 e^{-Aᵀu} du` over a
//! finite or infinite horizon. No series is ever truncated.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Largest supported block size. Beyond this the factorial weights in the
/// expansions leave the range where double precision keeps them exact.
pub const MAX_DIM: usize = 20;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-8;

/// `A = λI + S` with `S` the upper shift, in the generalized eigenbasis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JordanBlock {
    dim: usize,
    lambda: f64,
}

impl JordanBlock {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(invalid(format!("block dimension {dim} outside 1..={MAX_DIM}")));
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(invalid(format!("eigenvalue must be positive and finite, got {lambda}")));
        }
        Ok(Self { dim, lambda })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Dense `d×d` matrix with λ on the diagonal and 1 on the superdiagonal.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            if i == j {
                self.lambda
            } else if j == i + 1 {
                1.0
            } else {
                0.0
            }
        })
    }

    /// `A·v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = self.lambda * v[i] + if i + 1 < d { v[i + 1] } else { 0.0 };
        }
    }

    /// `e^{At} v`, component `i` being `e^{λt} Σ_j t^j/j! v[i+j]`.
    ///
    /// Negative `t` gives the inverse action.
    pub fn exp_action(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        if !t.is_finite() {
            return Err(invalid(format!("non-finite time {t}")));
        }
        if v.len() != self.dim {
            return Err(invalid(format!("vector has length {}, block has dimension {}", v.len(), self.dim)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite vector component"));
        }
        let mut out = vec![0.0; self.dim];
        self.exp_action_into(t, v, &mut out);
        Ok(out)
    }

    /// Unchecked version of [`exp_action`](Self::exp_action) writing into `out`.
    pub fn exp_action_into(&self, t: f64, v: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut coeff = [0.0; MAX_DIM];
        coeff[0] = 1.0;
        for j in 1..d {
            coeff[j] = coeff[j - 1] * t / j as f64;
        }
        let scale = (self.lambda * t).exp();
        for i in 0..d {
            let s: f64 = (0..d - i).map(|j| coeff[j] * v[i + j]).sum();
            out[i] = scale * s;
        }
    }

    /// Materialized `e^{At}`, upper triangular Toeplitz.
    pub fn exp_matrix(&self, t: f64) -> DMatrix<f64> {
        let d = self.dim;
        let scale = (self.lambda * t).exp();
        let mut coeff = vec![1.0; d];
        for j in 1..d {
            coeff[j] = coeff[j - 1] * t / j as f64;
        }
        DMatrix::from_fn(d, d, |i, j| if j >= i { scale * coeff[j - i] } else { 0.0 })
    }
}

/// A symmetric positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
}

impl CovarianceMatrix {
    /// Validates symmetry and semidefiniteness; the stored matrix is the
    /// exact symmetric part of the input.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let entries = symmetric_part(&entries, SYMMETRY_TOL)?;
        let min_eig = min_eigenvalue(&entries);
        if min_eig < -PSD_TOL {
            return Err(Error::NumericDomain(format!(
                "matrix is indefinite (smallest eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }
}

fn symmetric_part(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(invalid(format!("matrix is {}x{}, expected square", m.nrows(), m.ncols())));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(invalid("matrix has non-finite entries"));
    }
    let asym = (m - m.transpose()).amax();
    if asym > tol {
        return Err(invalid(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    Ok((m + m.transpose()) * 0.5)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn check_a0(block: &JordanBlock, a0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a0.nrows() != block.dim || a0.ncols() != block.dim {
        return Err(invalid(format!(
            "diffusion matrix is {}x{}, block has dimension {}",
            a0.nrows(),
            a0.ncols(),
            block.dim
        )));
    }
    let a0 = symmetric_part(a0, SYMMETRY_TOL)?;
    let min_eig = min_eigenvalue(&a0);
    if min_eig < -PSD_TOL {
        return Err(Error::NumericDomain(format!(
            "diffusion matrix is indefinite (smallest eigenvalue {min_eig:e})"
        )));
    }
    Ok(a0)
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0; n + 1];
    for k in 1..=n {
        f[k] = f[k - 1] * k as f64;
    }
    f
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// Assembles `Σ_{p,q} (-1)^{p+q}/(p!q!) · a0[i+p, j+q] · moments[p+q]`.
fn assemble(block: &JordanBlock, a0: &DMatrix<f64>, moments: &[f64]) -> DMatrix<f64> {
    let d = block.dim;
    let fact = factorials(d);
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = CompensatedSum::default();
            for p in 0..d - i {
                for q in 0..d - j {
                    let sign = if (p + q) % 2 == 0 { 1.0 } else { -1.0 };
                    acc.add(sign / (fact[p] * fact[q]) * a0[(i + p, j + q)] * moments[p + q]);
                }
            }
            let v = acc.value();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Covariance of `N = ∫₀^∞ e^{-As} σ(0) dW(s)`:
/// entry `(i,j) = Σ_p Σ_q C(p+q,q) (-1)^{p+q} / (2λ)^{p+q+1} · a0[p+i, q+j]`.
pub fn limit_noise_covariance(block: &JordanBlock, a0: &DMatrix<f64>) -> Result<CovarianceMatrix> {
    let a0 = check_a0(block, a0)?;
    let d = block.dim;
    let fact = factorials(2 * d);
    let two_lambda = 2.0 * block.lambda;
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = CompensatedSum::default();
            for p in 0..d - i {
                for q in 0..d - j {
                    let binom = fact[p + q] / (fact[p] * fact[q]);
                    let sign = if (p + q) % 2 == 0 { 1.0 } else { -1.0 };
                    let weight = sign * binom / two_lambda.powi((p + q + 1) as i32);
                    acc.add(weight * a0[(i + p, j + q)]);
                }
            }
            out[(i, j)] = acc.value();
            out[(j, i)] = acc.value();
        }
    }
    CovarianceMatrix::new(out)
}

/// `I_n(Δ) = ∫₀^Δ u^n e^{-2λu} du` for `n = 0..=max_n`.
///
/// Below `2λΔ ≤ n+1` the all-positive series
/// `Δ^{n+1} e^{-x} Σ_k x^k n!/(n+1+k)!` is used; above it, the complement
/// `n!/(2λ)^{n+1} (1 - e^{-x} Σ_{k≤n} x^k/k!)`, where the subtracted Poisson
/// tail never exceeds one half.
pub fn truncated_gamma_moments(lambda: f64, delta: f64, max_n: usize) -> Vec<f64> {
    let two_lambda = 2.0 * lambda;
    let x = two_lambda * delta;
    let fact = factorials(max_n);
    let mut out = vec![0.0; max_n + 1];
    if delta == 0.0 {
        return out;
    }
    for n in 0..=max_n {
        out[n] = if x <= (n + 1) as f64 {
            let mut term = 1.0 / (n + 1) as f64;
            let mut acc = CompensatedSum::default();
            let mut k = 0usize;
            loop {
                acc.add(term);
                k += 1;
                term *= x / (n + 1 + k) as f64;
                if term < 1e-18 * acc.value() {
                    break;
                }
            }
            delta.powi((n + 1) as i32) * (-x).exp() * acc.value()
        } else if n == 0 {
            -(-x).exp_m1() / two_lambda
        } else {
            let mut poisson = 0.0;
            let mut term = (-x).exp();
            for k in 0..=n {
                if k > 0 {
                    term *= x / k as f64;
                }
                poisson += term;
            }
            fact[n] / two_lambda.powi((n + 1) as i32) * (1.0 - poisson)
        };
    }
    out
}

/// `∫₀^Δ e^{-Au} a0 e^{-Aᵀu} du`, the covariance picked up by the rescaled
/// noise integral over one step of length `Δ`.
pub fn finite_noise_covariance(
    block: &JordanBlock,
    a0: &DMatrix<f64>,
    delta: f64,
) -> Result<CovarianceMatrix> {
    if !(delta >= 0.0) {
        return Err(invalid(format!("horizon must be nonnegative, got {delta}")));
    }
    let a0 = check_a0(block, a0)?;
    let d = block.dim;
    let moments = if delta.is_infinite() {
        let fact = factorials(2 * d);
        (0..=2 * (d - 1))
            .map(|n| fact[n] / (2.0 * block.lambda).powi((n + 1) as i32))
            .collect()
    } else {
        truncated_gamma_moments(block.lambda, delta, 2 * (d - 1))
    };
    CovarianceMatrix::new(assemble(block, &a0, &moments))
}

/// Lower-triangular `L` with `L Lᵀ = cov`.
///
/// Columns whose pivot vanishes (relative to the largest diagonal entry)
/// are zeroed, so rank-deficient matrices factor without error.
pub fn psd_factor(cov: &CovarianceMatrix) -> Result<DMatrix<f64>> {
    let m = cov.matrix();
    let d = m.nrows();
    let scale = m.diagonal().amax();
    let floor = scale * 1e-14;
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot <= floor {
            if pivot < -PSD_TOL.max(1e-6 * scale) {
                return Err(Error::NumericDomain(format!(
                    "negative pivot {pivot:e} in column {j}"
                )));
            }
            continue;
        }
        let root = pivot.sqrt();
        l[(j, j)] = root;
        for i in j + 1..d {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / root;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn scalar_exponential() {
        let b = JordanBlock::new(1, 1.0).unwrap();
        let out = b.exp_action(2.0, &[3.0]).unwrap();
        assert_relative_eq!(out[0], 3.0 * 2f64.exp(), max_relative = 1e-15);
    }

    #[test]
    fn identity_at_zero() {
        let b = JordanBlock::new(4, 0.7).unwrap();
        let v = [1.0, -2.0, 0.5, 3.0];
        assert_eq!(b.exp_action(0.0, &v).unwrap(), v.to_vec());
    }

    #[test]
    fn last_basis_vector_in_three_dims() {
        let b = JordanBlock::new(3, 1.0).unwrap();
        let out = b.exp_action(1.0, &[0.0, 0.0, 1.0]).unwrap();
        let e = 1f64.exp();
        assert_relative_eq!(out[0], e / 2.0, max_relative = 1e-15);
        assert_relative_eq!(out[1], e, max_relative = 1e-15);
        assert_relative_eq!(out[2], e, max_relative = 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(JordanBlock::new(0, 1.0).is_err());
        assert!(JordanBlock::new(21, 1.0).is_err());
        assert!(JordanBlock::new(2, 0.0).is_err());
        let b = JordanBlock::new(2, 1.0).unwrap();
        assert!(matches!(b.exp_action(f64::NAN, &[1.0, 0.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(b.exp_action(1.0, &[f64::INFINITY, 0.0]), Err(Error::InvalidInput(_))));
        assert!(b.exp_action(1.0, &[1.0]).is_err());
    }

    #[test]
    fn materialized_matrix() {
        let m = JordanBlock::new(3, 2.0).unwrap().matrix();
        assert_eq!(m, dmatrix![2.0, 1.0, 0.0; 0.0, 2.0, 1.0; 0.0, 0.0, 2.0]);
    }

    #[test]
    fn limit_covariance_scalar_cases() {
        let c = limit_noise_covariance(&JordanBlock::new(1, 1.0).unwrap(), &dmatrix![1.0]).unwrap();
        assert_eq!(c.get(0, 0), 0.5);
        let c = limit_noise_covariance(&JordanBlock::new(1, 2.0).unwrap(), &dmatrix![4.0]).unwrap();
        assert_eq!(c.get(0, 0), 1.0);
    }

    #[test]
    fn limit_covariance_two_dims_identity() {
        let c = limit_noise_covariance(&JordanBlock::new(2, 1.0).unwrap(), &DMatrix::identity(2, 2))
            .unwrap();
        let expected = dmatrix![0.75, -0.25; -0.25, 0.5];
        assert!((c.matrix() - expected).amax() < 1e-12);
    }

    #[test]
    fn asymmetric_diffusion_rejected() {
        let b = JordanBlock::new(2, 1.0).unwrap();
        let a0 = dmatrix![1.0, 0.1; 0.0, 1.0];
        assert!(matches!(limit_noise_covariance(&b, &a0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn finite_covariance_edges() {
        let b = JordanBlock::new(3, 1.3).unwrap();
        let a0 = dmatrix![2.0, 0.3, 0.1; 0.3, 1.0, 0.2; 0.1, 0.2, 0.5];
        let zero = finite_noise_covariance(&b, &a0, 0.0).unwrap();
        assert_eq!(zero.matrix(), &DMatrix::zeros(3, 3));
        assert!(matches!(finite_noise_covariance(&b, &a0, -1.0), Err(Error::InvalidInput(_))));

        let b1 = JordanBlock::new(1, 1.0).unwrap();
        let c = finite_noise_covariance(&b1, &dmatrix![1.0], 2f64.ln() / 2.0).unwrap();
        assert_relative_eq!(c.get(0, 0), 0.25, max_relative = 1e-14);

        let far = finite_noise_covariance(&b, &a0, 50.0 / b.lambda()).unwrap();
        let lim = limit_noise_covariance(&b, &a0).unwrap();
        assert!((far.matrix() - lim.matrix()).amax() < 1e-12);
    }

    #[test]
    fn small_horizon_moments_match_leading_order() {
        // I_n(Δ) = Δ^{n+1}/(n+1) - 2λ Δ^{n+2}/(n+2) + O(Δ^{n+3})
        let lambda = 1.5;
        let delta = 1e-5;
        let m = truncated_gamma_moments(lambda, delta, 6);
        for (n, &v) in m.iter().enumerate() {
            let lead = delta.powi(n as i32 + 1) / (n + 1) as f64
                - 2.0 * lambda * delta.powi(n as i32 + 2) / (n + 2) as f64;
            assert_relative_eq!(v, lead, max_relative = 1e-9);
        }
    }

    #[test]
    fn factor_examples() {
        let id = CovarianceMatrix::new(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(psd_factor(&id).unwrap(), DMatrix::identity(3, 3));
        let diag = CovarianceMatrix::new(dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        assert_eq!(psd_factor(&diag).unwrap(), dmatrix![2.0, 0.0; 0.0, 3.0]);
        let c = CovarianceMatrix::new(dmatrix![0.75, -0.25; -0.25, 0.5]).unwrap();
        let l = psd_factor(&c).unwrap();
        assert!((&l * l.transpose() - c.matrix()).amax() < 1e-12);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn factor_rank_deficient() {
        let v = nalgebra::dvector![1.0, 2.0, -1.0];
        let c = CovarianceMatrix::new(&v * v.transpose()).unwrap();
        let l = psd_factor(&c).unwrap();
        assert!((&l * l.transpose() - c.matrix()).norm() < 1e-10);
        assert_eq!(l.column(1).amax(), 0.0);
        assert_eq!(l.column(2).amax(), 0.0);
    }

    #[test]
    fn indefinite_rejected() {
        let m = dmatrix![1.0, 2.0; 2.0, 1.0];
        assert!(matches!(CovarianceMatrix::new(m), Err(Error::NumericDomain(_))));
    }
}
