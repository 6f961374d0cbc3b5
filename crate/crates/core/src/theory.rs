//! Limiting laws and the evaluated expansions of exit time and exit point.
//!
//! Notation: `ℓ = log ε⁻¹` and `ℓ₂ = log log ε⁻¹`. The random inputs are
//! built from `χ = ξ₀ + N` with `N` the infinite-horizon Gaussian noise
//! integral; `ρ` shifts the exit time and `η` the exit location.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conjugation::PoincareData;
use crate::error::{invalid, Error, Result};
use crate::linalg::{limit_noise_covariance, psd_factor, CovarianceMatrix};
use crate::model::Problem;

/// A finite-dimensional Gaussian with a precomputed square-root factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    mean: Vec<f64>,
    cov: CovarianceMatrix,
    factor: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: Vec<f64>, cov: CovarianceMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(invalid("mean and covariance dimensions differ"));
        }
        let factor = psd_factor(&cov)?;
        Ok(Self { mean, cov, factor })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &CovarianceMatrix {
        &self.cov
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.mean.len();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = self.mean.clone();
        for i in 0..d {
            for j in 0..=i {
                out[i] += self.factor[(i, j)] * z[j];
            }
        }
        out
    }
}

/// `(ℓ, ℓ₂)` for a noise level below `1/e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogScales {
    pub log_inv: f64,
    pub loglog_inv: f64,
}

impl LogScales {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < (-1f64).exp()) {
            return Err(invalid(format!("noise level {epsilon} must lie in (0, 1/e)")));
        }
        let log_inv = -epsilon.ln();
        Ok(Self { log_inv, loglog_inv: log_inv.ln() })
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `R (d−1)! λ^{d−1}`, the scale of `|χ^(d)|` at which `ρ` vanishes.
fn chi_scale(lambda: f64, radius: f64, d: usize) -> f64 {
    radius * factorial(d - 1) * lambda.powi(d as i32 - 1)
}

fn last_two(chi: &[f64], d: usize) -> Result<(f64, f64)> {
    if d == 0 || chi.len() != d {
        return Err(invalid(format!("χ has length {}, expected {d}", chi.len())));
    }
    let top = chi[d - 1];
    if top == 0.0 {
        return Err(Error::Degenerate("last component of χ is zero".into()));
    }
    let below = if d >= 2 { chi[d - 2] } else { 0.0 };
    Ok((below, top))
}

/// `η = −λ χ^(d−1)/χ^(d) + log(|χ^(d)| / (R (d−1)! λ^{d−1}))`; the first
/// term is absent for `d = 1`.
pub fn eta_of_chi(chi: &[f64], lambda: f64, radius: f64, d: usize) -> Result<f64> {
    let (below, top) = last_two(chi, d)?;
    Ok(-lambda * below / top + (top.abs() / chi_scale(lambda, radius, d)).ln())
}

/// `ρ = −(1/λ) log(|χ^(d)| / (R (d−1)! λ^{d−1}))`.
pub fn rho_of_chi(chi: &[f64], lambda: f64, radius: f64, d: usize) -> Result<f64> {
    let (_, top) = last_two(chi, d)?;
    Ok(-(top.abs() / chi_scale(lambda, radius, d)).ln() / lambda)
}

/// `(1/λ) ℓ − ((d−1)/λ) ℓ₂`, the deterministic part of the exit time.
pub fn det_time_part(epsilon: f64, lambda: f64, d: usize) -> Result<f64> {
    let s = LogScales::new(epsilon)?;
    Ok((s.log_inv - (d as f64 - 1.0) * s.loglog_inv) / lambda)
}

/// Exit time from the box of radius `R`, remainder dropped.
pub fn predict_tau_b(epsilon: f64, lambda: f64, d: usize, rho: f64) -> Result<f64> {
    Ok(det_time_part(epsilon, lambda, d)? + rho)
}

/// Second-order exit-time correction `K(ε) = (d−1)² ℓ₂/ℓ + (d−1) η/ℓ`,
/// entering the exit time as `K/λ`.
pub fn k_correction(epsilon: f64, d: usize, eta: f64) -> Result<f64> {
    let s = LogScales::new(epsilon)?;
    let m = d as f64 - 1.0;
    Ok(m * m * s.loglog_inv / s.log_inv + m * eta / s.log_inv)
}

/// Exit point from the box of radius `R`: coordinate `i` is
/// `λ^{i−1} R s / ℓ^{i−1} · (d−1)!/(d−i)! · [1 + (i−1)/ℓ · ((d−1)ℓ₂ + η)]`.
pub fn predict_exit_y(
    epsilon: f64,
    lambda: f64,
    d: usize,
    radius: f64,
    sign: i8,
    eta: f64,
) -> Result<Vec<f64>> {
    let s = LogScales::new(epsilon)?;
    if sign != 1 && sign != -1 {
        return Err(invalid(format!("sign must be ±1, got {sign}")));
    }
    let sgn = sign as f64;
    let m = d as f64 - 1.0;
    let mut out = Vec::with_capacity(d);
    let mut falling = 1.0; // (d−1)!/(d−i)!
    for i in 1..=d {
        if i >= 2 {
            falling *= (d - i + 1) as f64;
        }
        let k = (i - 1) as f64;
        let lead = (lambda / s.log_inv).powi(i as i32 - 1) * radius * sgn * falling;
        out.push(lead * (1.0 + k / s.log_inv * (m * s.loglog_inv + eta)));
    }
    out[0] = sgn * radius;
    Ok(out)
}

/// `G_ε(α) = log(|χ^(d)| (1−α)^{d−1} / ((d−1)! λ^{d−1}))`.
pub fn g_alpha(chi: &[f64], alpha: f64, lambda: f64, d: usize) -> Result<f64> {
    let (_, top) = last_two(chi, d)?;
    let m = d as f64 - 1.0;
    Ok((top.abs() * (1.0 - alpha).powf(m) / (factorial(d - 1) * lambda.powf(m))).ln())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Exit time from the inner box `{‖y‖∞ ≤ ε^α}`:
/// `((1−α)/λ) ℓ − ((d−1)/λ) ℓ₂ − G/λ + K̃/λ` with
/// `K̃ = (d−1)²/(1−α) · ℓ₂/ℓ + (d−1) η(α) / ((1−α) ℓ)`.
pub fn predict_tilde_tau(epsilon: f64, alpha: f64, lambda: f64, d: usize, chi: &[f64]) -> Result<f64> {
    check_alpha(alpha)?;
    let s = LogScales::new(epsilon)?;
    let (below, top) = last_two(chi, d)?;
    let g = g_alpha(chi, alpha, lambda, d)?;
    let eta_alpha = -lambda * below / top + g;
    let m = d as f64 - 1.0;
    let k_tilde = m * m / (1.0 - alpha) * s.loglog_inv / s.log_inv
        + m * eta_alpha / ((1.0 - alpha) * s.log_inv);
    Ok(((1.0 - alpha) * s.log_inv - m * s.loglog_inv - g + k_tilde) / lambda)
}

/// Time from leaving the inner box to leaving the box of radius `R`:
/// `(α/λ) ℓ + ((d−1)/λ) log(1−α) + (1/λ) log R + K̄/λ`.
pub fn predict_bar_tau(
    epsilon: f64,
    alpha: f64,
    lambda: f64,
    d: usize,
    radius: f64,
    chi: &[f64],
) -> Result<f64> {
    check_alpha(alpha)?;
    let s = LogScales::new(epsilon)?;
    let (below, top) = last_two(chi, d)?;
    let m = d as f64 - 1.0;
    let (l, ll) = (s.log_inv, s.loglog_inv);
    let a = alpha / (1.0 - alpha);
    let log_chi = (top.abs() / (factorial(d - 1) * lambda.powf(m))).ln();
    let log_1ma = (1.0 - alpha).ln();
    let k_bar = -a * m * m * ll / l - m * radius.ln() / l - a * m * log_chi / l
        - m * m / (1.0 - alpha) * log_1ma / l
        + a * m * lambda * below / (top * l);
    Ok((alpha * l + m * log_1ma + radius.ln() + k_bar) / lambda)
}

/// Exit point from the inner box in terms of its exit time `τ̃`:
/// `ε^α s / τ̃^{i−1} · (d−1)!/(d−i)! · [1 − (i−1)/τ̃ · χ^(d−1)/χ^(d)]`.
pub fn predict_small_box_exit(
    tilde_tau: f64,
    epsilon: f64,
    alpha: f64,
    d: usize,
    chi: &[f64],
) -> Result<Vec<f64>> {
    if !(tilde_tau > 0.0 && tilde_tau.is_finite()) {
        return Err(invalid(format!("inner exit time must be positive, got {tilde_tau}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(format!("noise level {epsilon} outside (0, 1)")));
    }
    check_alpha(alpha)?;
    let (below, top) = last_two(chi, d)?;
    let scale = epsilon.powf(alpha) * top.signum();
    let ratio = below / top;
    let mut out = Vec::with_capacity(d);
    let mut falling = 1.0;
    for i in 1..=d {
        if i >= 2 {
            falling *= (d - i + 1) as f64;
        }
        let k = (i - 1) as f64;
        out.push(scale / tilde_tau.powi(i as i32 - 1) * falling * (1.0 - k / tilde_tau * ratio));
    }
    Ok(out)
}

/// Exit time and point from the outer domain.
///
/// Time is `(1/λ)ℓ − ((d−1)/λ)ℓ₂ + ρ + C^±`; the point is
/// `q± + (1/ℓ + (d−1)ℓ₂/ℓ² + η/ℓ²) h₁±`.
pub fn predict_outer(
    epsilon: f64,
    lambda: f64,
    d: usize,
    sign: i8,
    rho: f64,
    eta: f64,
    poincare: Option<&PoincareData>,
) -> Result<(f64, Vec<f64>)> {
    let pd = poincare.ok_or_else(|| Error::State("Poincaré data not computed".into()))?;
    let s = LogScales::new(epsilon)?;
    let (c, q, h1) = match sign {
        1 => (pd.c_plus, &pd.q_plus, &pd.h1_plus),
        -1 => (pd.c_minus, &pd.q_minus, &pd.h1_minus),
        _ => return Err(invalid(format!("sign must be ±1, got {sign}"))),
    };
    let time = predict_tau_b(epsilon, lambda, d, rho)? + c;
    let w = first_order_weight(&s, d) + eta / (s.log_inv * s.log_inv);
    let point = q.iter().zip(h1).map(|(qi, hi)| qi + w * hi).collect();
    Ok((time, point))
}

/// `1/ℓ + (d−1)ℓ₂/ℓ²`, the deterministic weight on `h₁`.
pub fn first_order_weight(s: &LogScales, d: usize) -> f64 {
    1.0 / s.log_inv + (d as f64 - 1.0) * s.loglog_inv / (s.log_inv * s.log_inv)
}

/// Sampler for the limiting random vector `χ = ξ₀ + N`.
#[derive(Debug, Clone)]
pub struct LimitLawSampler {
    problem: Problem,
    n_law: GaussianLaw,
}

/// One draw of the limiting `(ρ, η, sign χ^(d))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitDraw {
    pub rho: f64,
    pub eta: Option<f64>,
    pub sign: i8,
}

impl LimitLawSampler {
    pub fn new(problem: &Problem) -> Result<Self> {
        let cov = limit_noise_covariance(problem.block(), problem.a0())?;
        let n_law = GaussianLaw::new(vec![0.0; problem.dim()], cov)?;
        Ok(Self { problem: problem.clone(), n_law })
    }

    pub fn noise_law(&self) -> &GaussianLaw {
        &self.n_law
    }

    pub fn sample_chi<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let xi = self.problem.sample_init(rng, false);
        let n = self.n_law.sample(rng);
        xi.iter().zip(&n).map(|(a, b)| a + b).collect()
    }

    /// Draws `χ` until its last component is nonzero and maps it to
    /// `(ρ, η, sign)`; `η` is absent for `d = 1`.
    pub fn sample_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> LimitDraw {
        let d = self.problem.dim();
        let (lambda, radius) = (self.problem.lambda(), self.problem.box_radius());
        loop {
            let chi = self.sample_chi(rng);
            if chi[d - 1] == 0.0 {
                continue;
            }
            let rho = rho_of_chi(&chi, lambda, radius, d).expect("nonzero last component");
            let eta = (d >= 2).then(|| eta_of_chi(&chi, lambda, radius, d).expect("nonzero"));
            return LimitDraw { rho, eta, sign: if chi[d - 1] > 0.0 { 1 } else { -1 } };
        }
    }
}

/// Deterministic parts of every expansion at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub epsilon: f64,
    pub det_time_part: f64,
    /// Coordinate `i` of the `+` exit point from the box with `η = 0`.
    pub coord_coeffs: Vec<f64>,
    pub c_plus: Option<f64>,
    pub c_minus: Option<f64>,
    pub q_plus: Option<Vec<f64>>,
    pub q_minus: Option<Vec<f64>>,
    pub h1_plus: Option<Vec<f64>>,
    pub h1_minus: Option<Vec<f64>>,
    /// `1/ℓ + (d−1)ℓ₂/ℓ²`.
    pub h1_weight: f64,
}

impl PredictionSet {
    pub fn new(problem: &Problem, epsilon: f64, poincare: Option<&PoincareData>) -> Result<Self> {
        let d = problem.dim();
        let s = LogScales::new(epsilon)?;
        Ok(Self {
            epsilon,
            det_time_part: det_time_part(epsilon, problem.lambda(), d)?,
            coord_coeffs: predict_exit_y(epsilon, problem.lambda(), d, problem.box_radius(), 1, 0.0)?,
            c_plus: poincare.map(|p| p.c_plus),
            c_minus: poincare.map(|p| p.c_minus),
            q_plus: poincare.map(|p| p.q_plus.clone()),
            q_minus: poincare.map(|p| p.q_minus.clone()),
            h1_plus: poincare.map(|p| p.h1_plus.clone()),
            h1_minus: poincare.map(|p| p.h1_minus.clone()),
            h1_weight: first_order_weight(&s, d),
        })
    }
}
