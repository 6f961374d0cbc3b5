//! Problem definitions: drift, diffusion, domains, initial law and the
//! noise grid, plus validation into a ready-to-use [`Problem`].

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_factor, CovarianceMatrix, JordanBlock, MAX_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    Identity {},
    /// Constant `σ`; the noise covariance is `σσᵀ`.
    Constant { matrix: Vec<Vec<f64>> },
    Builtin { name: BuiltinDiffusion },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinDiffusion {
    /// `σ(x) = (1 + |x|²/2) I`
    RadialQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearitySpec {
    #[default]
    None,
    /// `b(x) = Ax − |x|²x`
    Cubic,
    /// `b(x) = Ax + (x¹)² e₂`, needs `d ≥ 2`
    Quad2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OuterDomainSpec {
    /// `{‖x‖∞ < half_width}`
    Box { half_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitLaw {
    Point { xi: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
}

fn default_alpha() -> f64 {
    0.5
}

/// One exit problem, as read from a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub dim: usize,
    pub lambda: f64,
    pub diffusion: DiffusionSpec,
    #[serde(default)]
    pub nonlinearity: NonlinearitySpec,
    pub box_radius: f64,
    #[serde(default)]
    pub outer_domain: Option<OuterDomainSpec>,
    pub init_law: InitLaw,
    pub epsilon_grid: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl ProblemSpec {
    /// Linear drift, identity noise, start at the origin.
    pub fn linear(dim: usize, lambda: f64, box_radius: f64) -> Self {
        Self {
            dim,
            lambda,
            diffusion: DiffusionSpec::Identity {},
            nonlinearity: NonlinearitySpec::None,
            box_radius,
            outer_domain: None,
            init_law: InitLaw::Point { xi: vec![0.0; dim] },
            epsilon_grid: vec![1e-4, 1e-6, 1e-8],
            alpha: 0.5,
        }
    }

    pub fn with_outer_box(mut self, half_width: f64) -> Self {
        self.outer_domain = Some(OuterDomainSpec::Box { half_width });
        self
    }

    pub fn with_nonlinearity(mut self, n: NonlinearitySpec) -> Self {
        self.nonlinearity = n;
        self
    }

    /// Checks every invariant and returns the normalized problem, or the
    /// full list of violations.
    pub fn validate(&self) -> Result<Problem> {
        let mut errs = Vec::new();
        let d = self.dim;
        if d == 0 || d > MAX_DIM {
            errs.push(format!("dim: must lie in 1..={MAX_DIM}, got {d}"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            errs.push(format!("lambda: must be positive, got {}", self.lambda));
        }
        if !(self.box_radius.is_finite() && self.box_radius > 0.0) {
            errs.push(format!("box_radius: must be positive, got {}", self.box_radius));
        }
        if let Some(OuterDomainSpec::Box { half_width }) = &self.outer_domain {
            if !half_width.is_finite() || *half_width <= self.box_radius {
                errs.push(format!(
                    "outer_domain.half_width: outer domain smaller than inner box ({half_width} <= {})",
                    self.box_radius
                ));
            }
        }
        if self.nonlinearity == NonlinearitySpec::Quad2 && d < 2 {
            errs.push("nonlinearity: quad2 needs dim >= 2".into());
        }
        if self.epsilon_grid.is_empty() {
            errs.push("epsilon_grid: must not be empty".into());
        }
        for (k, &e) in self.epsilon_grid.iter().enumerate() {
            if !(e > 0.0 && e < 1.0) {
                errs.push(format!("epsilon_grid[{k}]: must lie in (0, 1), got {e}"));
            }
        }
        if self.epsilon_grid.windows(2).any(|w| w[1] >= w[0]) {
            errs.push("epsilon_grid: grid not decreasing".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            errs.push(format!("alpha: must lie in (0, 1), got {}", self.alpha));
        }

        let sigma0 = match &self.diffusion {
            DiffusionSpec::Identity {} | DiffusionSpec::Builtin { .. } => Some(DMatrix::identity(d, d)),
            DiffusionSpec::Constant { matrix } => match to_matrix(matrix, d) {
                Ok(m) => Some(m),
                Err(e) => {
                    errs.push(format!("diffusion.matrix: {e}"));
                    None
                }
            },
        };

        let init = match &self.init_law {
            InitLaw::Point { xi } => {
                if xi.len() != d || xi.iter().any(|x| !x.is_finite()) {
                    errs.push(format!("init_law.xi: expected {d} finite entries"));
                    None
                } else {
                    Some(InitSampler { mean: xi.clone(), factor: None })
                }
            }
            InitLaw::Gaussian { mean, cov } => {
                let mut ok = true;
                if mean.len() != d || mean.iter().any(|x| !x.is_finite()) {
                    errs.push(format!("init_law.mean: expected {d} finite entries"));
                    ok = false;
                }
                let factor = to_matrix(cov, d)
                    .and_then(|m| CovarianceMatrix::new(m).map_err(|e| e.to_string()))
                    .and_then(|c| psd_factor(&c).map_err(|e| e.to_string()));
                match factor {
                    Ok(f) if ok => Some(InitSampler { mean: mean.clone(), factor: Some(f) }),
                    Ok(_) => None,
                    Err(e) => {
                        errs.push(format!("init_law.cov: {e}"));
                        None
                    }
                }
            }
        };

        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let block = JordanBlock::new(d, self.lambda)?;
        let sigma0 = sigma0.expect("checked above");
        let a0 = &sigma0 * sigma0.transpose();
        CovarianceMatrix::new(a0.clone()).map_err(|e| Error::Validation(vec![format!("diffusion: {e}")]))?;

        let mut spec = self.clone();
        if matches!(spec.diffusion, DiffusionSpec::Identity {}) {
            spec.diffusion = DiffusionSpec::Constant { matrix: from_matrix(&sigma0) };
        }
        Ok(Problem { spec, block, sigma0, a0, init: init.expect("checked above") })
    }
}

fn to_matrix(rows: &[Vec<f64>], d: usize) -> std::result::Result<DMatrix<f64>, String> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(format!("expected a {d}x{d} matrix"));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err("non-finite entry".into());
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct InitSampler {
    mean: Vec<f64>,
    factor: Option<DMatrix<f64>>,
}

/// A validated problem. Immutable; share it freely across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    spec: ProblemSpec,
    block: JordanBlock,
    sigma0: DMatrix<f64>,
    a0: DMatrix<f64>,
    init: InitSampler,
}

impl Problem {
    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn block(&self) -> &JordanBlock {
        &self.block
    }

    pub fn dim(&self) -> usize {
        self.block.dim()
    }

    pub fn lambda(&self) -> f64 {
        self.block.lambda()
    }

    pub fn box_radius(&self) -> f64 {
        self.spec.box_radius
    }

    pub fn outer_half_width(&self) -> Option<f64> {
        match self.spec.outer_domain {
            Some(OuterDomainSpec::Box { half_width }) => Some(half_width),
            None => None,
        }
    }

    pub fn nonlinearity(&self) -> NonlinearitySpec {
        self.spec.nonlinearity
    }

    /// `σ(0)σ(0)ᵀ`.
    pub fn a0(&self) -> &DMatrix<f64> {
        &self.a0
    }

    pub fn is_linear(&self) -> bool {
        self.spec.nonlinearity == NonlinearitySpec::None
    }

    pub fn has_constant_diffusion(&self) -> bool {
        matches!(self.spec.diffusion, DiffusionSpec::Constant { .. } | DiffusionSpec::Identity {})
    }

    /// Mean of the initial law `ξ₀`.
    pub fn init_mean(&self) -> &[f64] {
        &self.init.mean
    }

    /// `b(x) − Ax`.
    pub fn nonlinear_part_into(&self, x: &[f64], out: &mut [f64]) {
        match self.spec.nonlinearity {
            NonlinearitySpec::None => out.fill(0.0),
            NonlinearitySpec::Cubic => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -r2 * v;
                }
            }
            NonlinearitySpec::Quad2 => {
                out.fill(0.0);
                out[1] = x[0] * x[0];
            }
        }
    }

    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        self.block.apply(x, out);
        match self.spec.nonlinearity {
            NonlinearitySpec::None => {}
            NonlinearitySpec::Cubic => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                for (o, v) in out.iter_mut().zip(x) {
                    *o -= r2 * v;
                }
            }
            NonlinearitySpec::Quad2 => out[1] += x[0] * x[0],
        }
    }

    /// `b(x) = Ax + ψ(x)|x|²`.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("expected {} finite coordinates", self.dim())));
        }
        let mut out = vec![0.0; self.dim()];
        self.drift_into(x, &mut out);
        Ok(out)
    }

    /// Writes `σ(x)` into `out` (column-major, `d×d`).
    pub fn sigma_into(&self, x: &[f64], out: &mut DMatrix<f64>) {
        match self.spec.diffusion {
            DiffusionSpec::Builtin { name: BuiltinDiffusion::RadialQuadratic } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                out.fill_with_identity();
                *out *= 1.0 + 0.5 * r2;
            }
            _ => out.copy_from(&self.sigma0),
        }
    }

    /// Draws `ξ` from the initial law (unscaled).
    pub fn sample_init<R: Rng + ?Sized>(&self, rng: &mut R, negate: bool) -> Vec<f64> {
        let mut xi = self.init.mean.clone();
        if let Some(f) = &self.init.factor {
            let d = self.dim();
            let z: Vec<f64> = (0..d)
                .map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    if negate { -v } else { v }
                })
                .collect();
            for i in 0..d {
                for j in 0..=i {
                    xi[i] += f[(i, j)] * z[j];
                }
            }
        }
        if negate && self.init.factor.is_none() {
            xi.iter_mut().for_each(|v| *v = -*v);
        }
        xi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_drift_examples() {
        let p = ProblemSpec::linear(2, 1.0, 1.0).validate().unwrap();
        assert_eq!(p.drift(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(p.drift(&[0.0, 1.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn cubic_drift_example() {
        let p = ProblemSpec::linear(2, 1.0, 0.5)
            .with_nonlinearity(NonlinearitySpec::Cubic)
            .validate()
            .unwrap();
        assert_eq!(p.drift(&[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn quad2_drift() {
        let p = ProblemSpec::linear(3, 2.0, 0.5)
            .with_nonlinearity(NonlinearitySpec::Quad2)
            .validate()
            .unwrap();
        assert_eq!(p.drift(&[0.5, 0.0, 0.0]).unwrap(), vec![1.0, 0.25, 0.0]);
        let bad = ProblemSpec::linear(1, 1.0, 0.5).with_nonlinearity(NonlinearitySpec::Quad2);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn valid_spec_accepted_and_normalized() {
        let p = ProblemSpec::linear(2, 1.0, 1.0).validate().unwrap();
        assert!(matches!(p.spec().diffusion, DiffusionSpec::Constant { .. }));
        assert_eq!(p.a0(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn outer_smaller_than_box_rejected() {
        let err = ProblemSpec::linear(2, 1.0, 1.0).with_outer_box(0.5).validate().unwrap_err();
        let Error::Validation(list) = err else { panic!("wrong error kind") };
        assert!(list.iter().any(|m| m.contains("outer domain smaller than inner box")));
    }

    #[test]
    fn increasing_grid_rejected() {
        let mut s = ProblemSpec::linear(2, 1.0, 1.0);
        s.epsilon_grid = vec![1e-4, 1e-2];
        let Error::Validation(list) = s.validate().unwrap_err() else { panic!() };
        assert!(list.iter().any(|m| m.contains("grid not decreasing")));
    }

    #[test]
    fn reports_every_violation() {
        let mut s = ProblemSpec::linear(2, -1.0, 1.0);
        s.alpha = 1.5;
        s.epsilon_grid = vec![2.0];
        let Error::Validation(list) = s.validate().unwrap_err() else { panic!() };
        assert_eq!(list.len(), 3, "{list:?}");
    }

    proptest! {
        #[test]
        fn linear_drift_is_linear(
            x in prop::collection::vec(-10.0f64..10.0, 3),
            y in prop::collection::vec(-10.0f64..10.0, 3),
            c in -5.0f64..5.0,
        ) {
            let p = ProblemSpec::linear(3, 0.8, 1.0).validate().unwrap();
            let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let lhs = p.drift(&sum).unwrap();
            let (bx, by) = (p.drift(&x).unwrap(), p.drift(&y).unwrap());
            for i in 0..3 {
                prop_assert!((lhs[i] - bx[i] - by[i]).abs() <= 1e-12 * (1.0 + lhs[i].abs()));
            }
            let scaled: Vec<f64> = x.iter().map(|a| c * a).collect();
            let lhs = p.drift(&scaled).unwrap();
            for i in 0..3 {
                prop_assert!((lhs[i] - c * bx[i]).abs() <= 1e-12 * (1.0 + lhs[i].abs()));
            }
        }

        #[test]
        fn cubic_part_exact(k in prop::collection::vec(-8i32..=8, 2)) {
            // dyadic points keep every product exactly representable
            let x: Vec<f64> = k.iter().map(|&v| v as f64 / 8.0).collect();
            let p = ProblemSpec::linear(2, 1.0, 0.5)
                .with_nonlinearity(NonlinearitySpec::Cubic)
                .validate()
                .unwrap();
            let b = p.drift(&x).unwrap();
            let mut ax = vec![0.0; 2];
            p.block().apply(&x, &mut ax);
            let r2 = x[0] * x[0] + x[1] * x[1];
            for i in 0..2 {
                prop_assert_eq!(b[i] - ax[i], -r2 * x[i]);
            }
        }
    }
}
