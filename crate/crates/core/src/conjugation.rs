//! Deterministic dynamics: the flow `S^t` of `ẋ = b(x)`, the linearizing
//! map `f(x) = lim e^{At} S^{-t} x` with its inverse `g`, and the data of
//! the flow-induced map from the box around the origin to the outer domain.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::Problem;

/// Classical four-stage Runge–Kutta integrator for `ẋ = b(x)`.
#[derive(Debug, Clone)]
pub struct FlowIntegrator {
    problem: Problem,
    step: f64,
    bound: f64,
    max_horizon: f64,
}

/// First crossing of a box boundary by the deterministic flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCrossing {
    pub time: f64,
    pub point: Vec<f64>,
    /// 1-based face index.
    pub face: usize,
    pub sign: i8,
}

impl FlowIntegrator {
    pub fn new(problem: &Problem) -> Self {
        Self { problem: problem.clone(), step: 1e-3, bound: 1e3, max_horizon: 400.0 / problem.lambda() }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    /// Half-width of the box `{‖x‖∞ ≤ bound}` the flow must stay inside.
    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    fn rk4(&self, x: &[f64], h: f64, out: &mut [f64], scratch: &mut [Vec<f64>; 5]) {
        let d = x.len();
        let [k1, k2, k3, k4, tmp] = scratch;
        self.problem.drift_into(x, k1);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        self.problem.drift_into(tmp, k2);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        self.problem.drift_into(tmp, k3);
        for i in 0..d {
            tmp[i] = x[i] + h * k3[i];
        }
        self.problem.drift_into(tmp, k4);
        for i in 0..d {
            out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }
    }

    fn scratch(&self) -> [Vec<f64>; 5] {
        let d = self.problem.dim();
        std::array::from_fn(|_| vec![0.0; d])
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.problem.dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("expected {} finite coordinates", self.problem.dim())));
        }
        Ok(())
    }

    /// `S^t x₀`; negative `t` integrates backward.
    pub fn flow(&self, x0: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_input(x0)?;
        if !t.is_finite() {
            return Err(invalid(format!("non-finite time {t}")));
        }
        let n = (t.abs() / self.step).ceil().max(1.0) as usize;
        let h = t / n as f64;
        let mut x = x0.to_vec();
        let mut next = vec![0.0; x.len()];
        let mut scratch = self.scratch();
        for k in 0..n {
            self.rk4(&x, h, &mut next, &mut scratch);
            if next.iter().any(|v| !(v.abs() <= self.bound)) {
                return Err(Error::Escape { time: (k + 1) as f64 * h });
            }
            std::mem::swap(&mut x, &mut next);
        }
        Ok(x)
    }

    /// Runs the flow forward from `x0` until it leaves `{‖x‖∞ < half_width}`,
    /// locating the crossing time by bisection to machine precision.
    pub fn exit_box(&self, x0: &[f64], half_width: f64) -> Result<FlowCrossing> {
        self.check_input(x0)?;
        let d = x0.len();
        let mut x = x0.to_vec();
        let mut next = vec![0.0; d];
        let mut scratch = self.scratch();
        let mut t = 0.0;
        let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        if norm(&x) >= half_width {
            return Err(Error::Geometry("flow starts outside the domain".into()));
        }
        while t < self.max_horizon {
            self.rk4(&x, self.step, &mut next, &mut scratch);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::Escape { time: t + self.step });
            }
            if norm(&next) >= half_width {
                let (mut lo, mut hi) = (0.0, self.step);
                let mut probe = vec![0.0; d];
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    self.rk4(&x, mid, &mut probe, &mut scratch);
                    if norm(&probe) >= half_width {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                self.rk4(&x, hi, &mut probe, &mut scratch);
                let face = (0..d)
                    .max_by(|&a, &b| probe[a].abs().total_cmp(&probe[b].abs()))
                    .expect("nonempty");
                let sign = if probe[face] >= 0.0 { 1 } else { -1 };
                probe[face] = sign as f64 * half_width;
                let mut b = vec![0.0; d];
                self.problem.drift_into(&probe, &mut b);
                let speed = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(b[face] * sign as f64 > 1e-6 * speed) {
                    return Err(Error::Geometry(format!(
                        "flow meets face {} tangentially (normal speed {:e})",
                        face + 1,
                        b[face]
                    )));
                }
                return Ok(FlowCrossing { time: t + hi, point: probe, face: face + 1, sign });
            }
            std::mem::swap(&mut x, &mut next);
            t += self.step;
        }
        Err(Error::Convergence(format!("flow did not leave the box within t = {}", self.max_horizon)))
    }
}

/// `f(x) = x − ∫₀^∞ e^{As} (b − A)(S^{-s}x) ds`.
///
/// The integral runs on the integrator's grid with composite Simpson
/// weights. The horizon grows until the tail bound `2|φ(T)|/r` drops below
/// `tail_tol`, with `r` the decay rate of the integrand `φ` measured over the
/// last unit of time `1/λ`; the rate only increases beyond `T`.
pub fn linearize_f(integrator: &FlowIntegrator, x: &[f64], tail_tol: f64) -> Result<Vec<f64>> {
    integrator.check_input(x)?;
    let problem = &integrator.problem;
    if problem.is_linear() {
        return Ok(x.to_vec());
    }
    let d = x.len();
    let block = problem.block();
    let h = integrator.step;
    let window = ((1.0 / problem.lambda()) / h).ceil() as usize;
    let mut scratch = integrator.scratch();
    let mut z = x.to_vec();
    let mut z_next = vec![0.0; d];
    let mut nl = vec![0.0; d];
    let mut phi = vec![0.0; d];
    let mut acc = vec![0.0; d];
    let mut history: Vec<f64> = Vec::new();

    let integrand = |s: f64, z: &[f64], nl: &mut [f64], phi: &mut [f64]| {
        problem.nonlinear_part_into(z, nl);
        block.exp_action_into(s, nl, phi);
        phi.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };

    let mut mag = integrand(0.0, &z, &mut nl, &mut phi);
    acc.iter_mut().zip(&phi).for_each(|(a, p)| *a += p);
    history.push(mag);
    let mut k = 0usize;
    loop {
        // two steps per Simpson panel: weights 4 (odd) and 1|2 (even)
        for w in [4.0, 1.0] {
            integrator.rk4(&z, -h, &mut z_next, &mut scratch);
            std::mem::swap(&mut z, &mut z_next);
            k += 1;
            if z.iter().any(|v| !(v.abs() <= integrator.bound)) {
                return Err(Error::Escape { time: -(k as f64) * h });
            }
            mag = integrand(k as f64 * h, &z, &mut nl, &mut phi);
            acc.iter_mut().zip(&phi).for_each(|(a, p)| *a += w * p);
            history.push(mag);
        }
        let s = k as f64 * h;
        if k > window {
            let earlier = history[k - window];
            let tail = if mag == 0.0 {
                0.0
            } else if earlier > mag {
                let rate = (earlier / mag).ln() / (window as f64 * h);
                2.0 * mag / rate
            } else {
                f64::INFINITY
            };
            if tail < tail_tol {
                // the last node carries weight 1; interior even nodes carry 2
                break;
            }
        }
        if s > integrator.max_horizon {
            return Err(Error::Convergence(format!(
                "tail of the linearizing integral above {tail_tol:e} at horizon {s}"
            )));
        }
        // this panel's closing node becomes an interior even node of weight 2
        acc.iter_mut().zip(&phi).for_each(|(a, p)| *a += p);
    }
    Ok(x.iter().zip(&acc).map(|(xi, a)| xi - a * h / 3.0).collect())
}

/// Default tail tolerance used by [`inverse_g`] and [`poincare_data`].
pub const DEFAULT_TAIL_TOL: f64 = 1e-13;

/// Fourth-order central difference of `func` at `x` along `dir`.
pub fn directional_fd<F>(func: F, x: &[f64], dir: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let shifted = |c: f64| -> Result<Vec<f64>> {
        let p: Vec<f64> = x.iter().zip(dir).map(|(a, v)| a + c * step * v).collect();
        func(&p)
    };
    let (p2, p1, m1, m2) = (shifted(2.0)?, shifted(1.0)?, shifted(-1.0)?, shifted(-2.0)?);
    Ok((0..p1.len())
        .map(|i| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * step))
        .collect())
}

/// Jacobian of `func` at `x` by fourth-order central differences.
pub fn jacobian_fd<F>(func: F, x: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d = x.len();
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        let col = directional_fd(&func, x, &e, step)?;
        for i in 0..col.len().min(d) {
            jac[(i, j)] = col[i];
        }
    }
    Ok(jac)
}

/// `g = f⁻¹` at `y`: chord iterations `x ← x − J⁻¹(f(x) − y)` seeded at
/// `x = y`, with `J` a finite-difference Jacobian refreshed every few
/// iterations and step halving when the residual grows.
pub fn inverse_g(integrator: &FlowIntegrator, y: &[f64], tol: f64) -> Result<Vec<f64>> {
    integrator.check_input(y)?;
    if integrator.problem.is_linear() {
        return Ok(y.to_vec());
    }
    let f = |x: &[f64]| linearize_f(integrator, x, DEFAULT_TAIL_TOL);
    let resid = |x: &[f64]| -> Result<(Vec<f64>, f64)> {
        let fx = f(x)?;
        let r: Vec<f64> = fx.iter().zip(y).map(|(a, b)| a - b).collect();
        let n = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok((r, n))
    };
    let mut x = y.to_vec();
    let (mut r, mut rn) = resid(&x)?;
    let mut jac_lu = None;
    for iter in 0..100 {
        if rn <= tol {
            return Ok(x);
        }
        if iter % 5 == 0 || jac_lu.is_none() {
            let j = jacobian_fd(f, &x, 1e-4)?;
            jac_lu = Some(j.lu());
        }
        let lu = jac_lu.as_ref().expect("set above");
        let delta = lu
            .solve(&DVector::from_column_slice(&r))
            .ok_or_else(|| Error::Convergence("singular Jacobian of f".into()))?;
        let mut damping = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a - damping * b).collect();
            let (tr, tn) = resid(&trial)?;
            if tn < rn || damping < 1e-3 {
                x = trial;
                r = tr;
                rn = tn;
                break;
            }
            damping *= 0.5;
        }
    }
    if rn <= tol {
        Ok(x)
    } else {
        Err(Error::Convergence(format!("inverse map residual {rn:e} after 100 iterations")))
    }
}

/// Limit exit points, travel times and first-order directions for the
/// outer box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincareData {
    pub q_plus: Vec<f64>,
    pub q_minus: Vec<f64>,
    pub c_plus: f64,
    pub c_minus: f64,
    pub h1_plus: Vec<f64>,
    pub h1_minus: Vec<f64>,
}

/// `q± = π(g(±Re₁))`, `C± = T(g(±Re₁))` and `h₁± = Dπ(g(±Re₁)) u₁±` with
/// `u₁± = ±Rλ(d−1) Dg(±Re₁) e₂`. Derivatives are fourth-order central
/// differences with step `1e-5·R`.
pub fn poincare_data(integrator: &FlowIntegrator, radius: f64, half_width: f64) -> Result<PoincareData> {
    let problem = &integrator.problem;
    let d = problem.dim();
    if !(radius > 0.0 && half_width > radius) {
        return Err(invalid(format!("need 0 < R < L, got R = {radius}, L = {half_width}")));
    }
    let fd_step = 1e-5 * radius;
    let g = |y: &[f64]| inverse_g(integrator, y, 1e-13);
    let exit_point = |x: &[f64]| integrator.exit_box(x, half_width).map(|c| c.point);

    let side = |sign: f64| -> Result<(Vec<f64>, f64, Vec<f64>)> {
        let mut y = vec![0.0; d];
        y[0] = sign * radius;
        let start = g(&y)?;
        let crossing = integrator.exit_box(&start, half_width)?;
        if crossing.face != 1 || crossing.sign as f64 != sign {
            return Err(Error::Geometry(format!(
                "flow from the {} side leaves through face {} with sign {}",
                if sign > 0.0 { "+" } else { "-" },
                crossing.face,
                crossing.sign
            )));
        }
        let mut h1 = vec![0.0; d];
        if d >= 2 {
            let mut e2 = vec![0.0; d];
            e2[1] = 1.0;
            let dg_e2 = directional_fd(g, &y, &e2, fd_step)?;
            let scale = sign * radius * problem.lambda() * (d as f64 - 1.0);
            let u1: Vec<f64> = dg_e2.iter().map(|v| scale * v).collect();
            let norm = u1.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                let unit: Vec<f64> = u1.iter().map(|v| v / norm).collect();
                let dpi = directional_fd(exit_point, &start, &unit, fd_step)?;
                h1 = dpi.iter().map(|v| v * norm).collect();
            }
        }
        Ok((crossing.point, crossing.time, h1))
    };
    let (q_plus, c_plus, h1_plus) = side(1.0)?;
    let (q_minus, c_minus, h1_minus) = side(-1.0)?;
    Ok(PoincareData { q_plus, q_minus, c_plus, c_minus, h1_plus, h1_minus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NonlinearitySpec, ProblemSpec};
    use approx::assert_relative_eq;

    fn linear2() -> FlowIntegrator {
        FlowIntegrator::new(&ProblemSpec::linear(2, 1.0, 1.0).validate().unwrap())
    }

    fn cubic2() -> FlowIntegrator {
        let p = ProblemSpec::linear(2, 1.0, 0.3)
            .with_nonlinearity(NonlinearitySpec::Cubic)
            .validate()
            .unwrap();
        FlowIntegrator::new(&p)
    }

    #[test]
    fn flow_examples() {
        let fl = linear2();
        let e = 1f64.exp();
        let a = fl.flow(&[1.0, 0.0], 1.0).unwrap();
        assert_relative_eq!(a[0], e, max_relative = 1e-12);
        assert_eq!(a[1], 0.0);
        let b = fl.flow(&[0.0, 1.0], 1.0).unwrap();
        assert_relative_eq!(b[0], e, max_relative = 1e-12);
        assert_relative_eq!(b[1], e, max_relative = 1e-12);
        let c = fl.flow(&[0.3, -0.2], 0.0).unwrap();
        assert_eq!(c, vec![0.3, -0.2]);
    }

    #[test]
    fn flow_matches_exact_linear_action() {
        let fl = linear2().with_bound(1e12);
        let block = *fl.problem().block();
        for &t in &[-5.0, -1.0, 2.5, 10.0, 20.0] {
            let x0 = [0.3, -0.7];
            let got = fl.flow(&x0, t).unwrap();
            let exact = block.exp_action(t, &x0).unwrap();
            let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..2 {
                assert!((got[i] - exact[i]).abs() <= 1e-8 * scale.max(1.0), "t={t}");
            }
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        let fl = linear2();
        let block = *fl.problem().block();
        let x0 = [0.1, 1.0];
        let exact = block.exp_action(2.0, &x0).unwrap();
        let err = |h: f64| {
            let v = fl.clone().with_step(h).flow(&x0, 2.0).unwrap();
            (v[0] - exact[0]).abs().max((v[1] - exact[1]).abs())
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn escape_is_reported() {
        let fl = linear2().with_bound(10.0);
        assert!(matches!(fl.flow(&[1.0, 0.0], 5.0), Err(Error::Escape { .. })));
    }

    #[test]
    fn f_is_identity_without_nonlinearity() {
        let fl = linear2();
        assert_eq!(linearize_f(&fl, &[0.2, -0.1], 1e-12).unwrap(), vec![0.2, -0.1]);
        assert_eq!(inverse_g(&fl, &[0.2, -0.1], 1e-12).unwrap(), vec![0.2, -0.1]);
    }

    #[test]
    fn f_and_g_fix_origin() {
        let fl = cubic2();
        assert_eq!(linearize_f(&fl, &[0.0, 0.0], 1e-12).unwrap(), vec![0.0, 0.0]);
        assert_eq!(inverse_g(&fl, &[0.0, 0.0], 1e-12).unwrap(), vec![0.0, 0.0]);
        let quad = ProblemSpec::linear(2, 1.0, 0.3)
            .with_nonlinearity(NonlinearitySpec::Quad2)
            .validate()
            .unwrap();
        assert_eq!(linearize_f(&FlowIntegrator::new(&quad), &[0.0, 0.0], 1e-12).unwrap(), vec![0.0, 0.0]);
    }

    fn residual(fl: &FlowIntegrator, x: &[f64]) -> f64 {
        let f = |p: &[f64]| linearize_f(fl, p, 1e-13);
        let jac = jacobian_fd(f, x, 1e-3).unwrap();
        let b = DVector::from(fl.problem().drift(x).unwrap());
        let fx = linearize_f(fl, x, 1e-13).unwrap();
        let mut afx = vec![0.0; x.len()];
        fl.problem().block().apply(&fx, &mut afx);
        (jac * b - DVector::from(afx)).amax()
    }

    #[test]
    fn conjugation_residual_on_axis_point() {
        let fl = cubic2();
        let r = residual(&fl, &[0.1, 0.0]);
        assert!(r < 1e-6, "residual {r}");
    }

    #[test]
    fn conjugation_residual_quad2() {
        let p = ProblemSpec::linear(2, 1.0, 0.3)
            .with_nonlinearity(NonlinearitySpec::Quad2)
            .validate()
            .unwrap();
        let fl = FlowIntegrator::new(&p);
        let r = residual(&fl, &[0.2, -0.15]);
        assert!(r < 1e-6, "residual {r}");
    }

    #[test]
    fn round_trip_through_inverse() {
        let fl = cubic2();
        for x in [[0.3, -0.2], [-0.25, 0.1], [0.05, 0.3]] {
            let y = linearize_f(&fl, &x, 1e-13).unwrap();
            let back = inverse_g(&fl, &y, 1e-13).unwrap();
            for i in 0..2 {
                assert!((back[i] - x[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn f_deviates_quadratically() {
        let fl = cubic2();
        let dev = |s: f64| {
            let x = [0.2 * s, -0.1 * s];
            let fx = linearize_f(&fl, &x, 1e-14).unwrap();
            let num = ((fx[0] - x[0]).powi(2) + (fx[1] - x[1]).powi(2)).sqrt();
            num / (x[0] * x[0] + x[1] * x[1])
        };
        // cubic ψ makes the deviation even O(|x|³), so K(s) shrinks; it stays bounded
        let (k1, k2, k3) = (dev(1.0), dev(0.5), dev(0.25));
        assert!(k2 <= k1 * 1.01 && k3 <= k2 * 1.01, "{k1} {k2} {k3}");
        let quad = ProblemSpec::linear(2, 1.0, 0.3)
            .with_nonlinearity(NonlinearitySpec::Quad2)
            .validate()
            .unwrap();
        let fq = FlowIntegrator::new(&quad);
        let devq = |s: f64| {
            let x = [0.2 * s, -0.1 * s];
            let fx = linearize_f(&fq, &x, 1e-14).unwrap();
            let num = ((fx[0] - x[0]).powi(2) + (fx[1] - x[1]).powi(2)).sqrt();
            num / (x[0] * x[0] + x[1] * x[1])
        };
        let (q1, q2, q3, q4) = (devq(0.25), devq(0.125), devq(0.0625), devq(0.03125));
        // the ratio approaches its limit linearly in the scale
        let (r1, r2) = ((q2 - q3) / (q1 - q2), (q3 - q4) / (q2 - q3));
        assert!((r1 - 0.5).abs() < 0.05 && (r2 - 0.5).abs() < 0.05, "{q1} {q2} {q3} {q4}");
        assert!((q4 / q3 - 1.0).abs() < 0.02);
    }

    #[test]
    fn poincare_linear_two_dims() {
        let e = 1f64.exp();
        let pd = poincare_data(&linear2(), 1.0, e).unwrap();
        assert_relative_eq!(pd.c_plus, 1.0, epsilon = 1e-10);
        assert_relative_eq!(pd.c_minus, 1.0, epsilon = 1e-10);
        assert_relative_eq!(pd.q_plus[0], e, epsilon = 1e-12);
        assert_relative_eq!(pd.q_minus[0], -e, epsilon = 1e-12);
        assert!(pd.q_plus[1].abs() < 1e-12);
        let n = pd.h1_plus.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(pd.h1_plus[0].abs() < 1e-6 * n);
        // Dπ(Re₁)e₂ = (L/R) e₂ for the linear flow, u₁ = Rλ(d−1)e₂
        assert_relative_eq!(pd.h1_plus[1], e, max_relative = 1e-6);
        assert_relative_eq!(pd.h1_minus[1], -e, max_relative = 1e-6);
    }

    #[test]
    fn poincare_one_dim_has_no_direction() {
        let p = ProblemSpec::linear(1, 1.0, 0.5).validate().unwrap();
        let pd = poincare_data(&FlowIntegrator::new(&p), 0.5, 2.0).unwrap();
        assert_eq!(pd.h1_plus, vec![0.0]);
        assert_eq!(pd.h1_minus, vec![0.0]);
        assert_relative_eq!(pd.c_plus, 4f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn poincare_cubic_is_tangent() {
        // on the e₁ axis ẋ = x − x³ keeps |x| < 1, so L = 0.8 is reachable
        let fl = cubic2();
        let pd = poincare_data(&fl, 0.3, 0.8).unwrap();
        for h in [&pd.h1_plus, &pd.h1_minus] {
            let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n > 0.0);
            assert!(h[0].abs() < 1e-6 * n, "{h:?}");
        }
        // travel time along the axis solves ẋ = x − x³ from g(Re₁)
        assert!(pd.c_plus > 0.0 && (pd.c_plus - pd.c_minus).abs() < 1e-8);
    }
}
