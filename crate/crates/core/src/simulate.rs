//! Path simulation and first-exit detection.
//!
//! Linear problems with constant diffusion are advanced with the exact
//! Gaussian transition; everything else uses Euler–Maruyama. Every step of
//! length `h` is assembled from two half-step noise increments, so running
//! with [`SimOptions::refine`] checks the midpoint of each step for a crossing
//! while reproducing the same path on the coarse grid.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{finite_noise_covariance, psd_factor, JordanBlock};
use crate::model::Problem;

/// Position of one path at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct StepperState {
    pub time: f64,
    pub position: Vec<f64>,
    /// Running maximum of [`transverse_dist`] over the visited points.
    pub max_transverse_dist: f64,
}

impl StepperState {
    pub fn new(time: f64, position: Vec<f64>) -> Self {
        let max_transverse_dist = transverse_dist(&position);
        Self { time, position, max_transverse_dist }
    }

    fn moved_to(&self, time: f64, position: Vec<f64>) -> Self {
        let max_transverse_dist = self.max_transverse_dist.max(transverse_dist(&position));
        Self { time, position, max_transverse_dist }
    }
}

/// Euclidean distance from `y` to the line spanned by `e₁`.
pub fn transverse_dist(y: &[f64]) -> f64 {
    y.iter().skip(1).map(|v| v * v).sum::<f64>().sqrt()
}

fn norm_inf(y: &[f64]) -> f64 {
    y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn check_linear(problem: &Problem) -> Result<()> {
    if problem.is_linear() && problem.has_constant_diffusion() {
        Ok(())
    } else {
        Err(Error::Misuse("exact stepping needs linear drift and constant diffusion".into()))
    }
}

/// `Y(t+Δ) = e^{AΔ}(Y(t) + εG)` with `G ~ N(0, Σ_Δ)`, exact in law.
pub fn exact_linear_step<R: Rng + ?Sized>(
    problem: &Problem,
    epsilon: f64,
    state: &StepperState,
    delta: f64,
    rng: &mut R,
) -> Result<StepperState> {
    check_linear(problem)?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(invalid(format!("step must be finite and nonnegative, got {delta}")));
    }
    if delta == 0.0 {
        return Ok(state.clone());
    }
    let d = problem.dim();
    let factor = psd_factor(&finite_noise_covariance(problem.block(), problem.a0(), delta)?)?;
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut shifted = state.position.clone();
    for i in 0..d {
        let g: f64 = (0..=i).map(|j| factor[(i, j)] * z[j]).sum();
        shifted[i] += epsilon * g;
    }
    let next = problem.block().exp_action(delta, &shifted)?;
    Ok(state.moved_to(state.time + delta, next))
}

/// One Euler–Maruyama step `x + b(x)Δ + εσ(x)√Δ·draws`.
pub fn em_step(
    problem: &Problem,
    epsilon: f64,
    state: &StepperState,
    delta: f64,
    draws: &[f64],
) -> Result<StepperState> {
    if !(delta > 0.0) {
        return Err(invalid(format!("step must be positive, got {delta}")));
    }
    let d = problem.dim();
    if draws.len() != d {
        return Err(invalid(format!("expected {d} normal draws, got {}", draws.len())));
    }
    let mut ws = EmWorkspace::new(d);
    let mut next = vec![0.0; d];
    let scale = epsilon * delta.sqrt();
    ws.step(problem, &state.position, delta, scale, draws, &mut next);
    let time = state.time + delta;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { time, steps: 1 });
    }
    Ok(state.moved_to(time, next))
}

struct EmWorkspace {
    drift: Vec<f64>,
    sigma: DMatrix<f64>,
}

impl EmWorkspace {
    fn new(d: usize) -> Self {
        Self { drift: vec![0.0; d], sigma: DMatrix::zeros(d, d) }
    }

    /// `out = x + b(x) h + scale·σ(x) z`.
    fn step(&mut self, problem: &Problem, x: &[f64], h: f64, scale: f64, z: &[f64], out: &mut [f64]) {
        problem.drift_into(x, &mut self.drift);
        problem.sigma_into(x, &mut self.sigma);
        let d = x.len();
        for i in 0..d {
            let noise: f64 = (0..d).map(|j| self.sigma[(i, j)] * z[j]).sum();
            out[i] = x[i] + self.drift[i] * h + scale * noise;
        }
    }
}

/// First crossing of `{‖y‖∞ = radius}` along the segment between two states.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    /// Interpolation parameter in `(0, 1]`.
    pub theta: f64,
    pub time: f64,
    /// On the face: `|point[face − 1]| = radius` exactly.
    pub point: Vec<f64>,
    /// 1-based coordinate index.
    pub face: usize,
    pub sign: i8,
}

/// Linear interpolation of the first face crossed between `prev` (inside)
/// and `next`. Two faces in one step go to the smaller `θ`, then the lower
/// index.
pub fn detect_crossing(prev: &StepperState, next: &StepperState, radius: f64) -> Option<Crossing> {
    let mut best: Option<(f64, usize, f64)> = None;
    for (i, (&a, &b)) in prev.position.iter().zip(&next.position).enumerate() {
        if b.abs() < radius {
            continue;
        }
        let s = b.signum();
        let theta = ((s * radius - a) / (b - a)).clamp(f64::MIN_POSITIVE, 1.0);
        if best.is_none_or(|(t, _, _)| theta < t) {
            best = Some((theta, i, s));
        }
    }
    let (theta, face, s) = best?;
    let mut point: Vec<f64> =
        prev.position.iter().zip(&next.position).map(|(a, b)| a + theta * (b - a)).collect();
    point[face] = s * radius;
    for v in point.iter_mut() {
        *v = v.clamp(-radius, radius);
    }
    Some(Crossing {
        theta,
        time: prev.time + theta * (next.time - prev.time),
        point,
        face: face + 1,
        sign: s as i8,
    })
}

/// One simulated path, as written to the records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub epsilon: f64,
    pub exit_time: f64,
    pub exit_point: Vec<f64>,
    /// 1-based.
    pub exit_face: usize,
    pub exit_sign: i8,
    /// Exit time from `{‖y‖∞ ≤ ε^α}`; zero when the path starts outside it.
    pub inner_exit_time: Option<f64>,
    pub max_transverse_dist: f64,
    pub steps: u64,
    pub seed: u64,
}

impl TrialRecord {
    /// Checks that the exit point lies on the face of the box of the given
    /// radius and agrees with the recorded face and sign.
    pub fn check(&self, radius: f64) -> Result<()> {
        let d = self.exit_point.len();
        if self.exit_face == 0 || self.exit_face > d {
            return Err(invalid(format!("exit face {} outside 1..={d}", self.exit_face)));
        }
        let tol = 1e-9 * radius;
        if (norm_inf(&self.exit_point) - radius).abs() > tol {
            return Err(invalid("exit point is not on the boundary"));
        }
        let v = self.exit_point[self.exit_face - 1];
        if (v.abs() - radius).abs() > tol || v.signum() as i8 != self.exit_sign {
            return Err(invalid("exit face or sign disagrees with the exit point"));
        }
        if !(self.exit_time >= 0.0 && self.exit_time.is_finite()) {
            return Err(invalid("exit time must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Step-size policy and per-run switches.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Exact-transition step away from the current target boundary.
    pub coarse_step: f64,
    /// Exact-transition step once `‖y‖∞` exceeds `fine_zone` times the target radius.
    pub fine_step: f64,
    pub fine_zone: f64,
    /// Euler–Maruyama step.
    pub em_step: f64,
    /// Check the midpoint of every step, which halves all step sizes.
    pub refine: bool,
    /// Also record the exit from `{‖y‖∞ ≤ ε^α}`.
    pub inner_alpha: Option<f64>,
    /// Run until the outer box is left instead of the box of radius `R`.
    pub outer: bool,
    pub noise: bool,
    /// Replaces the start `εξ`.
    pub start: Option<Vec<f64>>,
    /// Negates the initial draw and every noise draw.
    pub mirror: bool,
    pub step_budget: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            coarse_step: 1e-2,
            fine_step: 1e-4,
            fine_zone: 0.9,
            em_step: 1e-4,
            refine: false,
            inner_alpha: None,
            outer: false,
            noise: true,
            start: None,
            mirror: false,
            step_budget: 100_000_000,
        }
    }
}

impl SimOptions {
    fn check(&self) -> Result<()> {
        for (name, v) in [("coarse_step", self.coarse_step), ("fine_step", self.fine_step), ("em_step", self.em_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.fine_zone > 0.0 && self.fine_zone <= 1.0) {
            return Err(invalid(format!("fine_zone must lie in (0, 1], got {}", self.fine_zone)));
        }
        if let Some(a) = self.inner_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(invalid(format!("alpha must lie in (0, 1), got {a}")));
            }
        }
        Ok(())
    }
}

/// The RNG stream of one trial: ChaCha8 keyed by the master seed, with the
/// trial id selecting the stream.
pub fn trial_rng(master_seed: u64, trial_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial_id);
    rng
}

/// Exact transition over `h` split into two halves sharing the
/// precomputed half-step factors.
struct LinearKernel {
    block: JordanBlock,
    half: f64,
    factor: DMatrix<f64>,
}

impl LinearKernel {
    fn new(problem: &Problem, h: f64) -> Result<Self> {
        let half = 0.5 * h;
        let factor = psd_factor(&finite_noise_covariance(problem.block(), problem.a0(), half)?)?;
        Ok(Self { block: *problem.block(), half, factor })
    }

    /// `out = e^{Ah/2}(y + ε L z)`.
    fn half_step(&self, y: &[f64], epsilon: f64, z: &[f64], buf: &mut [f64], out: &mut [f64]) {
        let d = y.len();
        for i in 0..d {
            let g: f64 = (0..=i).map(|j| self.factor[(i, j)] * z[j]).sum();
            buf[i] = y[i] + epsilon * g;
        }
        self.block.exp_action_into(self.half, buf, out);
    }
}

enum Stepper {
    Exact { coarse: LinearKernel, fine: LinearKernel },
    Em(EmWorkspace),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Inner(f64),
    Final(f64),
}

impl Target {
    fn radius(self) -> f64 {
        match self {
            Target::Inner(r) | Target::Final(r) => r,
        }
    }
}

/// Simulates one path until it leaves the outermost configured box.
///
/// The result depends only on `(problem, epsilon, trial_id, master_seed,
/// options)`.
pub fn run_trial(
    problem: &Problem,
    epsilon: f64,
    trial_id: u64,
    master_seed: u64,
    options: &SimOptions,
) -> Result<TrialRecord> {
    options.check()?;
    if !(epsilon >= 0.0 && epsilon < 1.0) {
        return Err(invalid(format!("noise level must lie in [0, 1), got {epsilon}")));
    }
    let d = problem.dim();
    let final_radius = if options.outer {
        problem
            .outer_half_width()
            .ok_or_else(|| invalid("outer run requested but no outer domain is configured"))?
    } else {
        problem.box_radius()
    };

    let mut rng = trial_rng(master_seed, trial_id);
    let xi = problem.sample_init(&mut rng, options.mirror);
    let start = match &options.start {
        Some(x) if x.len() != d => return Err(invalid(format!("start has length {}, expected {d}", x.len()))),
        Some(x) => x.clone(),
        None => xi.iter().map(|v| epsilon * v).collect(),
    };
    if norm_inf(&start) >= final_radius {
        return Err(invalid("start lies outside the domain"));
    }

    let mut targets = Vec::with_capacity(2);
    let mut inner_exit_time = None;
    if let Some(alpha) = options.inner_alpha {
        let r = epsilon.powf(alpha);
        if norm_inf(&start) >= r {
            inner_exit_time = Some(0.0);
        } else {
            targets.push(Target::Inner(r));
        }
    }
    targets.push(Target::Final(final_radius));

    let exact = problem.is_linear() && problem.has_constant_diffusion();
    let mut stepper = if exact {
        Stepper::Exact {
            coarse: LinearKernel::new(problem, options.coarse_step)?,
            fine: LinearKernel::new(problem, options.fine_step)?,
        }
    } else {
        Stepper::Em(EmWorkspace::new(d))
    };
    let noise_scale = if options.noise { epsilon } else { 0.0 };
    let flip = if options.mirror { -1.0 } else { 1.0 };

    let mut state = StepperState::new(0.0, start);
    let (mut z1, mut z2) = (vec![0.0; d], vec![0.0; d]);
    let mut buf = vec![0.0; d];
    let (mut mid, mut next) = (vec![0.0; d], vec![0.0; d]);
    let mut steps: u64 = 0;
    let mut k = 0;

    loop {
        let target = targets[k];
        let h = match &stepper {
            Stepper::Exact { .. } if norm_inf(&state.position) > options.fine_zone * target.radius() => {
                options.fine_step
            }
            Stepper::Exact { .. } => options.coarse_step,
            Stepper::Em(_) => options.em_step,
        };
        for z in z1.iter_mut().chain(z2.iter_mut()) {
            *z = flip * rng.sample::<f64, _>(StandardNormal);
        }
        match &mut stepper {
            Stepper::Exact { coarse, fine } => {
                let kern = if h == options.fine_step { &*fine } else { &*coarse };
                kern.half_step(&state.position, noise_scale, &z1, &mut buf, &mut mid);
                kern.half_step(&mid, noise_scale, &z2, &mut buf, &mut next);
            }
            Stepper::Em(ws) => {
                let scale = noise_scale * (0.5 * h).sqrt();
                if options.refine {
                    ws.step(problem, &state.position, 0.5 * h, scale, &z1, &mut mid);
                    ws.step(problem, &mid, 0.5 * h, scale, &z2, &mut next);
                } else {
                    for (b, (a, c)) in buf.iter_mut().zip(z1.iter().zip(&z2)) {
                        *b = a + c;
                    }
                    ws.step(problem, &state.position, h, scale, &buf, &mut next);
                }
            }
        }

        let t_next = state.time + h;
        let segments: Vec<StepperState> = if options.refine {
            let m = state.moved_to(state.time + 0.5 * h, mid.clone());
            let n = m.moved_to(t_next, next.clone());
            vec![m, n]
        } else {
            vec![state.moved_to(t_next, next.clone())]
        };

        let mut prev = state;
        for seg in segments {
            steps += 1;
            if seg.position.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp { time: seg.time, steps });
            }
            while let Some(c) = detect_crossing(&prev, &seg, targets[k].radius()) {
                match targets[k] {
                    Target::Inner(_) => {
                        inner_exit_time = Some(c.time);
                        k += 1;
                    }
                    Target::Final(_) => {
                        let max_transverse_dist = prev.max_transverse_dist.max(transverse_dist(&c.point));
                        return Ok(TrialRecord {
                            trial_id,
                            epsilon,
                            exit_time: c.time,
                            exit_point: c.point,
                            exit_face: c.face,
                            exit_sign: c.sign,
                            inner_exit_time,
                            max_transverse_dist,
                            steps,
                            seed: master_seed,
                        });
                    }
                }
            }
            prev = seg;
        }
        state = prev;
        if steps >= options.step_budget {
            return Err(Error::Budget { budget: options.step_budget, time: state.time });
        }
    }
}

/// A trial that ended in an error.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialFailure {
    pub trial_id: u64,
    pub error: Error,
}

/// Records in trial order plus the trials that failed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub records: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
    /// Trials whose start already lay outside `{‖y‖∞ ≤ ε^α}`.
    pub started_outside_inner: usize,
}

impl BatchOutcome {
    pub fn success_fraction(&self) -> f64 {
        let n = self.records.len() + self.failures.len();
        self.records.len() as f64 / n as f64
    }
}

/// Runs trials `0..n_trials` on `workers` threads. The outcome does not
/// depend on `workers`.
pub fn run_batch(
    problem: &Problem,
    epsilon: f64,
    n_trials: u64,
    master_seed: u64,
    workers: usize,
    options: &SimOptions,
) -> Result<BatchOutcome> {
    if n_trials == 0 {
        return Err(invalid("need at least one trial"));
    }
    if workers == 0 {
        return Err(invalid("need at least one worker"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrialRecord>> = pool.install(|| {
        (0..n_trials)
            .into_par_iter()
            .map(|id| run_trial(problem, epsilon, id, master_seed, options))
            .collect()
    });
    let mut out = BatchOutcome { records: Vec::new(), failures: Vec::new(), started_outside_inner: 0 };
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => {
                if rec.inner_exit_time == Some(0.0) {
                    out.started_outside_inner += 1;
                }
                out.records.push(rec);
            }
            Err(error) => out.failures.push(TrialFailure { trial_id: id as u64, error }),
        }
    }
    Ok(out)
}
