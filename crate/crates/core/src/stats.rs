//! Residuals, two-sample Kolmogorov–Smirnov tests, binomial intervals,
//! bootstrap errors and trend verdicts over a grid of noise levels.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conjugation::PoincareData;
use crate::error::{invalid, Result};
use crate::model::Problem;
use crate::simulate::TrialRecord;
use crate::theory::{det_time_part, eta_of_chi, first_order_weight, LimitDraw, LimitLawSampler, LogScales};

/// z-score of a two-sided 99% interval.
pub const Z_99: f64 = 2.575_829_303_548_9;

/// Measured shifts of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub rho_hat: f64,
    /// Absent for `d = 1` and when the exit direction carries no `h₁`.
    pub eta_hat: Option<f64>,
    pub sign: i8,
    pub epsilon: f64,
}

/// Residuals of box runs (`outer = None`) or outer-box runs.
///
/// Box runs: `ρ̂ = τ − (1/λ)ℓ + ((d−1)/λ)ℓ₂` and
/// `η̂ = ℓ² Y⁽²⁾/(sign·R·λ(d−1)) − ℓ − (d−1)ℓ₂`; trials that left through a
/// face other than the first are skipped.
///
/// Outer runs: `C^±` is subtracted from `ρ̂`, the sign is that of the
/// nearer of `q±`, and `η̂` comes from the projection of `X − q±` on `h₁±`.
pub fn extract_residuals(
    records: &[TrialRecord],
    problem: &Problem,
    outer: Option<&PoincareData>,
) -> Result<Vec<ResidualSample>> {
    let d = problem.dim();
    let (lambda, radius) = (problem.lambda(), problem.box_radius());
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.exit_point.len() != d {
            return Err(invalid(format!("record {} has dimension {}, expected {d}", r.trial_id, r.exit_point.len())));
        }
        let s = LogScales::new(r.epsilon)?;
        let det = det_time_part(r.epsilon, lambda, d)?;
        let l2 = s.log_inv * s.log_inv;
        match outer {
            None => {
                if r.exit_face != 1 {
                    continue;
                }
                let eta_hat = (d >= 2).then(|| {
                    let m = d as f64 - 1.0;
                    r.exit_point[1] / (r.exit_sign as f64 * radius * lambda * m) * l2
                        - s.log_inv
                        - m * s.loglog_inv
                });
                out.push(ResidualSample { rho_hat: r.exit_time - det, eta_hat, sign: r.exit_sign, epsilon: r.epsilon });
            }
            Some(pd) => {
                let dist = |q: &[f64]| -> f64 { r.exit_point.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum() };
                let (sign, c, q, h1) = if dist(&pd.q_plus) <= dist(&pd.q_minus) {
                    (1i8, pd.c_plus, &pd.q_plus, &pd.h1_plus)
                } else {
                    (-1, pd.c_minus, &pd.q_minus, &pd.h1_minus)
                };
                let hh: f64 = h1.iter().map(|v| v * v).sum();
                let eta_hat = (d >= 2 && hh > 0.0).then(|| {
                    let w = r.exit_point.iter().zip(q).zip(h1).map(|((x, qi), hi)| (x - qi) * hi).sum::<f64>() / hh;
                    (w - first_order_weight(&s, d)) * l2
                });
                out.push(ResidualSample { rho_hat: r.exit_time - det - c, eta_hat, sign, epsilon: r.epsilon });
            }
        }
    }
    Ok(out)
}

fn sorted(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.iter().any(|x| x.is_nan()) {
        return Err(invalid("sample contains NaN"));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// `sup |F_a − F_b|` for two sorted samples.
fn ks_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let p = if x < 1.18 {
        let pi2 = std::f64::consts::PI.powi(2);
        let cdf: f64 = (1..=20)
            .map(|k| (-((2 * k - 1) as f64).powi(2) * pi2 / (8.0 * x * x)).exp())
            .sum::<f64>()
            * (2.0 * std::f64::consts::PI).sqrt()
            / x;
        1.0 - cdf
    } else {
        2.0 * (1..=100)
            .map(|k| {
                let t = (-2.0 * (k * k) as f64 * x * x).exp();
                if k % 2 == 1 { t } else { -t }
            })
            .sum::<f64>()
    };
    p.clamp(0.0, 1.0)
}

/// Two-sample KS statistic and asymptotic p-value with effective size
/// `n_a n_b / (n_a + n_b)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("KS test needs two nonempty samples"));
    }
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    let stat = ks_sorted(&sa, &sb);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    Ok((stat, kolmogorov_sf((na * nb / (na + nb)).sqrt() * stat)))
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(invalid(format!("need 0 <= k <= n and n >= 1, got k = {k}, n = {n}")));
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(invalid(format!("z must be positive, got {z}")));
    }
    let (kf, nf) = (k as f64, n as f64);
    let p = kf / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    Ok((lo, hi))
}

fn resample<R: Rng>(xs: &[f64], rng: &mut R) -> Vec<f64> {
    (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).collect()
}

/// Standard deviation of `stat` over `reps` bootstrap replicates. Each
/// replicate receives its own deterministic RNG.
pub fn bootstrap_se<F>(reps: usize, seed: u64, stat: F) -> Result<f64>
where
    F: Fn(&mut ChaCha8Rng) -> f64,
{
    if reps < 2 {
        return Err(invalid("bootstrap needs at least two replicates"));
    }
    let vals: Vec<f64> = (0..reps)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            stat(&mut rng)
        })
        .collect();
    let m = vals.iter().sum::<f64>() / reps as f64;
    Ok((vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps as f64 - 1.0)).sqrt())
}

/// Bootstrap standard error of the two-sample KS statistic.
pub fn ks_bootstrap_se(a: &[f64], b: &[f64], reps: usize, seed: u64) -> Result<f64> {
    ks_two_sample(a, b)?;
    bootstrap_se(reps, seed, |rng| {
        let (mut ra, mut rb) = (resample(a, rng), resample(b, rng));
        ra.sort_by(f64::total_cmp);
        rb.sort_by(f64::total_cmp);
        ks_sorted(&ra, &rb)
    })
}

/// KS statistic for one exit direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedKs {
    pub sign: i8,
    pub n_empirical: usize,
    pub n_theory: usize,
    pub stat: f64,
    pub p_value: f64,
}

/// Sign-conditioned comparison: each direction against the theory sample
/// restricted to the same sign, summarized by the larger statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedKs {
    pub per_sign: Vec<SignedKs>,
    pub stat: f64,
    pub p_value: f64,
}

fn split_by_sign(xs: &[(f64, i8)]) -> [Vec<f64>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for &(v, s) in xs {
        out[usize::from(s < 0)].push(v);
    }
    out
}

pub fn conditioned_ks(empirical: &[(f64, i8)], theory: &[(f64, i8)]) -> Result<ConditionedKs> {
    let (e, t) = (split_by_sign(empirical), split_by_sign(theory));
    let mut per_sign = Vec::new();
    for (k, sign) in [(0, 1i8), (1, -1)] {
        if e[k].is_empty() {
            continue;
        }
        if t[k].is_empty() {
            return Err(invalid(format!("no theory draws with sign {sign}")));
        }
        let (stat, p_value) = ks_two_sample(&e[k], &t[k])?;
        per_sign.push(SignedKs { sign, n_empirical: e[k].len(), n_theory: t[k].len(), stat, p_value });
    }
    let worst = per_sign
        .iter()
        .max_by(|a, b| a.stat.total_cmp(&b.stat))
        .ok_or_else(|| invalid("empty empirical sample"))?;
    Ok(ConditionedKs { stat: worst.stat, p_value: worst.p_value, per_sign: per_sign.clone() })
}

/// Bootstrap standard error of [`conditioned_ks`]'s summary statistic,
/// resampling within each sign.
pub fn conditioned_ks_se(empirical: &[(f64, i8)], theory: &[(f64, i8)], reps: usize, seed: u64) -> Result<f64> {
    conditioned_ks(empirical, theory)?;
    let (e, t) = (split_by_sign(empirical), split_by_sign(theory));
    bootstrap_se(reps, seed, |rng| {
        (0..2)
            .filter(|&k| !e[k].is_empty())
            .map(|k| {
                let (mut ra, mut rb) = (resample(&e[k], rng), resample(&t[k], rng));
                ra.sort_by(f64::total_cmp);
                rb.sort_by(f64::total_cmp);
                ks_sorted(&ra, &rb)
            })
            .fold(0.0, f64::max)
    })
}

/// What a trend verdict was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendQuantity {
    KsStatistic,
    MeanResidual,
    MedianTransverse,
}

/// One discrepancy value at one noise level, with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub epsilon: f64,
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub quantity: TrendQuantity,
    pub points: Vec<TrendPoint>,
    pub inversions: usize,
    pub pass: bool,
}

/// Passes when the values, in grid order, never increase, or increase
/// once by less than the standard error of the larger value.
pub fn trend_check(points: &[TrendPoint], quantity: TrendQuantity) -> Result<TrendVerdict> {
    if points.len() < 3 {
        return Err(invalid(format!("trend needs at least 3 grid points, got {}", points.len())));
    }
    let ups: Vec<(f64, f64)> =
        points.windows(2).filter(|w| w[1].value > w[0].value).map(|w| (w[1].value - w[0].value, w[1].se)).collect();
    let pass = match ups.as_slice() {
        [] => true,
        [(jump, se)] => jump < se,
        _ => false,
    };
    Ok(TrendVerdict { quantity, points: points.to_vec(), inversions: ups.len(), pass })
}

pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(invalid("median of an empty sample"));
    }
    let v = sorted(xs)?;
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Percentile bootstrap interval for `median(a) − median(b)`.
pub fn median_difference_interval(a: &[f64], b: &[f64], level: f64, reps: usize, seed: u64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) || reps < 10 {
        return Err(invalid("need a level in (0, 1) and at least 10 replicates"));
    }
    median(a)?;
    median(b)?;
    let mut diffs: Vec<f64> = (0..reps)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            median(&resample(a, &mut rng)).expect("nonempty") - median(&resample(b, &mut rng)).expect("nonempty")
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| diffs[((q * (reps - 1) as f64).round() as usize).min(reps - 1)];
    Ok((at(tail), at(1.0 - tail)))
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap_or(Ordering::Equal));
    let mut r = vec![0.0; xs.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut m = k;
        while m + 1 < idx.len() && xs[idx[m + 1]] == xs[idx[k]] {
            m += 1;
        }
        let avg = (k + m) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=m] {
            r[i] = avg;
        }
        k = m + 1;
    }
    r
}

/// Spearman rank correlation, ties given average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(invalid("spearman needs two samples of equal length >= 2"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(invalid("spearman of a constant sample"));
    }
    Ok(cov / (va * vb).sqrt())
}

/// `χ_ε = e^{−Aτ} Y(τ) / ε`, the noise integral up to the exit time of a
/// linear box run (including the initial `ξ`).
pub fn reconstruct_chi(record: &TrialRecord, problem: &Problem) -> Result<Vec<f64>> {
    if !problem.is_linear() {
        return Err(invalid("χ can only be reconstructed for linear drift"));
    }
    let y = problem.block().exp_action(-record.exit_time, &record.exit_point)?;
    Ok(y.into_iter().map(|v| v / record.epsilon).collect())
}

/// Which sign of `η` in the exit-location expansion the data supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaConvention {
    /// `… + η/ℓ²`, as in the statement of the result.
    Plus,
    /// `… − η/ℓ²`.
    Minus,
    Undetermined,
}

/// Evidence for each convention at one noise level.
///
/// The marginal comparison tests `η̂` (plus) and `−η̂` (minus) against the
/// limiting law of `η`. The pathwise comparison pairs each trial's `η̂`
/// with `η(χ_ε)` computed from its reconstructed noise integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionReport {
    pub epsilon: f64,
    pub ks_plus: f64,
    pub ks_minus: f64,
    pub spearman_plus: Option<f64>,
    pub median_abs_residual_plus: Option<f64>,
    pub median_abs_residual_minus: Option<f64>,
    pub supported: EtaConvention,
}

pub fn eta_convention_report(
    records: &[TrialRecord],
    problem: &Problem,
    theory: &[LimitDraw],
) -> Result<ConventionReport> {
    let d = problem.dim();
    if d < 2 {
        return Err(invalid("η is undefined for d = 1"));
    }
    let epsilon = records.first().ok_or_else(|| invalid("no records"))?.epsilon;
    let res = extract_residuals(records, problem, None)?;
    let plus: Vec<(f64, i8)> = res.iter().filter_map(|r| r.eta_hat.map(|e| (e, r.sign))).collect();
    let minus: Vec<(f64, i8)> = plus.iter().map(|&(e, s)| (-e, s)).collect();
    let th: Vec<(f64, i8)> = theory.iter().filter_map(|t| t.eta.map(|e| (e, t.sign))).collect();
    let ks_plus = conditioned_ks(&plus, &th)?.stat;
    let ks_minus = conditioned_ks(&minus, &th)?.stat;

    let (mut spearman_plus, mut mad_plus, mut mad_minus) = (None, None, None);
    if problem.is_linear() {
        // residuals keep the order of the first-face records
        let used = records.iter().filter(|r| r.exit_face == 1);
        let (mut hat, mut path) = (Vec::new(), Vec::new());
        for (r, s) in used.zip(&res) {
            let chi = reconstruct_chi(r, problem)?;
            if chi[d - 1] != 0.0 {
                hat.push(s.eta_hat.expect("d >= 2"));
                path.push(eta_of_chi(&chi, problem.lambda(), problem.box_radius(), d)?);
            }
        }
        if hat.len() >= 2 {
            spearman_plus = Some(spearman(&hat, &path)?);
            let rp: Vec<f64> = hat.iter().zip(&path).map(|(h, p)| (h - p).abs()).collect();
            let rm: Vec<f64> = hat.iter().zip(&path).map(|(h, p)| (-h - p).abs()).collect();
            mad_plus = Some(median(&rp)?);
            mad_minus = Some(median(&rm)?);
        }
    }
    let supported = match (spearman_plus, mad_plus, mad_minus) {
        (Some(rho), Some(p), Some(m)) if rho > 0.0 && p < m => EtaConvention::Plus,
        (Some(rho), Some(p), Some(m)) if rho < 0.0 && m < p => EtaConvention::Minus,
        (Some(_), _, _) => EtaConvention::Undetermined,
        _ if ks_plus < ks_minus => EtaConvention::Plus,
        _ if ks_minus < ks_plus => EtaConvention::Minus,
        _ => EtaConvention::Undetermined,
    };
    Ok(ConventionReport {
        epsilon,
        ks_plus,
        ks_minus,
        spearman_plus,
        median_abs_residual_plus: mad_plus,
        median_abs_residual_minus: mad_minus,
        supported,
    })
}

/// `n` draws of the limiting `(ρ, η, sign)`.
pub fn sample_limit_draws(problem: &Problem, n: usize, seed: u64) -> Result<Vec<LimitDraw>> {
    let sampler = LimitLawSampler::new(problem)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| sampler.sample_draw(&mut rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMoments {
    pub sign: i8,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
}

fn group_moments(xs: &[(f64, i8)]) -> Vec<GroupMoments> {
    let groups = split_by_sign(xs);
    [(0usize, 1i8), (1, -1)]
        .iter()
        .filter(|(k, _)| !groups[*k].is_empty())
        .map(|&(k, sign)| {
            let g = &groups[k];
            let n = g.len();
            let mean = g.iter().sum::<f64>() / n as f64;
            let variance =
                if n > 1 { g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0) } else { 0.0 };
            GroupMoments { sign, n, mean, variance }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignSummary {
    pub n: u64,
    pub n_plus: u64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    /// Fraction of theory draws with `χ^(d) > 0`.
    pub theory_plus_fraction: f64,
}

/// Comparison of one noise level's residuals with the limiting laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub epsilon: f64,
    pub n_records: usize,
    pub n_used: usize,
    pub rho: ConditionedKs,
    pub rho_se: f64,
    pub rho_moments: Vec<GroupMoments>,
    pub eta: Option<ConditionedKs>,
    pub eta_se: Option<f64>,
    pub eta_moments: Vec<GroupMoments>,
    pub sign: SignSummary,
    pub median_transverse: f64,
}

/// Knobs for [`summarize_cell`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryOptions {
    pub bootstrap_reps: usize,
    pub seed: u64,
    pub z: f64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self { bootstrap_reps: 200, seed: 0, z: Z_99 }
    }
}

pub fn summarize_cell(
    records: &[TrialRecord],
    problem: &Problem,
    theory: &[LimitDraw],
    outer: Option<&PoincareData>,
    opts: &SummaryOptions,
) -> Result<CellSummary> {
    let first = records.first().ok_or_else(|| invalid("no records to summarize"))?;
    if records.iter().any(|r| r.epsilon != first.epsilon) {
        return Err(invalid("records mix several noise levels"));
    }
    let res = extract_residuals(records, problem, outer)?;
    if res.is_empty() {
        return Err(invalid("no record left through the first face"));
    }
    let rho_emp: Vec<(f64, i8)> = res.iter().map(|r| (r.rho_hat, r.sign)).collect();
    let rho_th: Vec<(f64, i8)> = theory.iter().map(|t| (t.rho, t.sign)).collect();
    let rho = conditioned_ks(&rho_emp, &rho_th)?;
    let rho_se = conditioned_ks_se(&rho_emp, &rho_th, opts.bootstrap_reps, opts.seed)?;

    let eta_emp: Vec<(f64, i8)> = res.iter().filter_map(|r| r.eta_hat.map(|e| (e, r.sign))).collect();
    let eta_th: Vec<(f64, i8)> = theory.iter().filter_map(|t| t.eta.map(|e| (e, t.sign))).collect();
    let (eta, eta_se) = if eta_emp.is_empty() || eta_th.is_empty() {
        (None, None)
    } else {
        (
            Some(conditioned_ks(&eta_emp, &eta_th)?),
            Some(conditioned_ks_se(&eta_emp, &eta_th, opts.bootstrap_reps, opts.seed.wrapping_add(1))?),
        )
    };

    let n_plus = res.iter().filter(|r| r.sign > 0).count() as u64;
    let (wilson_lo, wilson_hi) = wilson_interval(n_plus, res.len() as u64, opts.z)?;
    let theory_plus_fraction = theory.iter().filter(|t| t.sign > 0).count() as f64 / theory.len().max(1) as f64;
    let transverse: Vec<f64> = records.iter().map(|r| r.max_transverse_dist).collect();

    Ok(CellSummary {
        epsilon: first.epsilon,
        n_records: records.len(),
        n_used: res.len(),
        rho,
        rho_se,
        rho_moments: group_moments(&rho_emp),
        eta,
        eta_se,
        eta_moments: group_moments(&eta_emp),
        sign: SignSummary { n: res.len() as u64, n_plus, wilson_lo, wilson_hi, theory_plus_fraction },
        median_transverse: median(&transverse)?,
    })
}

/// Per-noise-level cells plus the trend verdicts across them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSummary {
    pub cells: Vec<CellSummary>,
    pub rho_trend: Option<TrendVerdict>,
    pub eta_trend: Option<TrendVerdict>,
    pub eta_convention: Vec<ConventionReport>,
}

impl EmpiricalSummary {
    /// Builds the trend verdicts when at least three cells are present.
    pub fn new(cells: Vec<CellSummary>, eta_convention: Vec<ConventionReport>) -> Result<Self> {
        let (mut rho_trend, mut eta_trend) = (None, None);
        if cells.len() >= 3 {
            let pts: Vec<TrendPoint> =
                cells.iter().map(|c| TrendPoint { epsilon: c.epsilon, value: c.rho.stat, se: c.rho_se }).collect();
            rho_trend = Some(trend_check(&pts, TrendQuantity::KsStatistic)?);
            let eta_pts: Option<Vec<TrendPoint>> = cells
                .iter()
                .map(|c| Some(TrendPoint { epsilon: c.epsilon, value: c.eta.as_ref()?.stat, se: c.eta_se? }))
                .collect();
            if let Some(p) = eta_pts {
                eta_trend = Some(trend_check(&p, TrendQuantity::KsStatistic)?);
            }
        }
        Ok(Self { cells, rho_trend, eta_trend, eta_convention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ProblemSpec;
    use crate::theory::{predict_exit_y, predict_tau_b};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn record(eps: f64, time: f64, point: Vec<f64>, sign: i8) -> TrialRecord {
        TrialRecord {
            trial_id: 0,
            epsilon: eps,
            exit_time: time,
            exit_point: point,
            exit_face: 1,
            exit_sign: sign,
            inner_exit_time: None,
            max_transverse_dist: 0.0,
            steps: 1,
            seed: 0,
        }
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]).unwrap().0, 0.0);
        assert_eq!(ks_two_sample(&[0.0], &[1.0]).unwrap().0, 1.0);
        assert_relative_eq!(ks_two_sample(&[1.0, 2.0, 3.0], &[1.5, 2.5]).unwrap().0, 1.0 / 3.0, epsilon = 1e-15);
        assert!(ks_two_sample(&[], &[1.0]).is_err());
        assert!(ks_two_sample(&[f64::NAN], &[1.0]).is_err());
        let (_, p) = ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn kolmogorov_reference_values() {
        // P(K > x) at the usual critical points
        assert_relative_eq!(kolmogorov_sf(1.3581), 0.05, epsilon = 1e-4);
        assert_relative_eq!(kolmogorov_sf(1.6276), 0.01, epsilon = 1e-4);
        assert_relative_eq!(kolmogorov_sf(0.8276), 0.5, epsilon = 1e-3);
        // the two series agree where they switch
        let below = 1.0 - (2.0 * std::f64::consts::PI).sqrt() / 1.18
            * (1..=20).map(|k| (-((2 * k - 1) as f64).powi(2) * std::f64::consts::PI.powi(2) / (8.0 * 1.18 * 1.18)).exp()).sum::<f64>();
        assert_relative_eq!(kolmogorov_sf(1.18), below, epsilon = 1e-12);
    }

    #[test]
    fn wilson_examples() {
        assert_eq!(wilson_interval(0, 10, 1.96).unwrap().0, 0.0);
        assert_eq!(wilson_interval(10, 10, 1.96).unwrap().1, 1.0);
        let (lo, hi) = wilson_interval(50, 100, 1.96).unwrap();
        assert_relative_eq!(lo, 0.4038, epsilon = 1e-4);
        assert_relative_eq!(hi, 0.5962, epsilon = 1e-4);
        assert!(wilson_interval(11, 10, 1.96).is_err());
        assert!(wilson_interval(0, 0, 1.96).is_err());
    }

    fn pts(v: &[(f64, f64)]) -> Vec<TrendPoint> {
        v.iter().enumerate().map(|(i, &(value, se))| TrendPoint { epsilon: 10f64.powi(-4 - 2 * i as i32), value, se }).collect()
    }

    #[test]
    fn trend_examples() {
        let q = TrendQuantity::KsStatistic;
        assert!(trend_check(&pts(&[(0.30, 0.0), (0.18, 0.0), (0.10, 0.0)]), q).unwrap().pass);
        assert!(!trend_check(&pts(&[(0.10, 0.0), (0.30, 0.0), (0.50, 0.0)]), q).unwrap().pass);
        assert!(trend_check(&pts(&[(0.30, 0.0), (0.31, 0.02), (0.10, 0.0)]), q).unwrap().pass);
        assert!(!trend_check(&pts(&[(0.30, 0.0), (0.35, 0.02), (0.10, 0.0)]), q).unwrap().pass);
        assert!(trend_check(&pts(&[(0.30, 0.0), (0.2, 0.0)]), q).is_err());
    }

    #[test]
    fn residuals_invert_the_predictions() {
        let p = ProblemSpec::linear(3, 1.4, 0.6).validate().unwrap();
        for &eps in &[1e-4, 1e-6, 1e-8] {
            for &(rho, eta, sign) in &[(0.3, -0.7, 1i8), (-1.1, 2.0, -1)] {
                let t = predict_tau_b(eps, 1.4, 3, rho).unwrap();
                let y = predict_exit_y(eps, 1.4, 3, 0.6, sign, eta).unwrap();
                let r = extract_residuals(&[record(eps, t, y, sign)], &p, None).unwrap()[0];
                assert_relative_eq!(r.rho_hat, rho, epsilon = 1e-12);
                assert_relative_eq!(r.eta_hat.unwrap(), eta, epsilon = 1e-9);
                assert_eq!(r.sign, sign);
            }
        }
    }

    #[test]
    fn residual_hand_value() {
        let p = ProblemSpec::linear(2, 1.0, 1.0).validate().unwrap();
        let eps = (-100f64).exp();
        let r = extract_residuals(&[record(eps, 95.39482, vec![1.0, 0.01], 1)], &p, None).unwrap()[0];
        assert!(r.rho_hat.abs() < 1e-5);
        let p1 = ProblemSpec::linear(1, 1.0, 1.0).validate().unwrap();
        let r = extract_residuals(&[record(1e-6, 10.0, vec![-1.0], -1)], &p1, None).unwrap()[0];
        assert_eq!(r.eta_hat, None);
    }

    #[test]
    fn outer_residuals_invert_outer_prediction() {
        let p = ProblemSpec::linear(2, 1.0, 1.0).with_outer_box(1f64.exp()).validate().unwrap();
        let e = 1f64.exp();
        let pd = PoincareData {
            q_plus: vec![e, 0.0],
            q_minus: vec![-e, 0.0],
            c_plus: 1.0,
            c_minus: 1.0,
            h1_plus: vec![0.0, e],
            h1_minus: vec![0.0, -e],
        };
        for &(sign, rho, eta) in &[(1i8, 0.4, 1.5), (-1, -0.2, -0.3)] {
            let (t, x) = crate::theory::predict_outer(1e-6, 1.0, 2, sign, rho, eta, Some(&pd)).unwrap();
            let r = extract_residuals(&[record(1e-6, t, x, sign)], &p, Some(&pd)).unwrap()[0];
            assert_relative_eq!(r.rho_hat, rho, epsilon = 1e-12);
            assert_relative_eq!(r.eta_hat.unwrap(), eta, epsilon = 1e-8);
            assert_eq!(r.sign, sign);
        }
    }

    #[test]
    fn spearman_and_median() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]).unwrap(), 1.0);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        let a: Vec<f64> = (0..200).map(|i| 1.0 + i as f64 / 200.0).collect();
        let b: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        let (lo, hi) = median_difference_interval(&a, &b, 0.99, 200, 1).unwrap();
        assert!(lo > 0.8 && hi < 1.2);
    }

    #[test]
    fn conditioned_ks_takes_the_worse_sign() {
        let emp = [(0.0, 1i8), (1.0, 1), (5.0, -1)];
        let th = [(0.0, 1i8), (1.0, 1), (0.0, -1), (1.0, -1)];
        let c = conditioned_ks(&emp, &th).unwrap();
        assert_eq!(c.per_sign.len(), 2);
        assert_eq!(c.per_sign[0].stat, 0.0);
        assert_eq!(c.stat, 1.0);
        assert!(conditioned_ks(&emp, &[(0.0, 1)]).is_err());
    }

    #[test]
    fn chi_reconstruction_inverts_the_flow() {
        let p = ProblemSpec::linear(2, 1.0, 1.0).validate().unwrap();
        let chi = [0.3, -0.8];
        let (eps, t) = (1e-6, 12.0);
        let y = p.block().exp_action(t, &chi).unwrap().iter().map(|v| eps * v).collect();
        let back = reconstruct_chi(&record(eps, t, y, 1), &p).unwrap();
        assert_relative_eq!(back[0], chi[0], epsilon = 1e-12);
        assert_relative_eq!(back[1], chi[1], epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn ks_is_symmetric_and_rank_invariant(
            a in proptest::collection::vec(-50.0f64..50.0, 1..40),
            b in proptest::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let (ab, _) = ks_two_sample(&a, &b).unwrap();
            let (ba, _) = ks_two_sample(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            let f = |x: &f64| x.powi(3) + x;
            let fa: Vec<f64> = a.iter().map(f).collect();
            let fb: Vec<f64> = b.iter().map(f).collect();
            prop_assert_eq!(ks_two_sample(&fa, &fb).unwrap().0, ab);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn wilson_contains_the_estimate(n in 1u64..500, frac in 0.0f64..=1.0, z in 0.5f64..4.0) {
            let k = ((n as f64) * frac).floor() as u64;
            let (lo, hi) = wilson_interval(k, n, z).unwrap();
            let p = k as f64 / n as f64;
            prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
        }
    }
}
