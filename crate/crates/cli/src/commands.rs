use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use jordan_exit::conjugation::{poincare_data, FlowIntegrator, PoincareData};
use jordan_exit::linalg::limit_noise_covariance;
use jordan_exit::records::{read_records, write_records};
use jordan_exit::simulate::{run_batch, BatchOutcome, SimOptions, TrialRecord};
use jordan_exit::stats::{
    eta_convention_report, sample_limit_draws, summarize_cell, EmpiricalSummary, SummaryOptions,
};
use jordan_exit::theory::PredictionSet;
use jordan_exit::Problem;
use serde::Serialize;

use crate::config::Config;
use crate::Failure;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn lib_failure(e: jordan_exit::Error) -> Failure {
    match e {
        jordan_exit::Error::Io(m) => Failure::io(m),
        other => Failure::config(other.to_string()),
    }
}

fn outer_data(problem: &Problem) -> Result<Option<PoincareData>, Failure> {
    match problem.outer_half_width() {
        Some(l) => poincare_data(&FlowIntegrator::new(problem), problem.box_radius(), l).map(Some).map_err(lib_failure),
        None => Ok(None),
    }
}

#[derive(Debug, Serialize)]
struct PredictReport {
    config_hash: String,
    limit_covariance: Vec<Vec<f64>>,
    predictions: Vec<PredictionSet>,
    poincare: Option<PoincareData>,
}

/// Deterministic parts of every expansion on the grid, the Poincaré data
/// when an outer box is configured, and optionally sampled `(ρ, η, sign)`.
pub fn predict(cfg: &Config, samples: Option<usize>, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let problem = &cfg.problem;
    let pd = outer_data(problem)?;
    let cov = limit_noise_covariance(problem.block(), problem.a0()).map_err(lib_failure)?;
    let d = problem.dim();
    let predictions = cfg
        .spec
        .epsilon_grid
        .iter()
        .map(|&e| PredictionSet::new(problem, e, pd.as_ref()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(lib_failure)?;
    let report = PredictReport {
        config_hash: cfg.hash.clone(),
        limit_covariance: (0..d).map(|i| (0..d).map(|j| cov.get(i, j)).collect()).collect(),
        predictions,
        poincare: pd,
    };
    let json = to_json(&report);
    let csv = match samples {
        Some(n) => Some(samples_csv(problem, n, seed)?),
        None => None,
    };
    match out {
        Some(dir) => {
            write_file(&dir.join("predictions.json"), &json)?;
            if let Some(c) = csv {
                write_file(&dir.join("limit_samples.csv"), c.as_bytes())?;
            }
        }
        None => {
            if csv.is_some() {
                return Err(Failure::config("--samples needs --out"));
            }
            print!("{}", String::from_utf8_lossy(&json));
        }
    }
    Ok(())
}

fn samples_csv(problem: &Problem, n: usize, seed: u64) -> Result<String, Failure> {
    let draws = sample_limit_draws(problem, n, seed).map_err(lib_failure)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::io(e.to_string());
    w.write_record(["rho", "eta", "sign"]).map_err(io)?;
    for t in &draws {
        let eta = t.eta.map(|v| format!("{v:?}")).unwrap_or_default();
        w.write_record([format!("{:?}", t.rho), eta, t.sign.to_string()]).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

/// Controls shared by `simulate` and `sweep`.
#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub epsilons: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub options: SimOptions,
}

#[derive(Debug, Clone, Serialize)]
struct CellManifest {
    epsilon: f64,
    path: PathBuf,
    records: usize,
    failures: usize,
    started_outside_inner: usize,
    error_summary: BTreeMap<String, usize>,
    seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
struct RunManifest {
    tool_version: &'static str,
    config_hash: String,
    master_seed: u64,
    trials: u64,
    workers: usize,
    outer: bool,
    refine: bool,
    alpha: Option<f64>,
    cells: Vec<CellManifest>,
    complete: bool,
    seconds: f64,
}

pub fn records_file_name(epsilon: f64) -> String {
    format!("records_eps{epsilon:e}.csv")
}

fn error_kind(e: &jordan_exit::Error) -> String {
    let s = format!("{e:?}");
    s.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
}

/// Runs one batch per noise level, writing a records file per level and
/// the manifest after every level. Returns the records per level and
/// whether every level had at least 99% successful trials.
pub fn simulate(cfg: &Config, args: &SimulateArgs) -> Result<(Vec<(f64, Vec<TrialRecord>)>, bool), Failure> {
    let start = Instant::now();
    let d = cfg.problem.dim();
    let mut manifest = RunManifest {
        tool_version: VERSION,
        config_hash: cfg.hash.clone(),
        master_seed: args.seed,
        trials: args.trials,
        workers: args.workers,
        outer: args.options.outer,
        refine: args.options.refine,
        alpha: args.options.inner_alpha,
        cells: Vec::new(),
        complete: false,
        seconds: 0.0,
    };
    let manifest_path = args.out_dir.join("manifest.json");
    write_file(&manifest_path, &to_json(&manifest))?;
    let mut all = Vec::new();
    let mut healthy = true;
    for &eps in &args.epsilons {
        let t = Instant::now();
        let outcome: BatchOutcome =
            run_batch(&cfg.problem, eps, args.trials, args.seed, args.workers, &args.options).map_err(lib_failure)?;
        let path = args.out_dir.join(records_file_name(eps));
        let mut buf = Vec::new();
        write_records(&mut buf, d, &outcome.records).map_err(lib_failure)?;
        write_file(&path, &buf)?;
        let mut error_summary = BTreeMap::new();
        for f in &outcome.failures {
            *error_summary.entry(error_kind(&f.error)).or_insert(0) += 1;
        }
        let ok = outcome.success_fraction() >= 0.99;
        healthy &= ok;
        let seconds = t.elapsed().as_secs_f64();
        eprintln!(
            "epsilon {eps:e}: {} records, {} failed, {seconds:.2} s{}",
            outcome.records.len(),
            outcome.failures.len(),
            if ok { "" } else { " (below 99% success)" }
        );
        manifest.cells.push(CellManifest {
            epsilon: eps,
            path,
            records: outcome.records.len(),
            failures: outcome.failures.len(),
            started_outside_inner: outcome.started_outside_inner,
            error_summary,
            seconds,
        });
        manifest.seconds = start.elapsed().as_secs_f64();
        write_file(&manifest_path, &to_json(&manifest))?;
        all.push((eps, outcome.records));
    }
    manifest.complete = true;
    manifest.seconds = start.elapsed().as_secs_f64();
    write_file(&manifest_path, &to_json(&manifest))?;
    Ok((all, healthy))
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    config_hash: String,
    theory_samples: usize,
    theory_seed: u64,
    outer: bool,
    summary: EmpiricalSummary,
}

pub fn read_records_file(path: &Path, d: usize) -> Result<Vec<TrialRecord>, Failure> {
    let file = fs::File::open(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let (got, recs) = read_records(file).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    if got != d {
        return Err(Failure::config(format!("{}: records have dimension {got}, config has {d}", path.display())));
    }
    if recs.is_empty() {
        return Err(Failure::config(format!("{}: no records", path.display())));
    }
    Ok(recs)
}

/// Compares records against the limiting laws, one cell per noise level,
/// cells ordered by decreasing noise.
pub fn analyze(
    cfg: &Config,
    records: Vec<TrialRecord>,
    samples: usize,
    seed: u64,
    outer: bool,
) -> Result<Vec<u8>, Failure> {
    let problem = &cfg.problem;
    let pd = if outer {
        Some(outer_data(problem)?.ok_or_else(|| Failure::config("--outer needs an outer domain in the config"))?)
    } else {
        None
    };
    let theory = sample_limit_draws(problem, samples, seed).map_err(lib_failure)?;
    let mut groups: BTreeMap<u64, Vec<TrialRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.epsilon.to_bits()).or_default().push(r);
    }
    let opts = SummaryOptions { seed, ..SummaryOptions::default() };
    let mut cells = Vec::new();
    let mut conventions = Vec::new();
    // positive floats order like their bit patterns
    for recs in groups.values().rev() {
        cells.push(summarize_cell(recs, problem, &theory, pd.as_ref(), &opts).map_err(lib_failure)?);
        if pd.is_none() && problem.is_linear() && problem.dim() >= 2 {
            conventions.push(eta_convention_report(recs, problem, &theory).map_err(lib_failure)?);
        }
    }
    let summary = EmpiricalSummary::new(cells, conventions).map_err(lib_failure)?;
    Ok(to_json(&AnalyzeReport { config_hash: cfg.hash.clone(), theory_samples: samples, theory_seed: seed, outer, summary }))
}
