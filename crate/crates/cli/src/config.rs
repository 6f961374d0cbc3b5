//! Configuration files.
//!
//! A config is a JSON object with the fields of `ProblemSpec` plus an
//! optional `run` object:
//!
//! ```json
//! {
//!   "dim": 2, "lambda": 1.0, "box_radius": 1.0,
//!   "diffusion": {"kind": "identity"},
//!   "nonlinearity": "none",
//!   "outer_domain": {"kind": "box", "half_width": 2.718281828459045},
//!   "init_law": {"kind": "point", "xi": [0.0, 0.0]},
//!   "epsilon_grid": [1e-4, 1e-6, 1e-8],
//!   "alpha": 0.5,
//!   "run": {"trials": 10000, "workers": 8, "seed": 1, "out_dir": "out"}
//! }
//! ```
//!
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use jordan_exit::{Problem, ProblemSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub trials: Option<u64>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub spec: ProblemSpec,
    pub problem: Problem,
    pub run: RunSection,
    pub hash: String,
}

/// SHA-256 of the canonical serialization (object keys sorted).
pub fn canonical_hash(value: &Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

pub fn parse(text: &str) -> Result<Config, Failure> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| Failure::config(format!("config: {e}")))?;
    let hash = canonical_hash(&value);
    let obj = value.as_object_mut().ok_or_else(|| Failure::config("config: expected a JSON object"))?;
    let run = match obj.remove("run") {
        Some(v) => serde_json::from_value(v).map_err(|e| Failure::config(format!("run: {e}")))?,
        None => RunSection::default(),
    };
    let spec: ProblemSpec = serde_json::from_value(value).map_err(|e| Failure::config(format!("config: {e}")))?;
    let problem = spec.validate().map_err(|e| match e {
        jordan_exit::Error::Validation(list) => Failure::config_list(list),
        other => Failure::config(other.to_string()),
    })?;
    Ok(Config { spec, problem, run, hash })
}

pub fn load(path: &Path) -> Result<Config, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{"dim": 2, "lambda": 1.0, "box_radius": 1.0,
        "diffusion": {"kind": "identity"}, "init_law": {"kind": "point", "xi": [0.0, 0.0]},
        "epsilon_grid": [1e-4, 1e-6]}"#;

    #[test]
    fn minimal_config_loads() {
        let c = parse(BASE).unwrap();
        assert_eq!(c.spec.dim, 2);
        assert_eq!(c.run, RunSection::default());
        assert_eq!(c.hash.len(), 64);
    }

    #[test]
    fn hash_ignores_key_order_and_whitespace() {
        let reordered = r#"{"epsilon_grid":[1e-4,1e-6],"init_law":{"xi":[0.0,0.0],"kind":"point"},
            "diffusion":{"kind":"identity"},"box_radius":1.0,"lambda":1.0,"dim":2}"#;
        assert_eq!(parse(BASE).unwrap().hash, parse(reordered).unwrap().hash);
        let changed = BASE.replace("\"lambda\": 1.0", "\"lambda\": 1.5");
        assert_ne!(parse(BASE).unwrap().hash, parse(&changed).unwrap().hash);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let top = BASE.replacen('{', "{\"lamda\": 1.0, ", 1);
        assert_eq!(parse(&top).unwrap_err().code, 2);
        let nested = BASE.replace("{\"kind\": \"identity\"}", "{\"kind\": \"identity\", \"scale\": 2}");
        assert_eq!(parse(&nested).unwrap_err().code, 2);
        let run = BASE.replacen('{', "{\"run\": {\"trails\": 5}, ", 1);
        assert_eq!(parse(&run).unwrap_err().code, 2);
    }

    #[test]
    fn validation_errors_are_listed() {
        let bad = BASE.replace("[1e-4, 1e-6]", "[1e-4, 1e-2]").replace("\"box_radius\": 1.0", "\"box_radius\": -1.0");
        let err = parse(&bad).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("grid not decreasing"));
        assert!(err.message.contains("box_radius"));
    }

    #[test]
    fn run_section_is_read() {
        let with_run = BASE.replacen('{', "{\"run\": {\"trials\": 5, \"seed\": 9}, ", 1);
        let c = parse(&with_run).unwrap();
        assert_eq!(c.run.trials, Some(5));
        assert_eq!(c.run.seed, Some(9));
    }
}
