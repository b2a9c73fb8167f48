//! Experiment configuration files (TOML).
//!
//! ```toml
//! [kernel]
//! depth = 3
//! sigma_w_sq = 2.0
//! sigma_b_sq = 0.0
//! input_dim = 10
//!
//! [spectrum]
//! k_max = 100
//! r = 1000
//!
//! [experiment]
//! protocol = "transfer"
//! n_a = [100]
//! n_b = [100]
//! rho = [0.0, 0.25, 0.5, 0.75, 1.0]
//! trials = 50
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub kernel: KernelParams,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_order")]
    pub r: usize,
    /// Read levels from a `k,eta,mult` CSV instead of decomposing the kernel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            k_max: default_k_max(),
            r: default_order(),
            file: None,
        }
    }
}

fn default_k_max() -> usize {
    100
}
fn default_order() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// One task per sample size in `n`.
    Single,
    /// Two tasks A then B: single, forward, backward and average errors.
    Transfer,
    /// Two independently trained models and their average.
    Average,
    /// `task_sizes.len()` tasks on one target, residual updates.
    Sequential,
    /// As `sequential`, solved through the block-triangular system.
    Block,
}

/// A list of values, or a log/lin-spaced range `[start, stop, count]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Log { logspace: (f64, f64, usize) },
    Lin { linspace: (f64, f64, usize) },
}

impl Default for Grid {
    fn default() -> Self {
        Grid::List(Vec::new())
    }
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            Grid::List(ref v) => v.clone(),
            Grid::Log { logspace: (a, b, n) } => spaced(a.ln(), b.ln(), n).into_iter().map(f64::exp).collect(),
            Grid::Lin { linspace: (a, b, n) } => spaced(a, b, n),
        }
    }

    /// Values rounded to integers, deduplicated, order kept.
    pub fn sizes(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for v in self.values() {
            let r = v.round();
            if !out.contains(&r) {
                out.push(r);
            }
        }
        out
    }
}

fn spaced(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    /// Sample sizes for `single`.
    #[serde(default)]
    pub n: Grid,
    #[serde(default)]
    pub n_a: Grid,
    #[serde(default)]
    pub n_b: Grid,
    /// Per-task sizes for `sequential` and `block`.
    #[serde(default)]
    pub task_sizes: Vec<usize>,
    #[serde(default = "default_rho")]
    pub rho: Grid,
    #[serde(default = "default_sigma")]
    pub sigma_sq: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_p_prime")]
    pub p_prime: usize,
    #[serde(default)]
    pub seed: u64,
    /// `false` marks sweeps too large to simulate.
    #[serde(default = "default_true")]
    pub simulate: bool,
}

fn default_rho() -> Grid {
    Grid::List(vec![1.0])
}
fn default_sigma() -> Vec<f64> {
    vec![0.0]
}
fn default_trials() -> usize {
    50
}
fn default_n_test() -> usize {
    4000
}
fn default_p_prime() -> usize {
    10_000
}
fn default_true() -> bool {
    true
}

fn bad(field: &str, reason: impl std::fmt::Display) -> Error {
    Error::Config(format!("`{field}`: {reason}"))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(f) = &cfg.spectrum.file {
            if f.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.spectrum.file = Some(dir.join(f));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel
            .validate()
            .map_err(|e| bad("kernel", e))?;
        let s = &self.spectrum;
        if s.k_max < 1 {
            return Err(bad("spectrum.k_max", "must be at least 1"));
        }
        if s.r < (4 * s.k_max).max(64) {
            return Err(bad("spectrum.r", format!("must be at least max(4 k_max, 64) = {}", (4 * s.k_max).max(64))));
        }
        let e = &self.experiment;
        let positive = |field: &str, g: &Grid| -> Result<()> {
            let v = g.values();
            if v.is_empty() {
                return Err(bad(field, format!("required for protocol {:?}", e.protocol)));
            }
            if v.iter().any(|x| !(*x >= 1.0) || !x.is_finite()) {
                return Err(bad(field, "sample sizes must be at least 1"));
            }
            Ok(())
        };
        for (field, g) in [("experiment.n", &e.n), ("experiment.n_a", &e.n_a), ("experiment.n_b", &e.n_b)] {
            if let Grid::Log { logspace: (a, b, _) } = g {
                if !(*a > 0.0 && *b > 0.0) {
                    return Err(bad(field, "logspace bounds must be positive"));
                }
            }
        }
        match e.protocol {
            Protocol::Single => positive("experiment.n", &e.n)?,
            Protocol::Transfer | Protocol::Average => {
                positive("experiment.n_a", &e.n_a)?;
                positive("experiment.n_b", &e.n_b)?;
            }
            Protocol::Sequential | Protocol::Block => {
                if e.task_sizes.is_empty() || e.task_sizes.contains(&0) {
                    return Err(bad("experiment.task_sizes", "need one or more positive task sizes"));
                }
            }
        }
        let rho = e.rho.values();
        if rho.is_empty() || rho.iter().any(|r| !(-1.0..=1.0).contains(r)) {
            return Err(bad("experiment.rho", "values must lie in [-1, 1]"));
        }
        if e.sigma_sq.is_empty() || e.sigma_sq.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(bad("experiment.sigma_sq", "need one or more non-negative noise variances"));
        }
        if e.trials < 1 {
            return Err(bad("experiment.trials", "must be at least 1"));
        }
        if e.n_test < 2 {
            return Err(bad("experiment.n_test", "must be at least 2"));
        }
        if e.p_prime < 1 {
            return Err(bad("experiment.p_prime", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
[kernel]
depth = 3
sigma_w_sq = 2.0
input_dim = 5

[spectrum]
k_max = 20
r = 200

[experiment]
protocol = "transfer"
n_a = [20]
n_b = [20]
rho = { linspace = [0.0, 1.0, 3] }
trials = 5
"#;

    #[test]
    fn parses_with_defaults() {
        let c = Config::parse(SMOKE).unwrap();
        assert_eq!(c.kernel.sigma_b_sq, 0.0);
        assert_eq!(c.experiment.rho.values(), vec![0.0, 0.5, 1.0]);
        assert_eq!(c.experiment.sigma_sq, vec![0.0]);
        assert_eq!(c.experiment.n_test, 4000);
        assert_eq!(c.experiment.p_prime, 10_000);
    }

    #[test]
    fn grids() {
        let g = Grid::Log { logspace: (10.0, 1000.0, 3) };
        let v = g.values();
        assert!((v[1] - 100.0).abs() < 1e-9);
        let g = Grid::List(vec![10.2, 9.8, 11.0]);
        assert_eq!(g.sizes(), vec![10.0, 11.0]);
    }

    #[test]
    fn field_level_errors() {
        let cases = [
            (SMOKE.replace("input_dim = 5", "input_dim = 1"), "kernel"),
            (SMOKE.replace("trials = 5", "trials = 0"), "experiment.trials"),
            (SMOKE.replace("n_a = [20]", ""), "experiment.n_a"),
            (SMOKE.replace("r = 200", "r = 10"), "spectrum.r"),
            (SMOKE.replace("protocol = \"transfer\"", "protocol = \"nope\""), "protocol"),
            (SMOKE.replace("trials = 5", "trials = 5\nbogus = 1"), "bogus"),
        ];
        for (text, field) in cases {
            let err = Config::parse(&text).unwrap_err();
            assert!(err.is_config(), "{err}");
            assert!(err.to_string().contains(field), "{field}: {err}");
        }
    }
}
