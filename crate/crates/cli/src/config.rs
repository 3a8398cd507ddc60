//! JSON run configuration merged with command-line flags (flags win).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use spikesolve_core::{paper_scenario, FidelityKind, ScenarioConfig, SfwConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "spikesolve",
    version,
    about = "Off-the-grid spike recovery from blurred, noisy acquisitions"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Solve,
    Homotopy,
    Metrics,
    Bench,
    Certdump,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw ground truth and acquisition for a scenario
    Simulate(Flags),
    /// Sliding Frank-Wolfe at a fixed lambda
    Solve(Flags),
    /// Decreasing-lambda homotopy until the residual target is met
    Homotopy(Flags),
    /// Compare a reconstruction with a ground truth
    Metrics(Flags),
    /// Seeded replicate study over a lambda grid or homotopy
    Bench(Flags),
    /// Dump the certificate on the search grid
    Certdump(Flags),
}

impl Command {
    pub fn split(self) -> (CommandKind, Flags) {
        match self {
            Command::Simulate(f) => (CommandKind::Simulate, f),
            Command::Solve(f) => (CommandKind::Solve, f),
            Command::Homotopy(f) => (CommandKind::Homotopy, f),
            Command::Metrics(f) => (CommandKind::Metrics, f),
            Command::Bench(f) => (CommandKind::Bench, f),
            Command::Certdump(f) => (CommandKind::Certdump, f),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data term: l2 or kl
    #[arg(long)]
    pub model: Option<FidelityKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Seed range `a..b` (half-open) or `a..=b`
    #[arg(long)]
    pub seeds: Option<SeedRange>,
    /// Built-in scenario: sim1d, sim2d or sim3d
    #[arg(long)]
    pub scenario: Option<String>,
    /// auto, bertero, exact or a positive number
    #[arg(long)]
    pub sigma_target: Option<SigmaTarget>,
    /// Background ring margin as a fraction of the domain width
    #[arg(long, conflicts_with = "bg_mask")]
    pub bg_ring: Option<f64>,
    /// Background mask field file (non-zero samples are background)
    #[arg(long)]
    pub bg_mask: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory written by `simulate`
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Acquisition file (CSV, or raw volume with JSON sidecar)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Ground-truth spikes CSV
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Reconstructed spikes CSV
    #[arg(long)]
    pub rec: Option<PathBuf>,
    /// Matching radius
    #[arg(long)]
    pub delta: Option<f64>,
    /// Also render SVG plots
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(try_from = "serde_json::Value")]
pub enum SigmaTarget {
    Auto,
    Bertero,
    Exact,
    Value(f64),
}

impl FromStr for SigmaTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(SigmaTarget::Auto),
            "bertero" => Ok(SigmaTarget::Bertero),
            "exact" => Ok(SigmaTarget::Exact),
            v => match v.parse::<f64>() {
                Ok(x) if x > 0.0 => Ok(SigmaTarget::Value(x)),
                _ => Err(format!("expected auto, bertero, exact or a positive number, got {v:?}")),
            },
        }
    }
}

impl TryFrom<serde_json::Value> for SigmaTarget {
    type Error = String;

    fn try_from(v: serde_json::Value) -> Result<Self, Self::Error> {
        match v {
            serde_json::Value::String(s) => s.parse(),
            serde_json::Value::Number(n) => n.as_f64().unwrap_or(f64::NAN).to_string().parse(),
            other => Err(format!("invalid sigma_target {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedRange(pub Vec<u64>);

impl FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("expected a seed range like 0..20 or 0..=19, got {s:?}");
        let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
            (a, b, true)
        } else if let Some((a, b)) = s.split_once("..") {
            (a, b, false)
        } else {
            return Err(bad());
        };
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        let seeds: Vec<u64> = if inclusive { (a..=b).collect() } else { (a..b).collect() };
        if seeds.is_empty() {
            return Err(format!("seed range {s:?} is empty"));
        }
        Ok(SeedRange(seeds))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSpec {
    Named(String),
    Full(Box<ScenarioConfig>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomotopySection {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    #[serde(default = "default_inner_iters")]
    pub inner_iters: usize,
    /// Multiplier applied to the exact residual when `sigma_target = exact`.
    #[serde(default = "default_sigma_factor")]
    pub sigma_factor: f64,
}

fn default_gamma() -> f64 {
    0.9
}
fn default_c() -> f64 {
    40.0
}
fn default_t_max() -> usize {
    12
}
fn default_inner_iters() -> usize {
    1
}
fn default_sigma_factor() -> f64 {
    1.5
}

impl Default for HomotopySection {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            c: default_c(),
            t_max: default_t_max(),
            inner_iters: default_inner_iters(),
            sigma_factor: default_sigma_factor(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Sweep,
    Homotopy,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_mode")]
    pub mode: BenchMode,
    /// Explicit grid; otherwise `lambda_count` log-spaced values in
    /// `[lambda_min, lambda_max]`.
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "default_lambda_count")]
    pub lambda_count: usize,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_mode() -> BenchMode {
    BenchMode::Sweep
}
fn default_lambda_min() -> f64 {
    1e-3
}
fn default_lambda_max() -> f64 {
    10.0
}
fn default_lambda_count() -> usize {
    20
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            lambdas: None,
            lambda_min: default_lambda_min(),
            lambda_max: default_lambda_max(),
            lambda_count: default_lambda_count(),
            threads: None,
        }
    }
}

impl BenchSection {
    pub fn lambda_grid(&self) -> CliResult<Vec<f64>> {
        if let Some(l) = &self.lambdas {
            if l.is_empty() || l.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(CliError::Config("bench.lambdas must be positive and non-empty".into()));
            }
            return Ok(l.clone());
        }
        let (lo, hi, n) = (self.lambda_min, self.lambda_max, self.lambda_count);
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) || n == 0 {
            return Err(CliError::Config(
                "bench lambda range must satisfy 0 < min <= max, count >= 1".into(),
            ));
        }
        if n == 1 {
            return Ok(vec![hi]);
        }
        Ok((0..n)
            .map(|k| 10f64.powf(hi.log10() - (hi.log10() - lo.log10()) * k as f64 / (n - 1) as f64))
            .collect())
    }
}

/// Contents of `--config FILE`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub model: Option<FidelityKind>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub sigma_target: Option<SigmaTarget>,
    #[serde(default)]
    pub bg_ring: Option<f64>,
    #[serde(default)]
    pub bg_mask: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub gt: Option<PathBuf>,
    #[serde(default)]
    pub rec: Option<PathBuf>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub plot: Option<bool>,
    /// PSF widths, overriding the scenario's.
    #[serde(default)]
    pub sigma: Option<Vec<f64>>,
    /// Constant background, overriding the scenario's.
    #[serde(default)]
    pub background: Option<f64>,
    #[serde(default)]
    pub solver: Option<SfwConfig>,
    #[serde(default)]
    pub homotopy: Option<HomotopySection>,
    #[serde(default)]
    pub bench: Option<BenchSection>,
}

/// Fully merged configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: CommandKind,
    pub model: Option<FidelityKind>,
    pub lambda: Option<f64>,
    pub seeds: Vec<u64>,
    pub scenario: Option<ScenarioConfig>,
    pub sigma_target: Option<SigmaTarget>,
    pub bg_ring: Option<f64>,
    pub bg_mask: Option<PathBuf>,
    pub out: PathBuf,
    pub input: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub rec: Option<PathBuf>,
    pub delta: f64,
    pub plot: bool,
    pub sigma: Option<Vec<f64>>,
    pub background: Option<f64>,
    pub solver: SfwConfig,
    pub homotopy: HomotopySection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn resolve(command: CommandKind, flags: Flags) -> CliResult<Self> {
        let file = match &flags.config {
            Some(path) => read_config(path)?,
            None => FileConfig::default(),
        };
        let scenario_spec = flags.scenario.map(ScenarioSpec::Named).or(file.scenario);
        let scenario = match scenario_spec {
            None => None,
            Some(ScenarioSpec::Named(name)) => Some(paper_scenario(&name)?),
            Some(ScenarioSpec::Full(cfg)) => {
                cfg.validate()?;
                Some(*cfg)
            }
        };
        let seeds = match (flags.seeds, flags.seed) {
            (Some(r), _) => r.0,
            (None, Some(s)) => vec![s],
            (None, None) => match (file.seeds, file.seed) {
                (Some(s), _) if !s.is_empty() => s,
                (Some(_), _) => return Err(CliError::Config("seeds list is empty".into())),
                (None, Some(s)) => vec![s],
                (None, None) => vec![0],
            },
        };
        let delta = flags.delta.or(file.delta).unwrap_or(0.05);
        if !(delta > 0.0) {
            return Err(CliError::Config(format!("delta must be positive, got {delta}")));
        }
        let lambda = flags.lambda.or(file.lambda);
        if let Some(l) = lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(CliError::Config(format!("lambda must be positive, got {l}")));
            }
        }
        let bg_ring = flags
            .bg_ring
            .or(if flags.bg_mask.is_some() { None } else { file.bg_ring });
        if let Some(r) = bg_ring {
            if !(r > 0.0 && r < 0.5) {
                return Err(CliError::Config(format!("bg-ring must lie in (0, 0.5), got {r}")));
            }
        }
        Ok(Self {
            command,
            model: flags.model.or(file.model),
            lambda,
            seeds,
            scenario,
            sigma_target: flags.sigma_target.or(file.sigma_target),
            bg_ring,
            bg_mask: flags
                .bg_mask
                .or(if flags.bg_ring.is_some() { None } else { file.bg_mask }),
            out: flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            input: flags.input.or(file.input),
            data: flags.data.or(file.data),
            gt: flags.gt.or(file.gt),
            rec: flags.rec.or(file.rec),
            delta,
            plot: flags.plot || file.plot.unwrap_or(false),
            sigma: file.sigma,
            background: file.background,
            solver: file.solver.unwrap_or_default(),
            homotopy: file.homotopy.unwrap_or_default(),
            bench: file.bench.unwrap_or_default(),
        })
    }

    pub fn model_or_default(&self) -> FidelityKind {
        self.model.unwrap_or(FidelityKind::Kl)
    }
}

fn read_config(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!("0..3".parse::<SeedRange>().unwrap().0, vec![0, 1, 2]);
        assert_eq!("2..=4".parse::<SeedRange>().unwrap().0, vec![2, 3, 4]);
        assert!("5..5".parse::<SeedRange>().is_err());
        assert!("x".parse::<SeedRange>().is_err());
    }

    #[test]
    fn sigma_target_parsing() {
        assert_eq!("auto".parse::<SigmaTarget>().unwrap(), SigmaTarget::Auto);
        assert_eq!("12.5".parse::<SigmaTarget>().unwrap(), SigmaTarget::Value(12.5));
        assert!("-1".parse::<SigmaTarget>().is_err());
        let v: SigmaTarget = serde_json::from_str("3").unwrap();
        assert_eq!(v, SigmaTarget::Value(3.0));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"model": "l2", "lambda": 2.0, "scenario": "sim1d", "seeds": [4, 5]}"#,
        )
        .unwrap();
        let flags = Flags {
            config: Some(path),
            lambda: Some(0.5),
            ..Flags::default()
        };
        let cfg = RunConfig::resolve(CommandKind::Solve, flags).unwrap();
        assert_eq!(cfg.model, Some(FidelityKind::L2));
        assert_eq!(cfg.lambda, Some(0.5));
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.scenario.unwrap().grid.len(), 128);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"lamda": 2.0}"#).unwrap();
        let flags = Flags {
            config: Some(path),
            ..Flags::default()
        };
        assert!(matches!(
            RunConfig::resolve(CommandKind::Solve, flags),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn log_spaced_grid() {
        let grid = BenchSection::default().lambda_grid().unwrap();
        assert_eq!(grid.len(), 20);
        assert!((grid[0] - 10.0).abs() < 1e-12);
        assert!((grid[19] - 1e-3).abs() < 1e-15);
    }
}
