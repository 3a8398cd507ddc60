//! Assembles the acquisition, forward model and data term a command works on.

use std::path::{Path, PathBuf};

use log::{info, warn};
use spikesolve_core::io::{read_field, write_field};
use spikesolve_core::{
    estimate_background, lateral_ring_mask, simulate, Background, DiracMeasure, FidelityKind, FidelityModel,
    ForwardModel, GaussianPsf, GridField, ScenarioConfig,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const SCENARIO_FILE: &str = "scenario.json";
pub const TRUTH_FILE: &str = "ground_truth.csv";

pub fn acquisition_file(dim: usize) -> &'static str {
    if dim == 3 {
        "acquisition.raw"
    } else {
        "acquisition.csv"
    }
}

pub struct Problem {
    pub y: GridField,
    pub model: ForwardModel,
    pub truth: Option<DiracMeasure>,
    /// Background mask used for estimation, if any.
    pub mask: Option<Vec<bool>>,
}

impl Problem {
    pub fn fidelity(&self, kind: FidelityKind) -> CliResult<FidelityModel> {
        Ok(FidelityModel::new(kind, self.y.clone())?)
    }
}

fn read_scenario(path: &Path) -> CliResult<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Source precedence: `--input DIR`, then `--data FILE`, then simulation of
/// the configured scenario at `seed`.
pub fn load(cfg: &RunConfig, seed: u64) -> CliResult<Problem> {
    let (scenario, y, truth) = if let Some(dir) = &cfg.input {
        let scenario = read_scenario(&dir.join(SCENARIO_FILE))?;
        let y = read_field(dir.join(acquisition_file(scenario.grid.dim())), Some(scenario.domain()))?;
        let truth_path = dir.join(TRUTH_FILE);
        let truth = if truth_path.exists() {
            Some(DiracMeasure::read_csv(&truth_path)?)
        } else {
            None
        };
        (Some(scenario), y, truth)
    } else if let Some(path) = &cfg.data {
        let domain = cfg.scenario.as_ref().map(|s| s.domain().clone());
        let y = read_field(path, domain.as_ref())?;
        let truth = match &cfg.gt {
            Some(p) => Some(DiracMeasure::read_csv(p)?),
            None => None,
        };
        (cfg.scenario.clone(), y, truth)
    } else if let Some(scenario) = &cfg.scenario {
        let scenario = scenario.with_seed(seed);
        let (truth, y) = simulate(&scenario)?;
        (Some(scenario), y, Some(truth))
    } else {
        return Err(CliError::Config(
            "no data: pass --input DIR, --data FILE or --scenario NAME".into(),
        ));
    };

    let sigma = cfg
        .sigma
        .clone()
        .or_else(|| scenario.as_ref().map(|s| s.sigma.clone()))
        .ok_or_else(|| CliError::Config("PSF widths unknown: give a scenario or a `sigma` config key".into()))?;

    let mask = background_mask(cfg, &y)?;
    let background = match (&mask, cfg.background) {
        (_, Some(b)) => b,
        (Some(mask), None) => {
            let b = estimate_background(&y, mask)?;
            info!(
                "estimated background {b:.6} from {} masked samples",
                mask.iter().filter(|m| **m).count()
            );
            b
        }
        (None, None) => scenario
            .as_ref()
            .map(|s| s.background)
            .ok_or_else(|| CliError::Config("background unknown: give a scenario, `background`, or a mask".into()))?,
    };
    let model = ForwardModel::new(
        GaussianPsf::new(sigma)?,
        y.grid().clone(),
        Background::Constant(background),
    )?;
    Ok(Problem { y, model, truth, mask })
}

fn background_mask(cfg: &RunConfig, y: &GridField) -> CliResult<Option<Vec<bool>>> {
    if let Some(path) = &cfg.bg_mask {
        let field = read_field(path, Some(y.grid().domain()))?;
        if field.grid().shape() != y.grid().shape() {
            return Err(CliError::Io(format!(
                "{}: mask shape differs from the acquisition",
                path.display()
            )));
        }
        return Ok(Some(field.values().iter().map(|v| *v != 0.0).collect()));
    }
    match cfg.bg_ring {
        Some(r) => Ok(Some(lateral_ring_mask(y.grid(), r)?)),
        None => Ok(None),
    }
}

/// Ring with the default margin when no mask was configured.
pub fn mask_or_default(problem: &Problem) -> CliResult<Vec<bool>> {
    match &problem.mask {
        Some(m) => Ok(m.clone()),
        None => {
            warn!("no background mask given, using a lateral ring of margin 0.2");
            Ok(lateral_ring_mask(problem.y.grid(), 0.2)?)
        }
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// Per-seed output directory when several seeds are run.
pub fn seed_dir(out: &Path, seed: u64, n_seeds: usize) -> PathBuf {
    if n_seeds > 1 {
        out.join(format!("seed_{seed}"))
    } else {
        out.to_path_buf()
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_acquisition(dir: &Path, y: &GridField) -> CliResult<PathBuf> {
    let path = dir.join(acquisition_file(y.grid().dim()));
    write_field(y, &path)?;
    Ok(path)
}
