use log::{info, warn};
use serde_json::json;
use spikesolve_core::io::write_field;
use spikesolve_core::{
    build_certificate, estimate_sigma_target, homotopy_solve, initial_lambda, poisson_discrepancy_target, sfw_solve,
    summarize, DiracMeasure, Error, FidelityKind, FidelityModel, HomotopyConfig, SfwConfig,
};

use crate::config::{CommandKind, RunConfig, SigmaTarget};
use crate::error::{CliError, CliResult};
use crate::problem::{self, ensure_dir, seed_dir, write_json, Problem};

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    match cfg.command {
        CommandKind::Simulate => simulate(cfg),
        CommandKind::Solve => for_each_seed(cfg, solve),
        CommandKind::Homotopy => for_each_seed(cfg, homotopy),
        CommandKind::Metrics => metrics(cfg),
        CommandKind::Bench => crate::bench::run(cfg),
        CommandKind::Certdump => for_each_seed(cfg, certdump),
    }
}

/// Runs `f` once per seed when simulating, once otherwise.
fn for_each_seed(cfg: &RunConfig, f: fn(&RunConfig, u64, &std::path::Path) -> CliResult<()>) -> CliResult<()> {
    let simulated = cfg.input.is_none() && cfg.data.is_none();
    let seeds: &[u64] = if simulated { &cfg.seeds } else { &cfg.seeds[..1] };
    for &seed in seeds {
        let dir = seed_dir(&cfg.out, seed, seeds.len());
        ensure_dir(&dir)?;
        f(cfg, seed, &dir)?;
    }
    Ok(())
}

fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let scenario = cfg
        .scenario
        .as_ref()
        .ok_or_else(|| CliError::Config("simulate needs --scenario or a `scenario` config key".into()))?;
    for &seed in &cfg.seeds {
        let sc = scenario.with_seed(seed);
        let (truth, y) = spikesolve_core::simulate(&sc)?;
        let dir = seed_dir(&cfg.out, seed, cfg.seeds.len());
        ensure_dir(&dir)?;
        write_json(&dir.join(problem::SCENARIO_FILE), &serde_json::to_value(&sc)?)?;
        truth.write_csv(dir.join(problem::TRUTH_FILE))?;
        let path = problem::write_acquisition(&dir, &y)?;
        info!(
            "seed {seed}: {} spikes, {} samples -> {}",
            truth.len(),
            y.len(),
            path.display()
        );
    }
    Ok(())
}

fn solver_config(cfg: &RunConfig, lambda: f64) -> SfwConfig {
    SfwConfig {
        lambda,
        ..cfg.solver.clone()
    }
}

fn solve(cfg: &RunConfig, seed: u64, dir: &std::path::Path) -> CliResult<()> {
    let lambda = cfg
        .lambda
        .ok_or_else(|| CliError::Config("solve needs --lambda or a `lambda` config key".into()))?;
    let p = problem::load(cfg, seed)?;
    let kind = cfg.model_or_default();
    let fid = p.fidelity(kind)?;
    let init = DiracMeasure::empty(p.model.dim());
    let res = sfw_solve(&fid, &p.model, &solver_config(cfg, lambda), &init)?;
    res.measure.write_csv(dir.join("spikes.csv"))?;
    write_json(&dir.join("trace.json"), &res.trace_json())?;
    info!(
        "{kind} lambda {lambda}: {} spikes, {} insertions, converged {}, sup eta {:.6}",
        res.measure.len(),
        res.iterations,
        res.converged,
        res.final_sup_eta()
    );
    Ok(())
}

pub(crate) fn resolve_sigma_target(cfg: &RunConfig, p: &Problem, fid: &FidelityModel) -> CliResult<f64> {
    let background = p.model.min_background();
    let exact = |truth: &DiracMeasure| -> CliResult<f64> {
        let sigma = fid.residual_sigma(&p.model.apply_forward(truth)?)?;
        Ok(cfg.homotopy.sigma_factor * sigma)
    };
    let target = match (cfg.sigma_target, &p.truth) {
        (Some(SigmaTarget::Value(v)), _) => v,
        (Some(SigmaTarget::Bertero), _) => poisson_discrepancy_target(p.y.grid()),
        (Some(SigmaTarget::Exact), Some(truth)) | (None, Some(truth)) => exact(truth)?,
        (Some(SigmaTarget::Exact), None) => {
            return Err(CliError::Config("sigma-target exact needs a ground truth".into()));
        }
        (Some(SigmaTarget::Auto), _) | (None, None) => {
            if fid.kind() == FidelityKind::L2 {
                warn!("the masked residual estimate tends to be inaccurate for the L2 data term under Poisson noise");
            }
            let mask = problem::mask_or_default(p)?;
            estimate_sigma_target(fid, &mask, background)?
        }
    };
    if !(target > 0.0) {
        return Err(CliError::Numerical(format!("sigma target {target} is not positive")));
    }
    info!("sigma target {target:.6}");
    Ok(target)
}

pub(crate) fn homotopy_config(cfg: &RunConfig, sigma_target: f64) -> HomotopyConfig {
    HomotopyConfig {
        gamma: cfg.homotopy.gamma,
        c: cfg.homotopy.c,
        sigma_target,
        t_max: cfg.homotopy.t_max,
        inner: SfwConfig {
            max_outer_iters: cfg.homotopy.inner_iters,
            ..cfg.solver.clone()
        },
        init: None,
    }
}

fn homotopy(cfg: &RunConfig, seed: u64, dir: &std::path::Path) -> CliResult<()> {
    let p = problem::load(cfg, seed)?;
    let kind = cfg.model_or_default();
    let fid = p.fidelity(kind)?;
    let target = resolve_sigma_target(cfg, &p, &fid)?;
    let res = homotopy_solve(&fid, &p.model, &homotopy_config(cfg, target))?;
    res.measure.write_csv(dir.join("spikes.csv"))?;
    let mut doc = res.to_json();
    doc["sigma_target"] = json!(target);
    doc["background"] = json!(p.model.min_background());
    doc["model"] = json!(kind.to_string());
    write_json(&dir.join("homotopy.json"), &doc)?;
    for step in &res.lambda_trace {
        info!(
            "t {}: lambda {:.6e} sigma {:.6} spikes {} inner optimal {}",
            step.t, step.lambda, step.sigma, step.n_spikes, step.inner_optimal
        );
    }
    info!("met target {} after {} steps", res.met_target, res.iterations());
    Ok(())
}

fn metrics(cfg: &RunConfig) -> CliResult<()> {
    let (Some(gt), Some(rec)) = (&cfg.gt, &cfg.rec) else {
        return Err(CliError::Config("metrics needs --gt FILE and --rec FILE".into()));
    };
    let gt = DiracMeasure::read_csv(gt)?;
    let rec = DiracMeasure::read_csv(rec)?;
    let summary = summarize(&gt, &rec, cfg.delta)?;
    if summary.jaccard.is_none() {
        return Err(Error::EmptyComparison.into());
    }
    let value = serde_json::to_value(&summary)?;
    ensure_dir(&cfg.out)?;
    write_json(&cfg.out.join("metrics.json"), &value)?;
    println!("{value}");
    Ok(())
}

fn certdump(cfg: &RunConfig, seed: u64, dir: &std::path::Path) -> CliResult<()> {
    let p = problem::load(cfg, seed)?;
    let kind = cfg.model_or_default();
    let fid = p.fidelity(kind)?;
    let mu = match &cfg.rec {
        Some(path) => DiracMeasure::read_csv(path)?,
        None => DiracMeasure::empty(p.model.dim()),
    };
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => match initial_lambda(&fid, &p.model, &mu, cfg.homotopy.gamma, &cfg.solver) {
            Ok(l) => {
                info!("lambda not given, using the homotopy start {l:.6e}");
                l
            }
            Err(Error::ZeroCertificate) => {
                warn!("the certificate vanishes; dumping at lambda = 1");
                1.0
            }
            Err(e) => return Err(e.into()),
        },
    };
    let cert = build_certificate(&fid, &p.model, &mu, lambda, cfg.solver.positive)?;
    let best = cert.argmax(&cfg.solver.search);
    let field = cert.sample_on_search_grid(&cfg.solver.search);
    let name = if field.grid().dim() == 3 {
        "certificate.raw"
    } else {
        "certificate.csv"
    };
    write_field(&field, dir.join(name))?;
    write_json(
        &dir.join("certificate.json"),
        &json!({
            "lambda": lambda,
            "sup_eta": best.value,
            "argmax": best.point,
            "positive_part": cfg.solver.positive,
            "shape": field.grid().shape(),
            "grid_max": field.max(),
        }),
    )?;
    info!("sup eta {:.6} at {:?}", best.value, best.point);
    Ok(())
}
