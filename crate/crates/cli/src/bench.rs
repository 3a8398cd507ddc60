//! Replicate study: every (model, seed) pair runs either the full λ grid or
//! one homotopy, and metrics are aggregated per (model, λ).

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use spikesolve_core::{homotopy_solve, sfw_solve, summarize, DiracMeasure, FidelityKind, MetricsSummary, SfwConfig};

use crate::commands::{homotopy_config, resolve_sigma_target};
use crate::config::{BenchMode, RunConfig};
use crate::error::{CliError, CliResult};
use crate::plot::{line_chart, Series};
use crate::problem::{self, ensure_dir, write_json};

pub const THREADS_ENV: &str = "SPIKESOLVE_THREADS";

#[derive(Debug, Clone, Serialize)]
struct Replicate {
    model: FidelityKind,
    seed: u64,
    lambda: Option<f64>,
    #[serde(flatten)]
    outcome: Outcome,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
enum Outcome {
    Ok {
        metrics: MetricsSummary,
        n_spikes: usize,
        /// Insertions for a fixed-λ solve, steps for a homotopy.
        iterations: usize,
        final_lambda: f64,
    },
    Failed {
        reason: String,
    },
}

fn pool_size(cfg: &RunConfig) -> CliResult<usize> {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    let configured = cfg.bench.threads.unwrap_or(default).max(1);
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
            Ok(configured.min(cap.max(1)))
        }
        Err(_) => Ok(configured),
    }
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    if cfg.scenario.is_none() {
        return Err(CliError::Config(
            "bench needs --scenario or a `scenario` config key".into(),
        ));
    }
    if cfg.input.is_some() || cfg.data.is_some() {
        return Err(CliError::Config(
            "bench simulates its replicates; --input/--data are not accepted".into(),
        ));
    }
    let models = match cfg.model {
        Some(m) => vec![m],
        None => vec![FidelityKind::L2, FidelityKind::Kl],
    };
    let lambdas = match cfg.bench.mode {
        BenchMode::Sweep => cfg.bench.lambda_grid()?.into_iter().map(Some).collect(),
        BenchMode::Homotopy => vec![None],
    };
    let tasks: Vec<(FidelityKind, u64)> = models
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let threads = pool_size(cfg)?;
    info!(
        "bench: {} models x {} seeds x {} settings on {threads} threads",
        models.len(),
        cfg.seeds.len(),
        lambdas.len()
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    // indexed collect keeps task order whatever the scheduling
    let replicates: Vec<Replicate> = pool.install(|| {
        tasks
            .par_iter()
            .flat_map_iter(|&(model, seed)| run_task(cfg, model, seed, &lambdas))
            .collect()
    });
    for r in &replicates {
        if let Outcome::Failed { reason } = &r.outcome {
            warn!(
                "replicate {} seed {} lambda {:?} failed: {reason}",
                r.model, r.seed, r.lambda
            );
        }
    }

    ensure_dir(&cfg.out)?;
    write_replicates_csv(&cfg.out.join("replicates.csv"), &replicates)?;
    let groups: Vec<Group> = models
        .iter()
        .flat_map(|&m| lambdas.iter().map(move |&l| (m, l)))
        .map(|(m, l)| Group::collect(m, l, &replicates))
        .collect();
    let failures: Vec<&Replicate> = replicates
        .iter()
        .filter(|r| matches!(r.outcome, Outcome::Failed { .. }))
        .collect();
    write_json(
        &cfg.out.join("aggregate.json"),
        &json!({
            "mode": match cfg.bench.mode { BenchMode::Sweep => "sweep", BenchMode::Homotopy => "homotopy" },
            "delta": cfg.delta,
            "seeds": cfg.seeds,
            "groups": groups.iter().map(Group::to_json).collect::<Vec<_>>(),
            "failures": failures,
            "has_failures": !failures.is_empty(),
        }),
    )?;
    write_plot_data(&cfg.out, &groups)?;
    if cfg.plot {
        write_svgs(&cfg.out, &groups, &models)?;
    }
    for g in &groups {
        info!(
            "{} lambda {}: Jaccard {:.3} +- {:.3} over {} replicates",
            g.model,
            g.lambda.map_or("homotopy".to_string(), |l| format!("{l:.4e}")),
            g.jaccard.mean,
            g.jaccard.std,
            g.n_ok
        );
    }
    Ok(())
}

fn run_task(cfg: &RunConfig, model: FidelityKind, seed: u64, lambdas: &[Option<f64>]) -> Vec<Replicate> {
    let fail = |lambda: Option<f64>, reason: String| Replicate {
        model,
        seed,
        lambda,
        outcome: Outcome::Failed { reason },
    };
    let prepared = problem::load(cfg, seed).and_then(|p| {
        let fid = p.fidelity(model)?;
        Ok((p, fid))
    });
    let (p, fid) = match prepared {
        Ok(v) => v,
        Err(e) => return lambdas.iter().map(|&l| fail(l, e.to_string())).collect(),
    };
    let truth = p.truth.clone().expect("simulated replicates carry their ground truth");
    let score = |measure: &DiracMeasure| summarize(&truth, measure, cfg.delta);
    lambdas
        .iter()
        .map(|&lambda| {
            let result: CliResult<Outcome> = match lambda {
                Some(l) => {
                    let sc = SfwConfig {
                        lambda: l,
                        ..cfg.solver.clone()
                    };
                    sfw_solve(&fid, &p.model, &sc, &DiracMeasure::empty(p.model.dim()))
                        .and_then(|r| {
                            Ok(Outcome::Ok {
                                metrics: score(&r.measure)?,
                                n_spikes: r.measure.len(),
                                iterations: r.iterations,
                                final_lambda: l,
                            })
                        })
                        .map_err(Into::into)
                }
                None => resolve_sigma_target(cfg, &p, &fid).and_then(|target| {
                    let r = homotopy_solve(&fid, &p.model, &homotopy_config(cfg, target))?;
                    Ok(Outcome::Ok {
                        metrics: score(&r.measure)?,
                        n_spikes: r.measure.len(),
                        iterations: r.iterations(),
                        final_lambda: r.lambda_trace.last().map_or(f64::NAN, |s| s.lambda),
                    })
                }),
            };
            match result {
                Ok(outcome) => Replicate {
                    model,
                    seed,
                    lambda,
                    outcome,
                },
                Err(e) => fail(lambda, e.to_string()),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_replicates_csv(path: &Path, replicates: &[Replicate]) -> CliResult<()> {
    let mut out =
        String::from("model,seed,lambda,status,tp,fp,fn,jaccard,rmse_x,rmse_a,n_spikes,iterations,final_lambda\n");
    for r in replicates {
        match &r.outcome {
            Outcome::Ok {
                metrics: m,
                n_spikes,
                iterations,
                final_lambda,
            } => {
                let _ = writeln!(
                    out,
                    "{},{},{},ok,{},{},{},{},{},{},{},{},{}",
                    r.model,
                    r.seed,
                    fmt_opt(r.lambda),
                    m.tp,
                    m.fp,
                    m.fn_,
                    fmt_opt(m.jaccard),
                    fmt_opt(m.rmse_x),
                    fmt_opt(m.rmse_a),
                    n_spikes,
                    iterations,
                    final_lambda
                );
            }
            Outcome::Failed { reason } => {
                let _ = writeln!(
                    out,
                    "{},{},{},failed: {},,,,,,,,,",
                    r.model,
                    r.seed,
                    fmt_opt(r.lambda),
                    reason.replace(',', ";")
                );
            }
        }
    }
    std::fs::write(path, out).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
struct Stat {
    mean: f64,
    std: f64,
    n: usize,
}

impl Stat {
    /// Mean and sample standard deviation, summed in input order.
    fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

/// Metrics, spike count, iterations and final λ of one successful replicate.
type OkRow<'a> = (&'a MetricsSummary, usize, usize, f64);

struct Group {
    model: FidelityKind,
    lambda: Option<f64>,
    n_ok: usize,
    n_failed: usize,
    tp: Stat,
    fp: Stat,
    fn_: Stat,
    jaccard: Stat,
    rmse_x: Stat,
    rmse_a: Stat,
    n_spikes: Stat,
    iterations: Stat,
    final_lambda: Stat,
}

impl Group {
    fn collect(model: FidelityKind, lambda: Option<f64>, replicates: &[Replicate]) -> Self {
        let mine: Vec<&Replicate> = replicates
            .iter()
            .filter(|r| r.model == model && r.lambda == lambda)
            .collect();
        let ok: Vec<OkRow> = mine
            .iter()
            .filter_map(|r| match &r.outcome {
                Outcome::Ok {
                    metrics,
                    n_spikes,
                    iterations,
                    final_lambda,
                } => Some((metrics, *n_spikes, *iterations, *final_lambda)),
                Outcome::Failed { .. } => None,
            })
            .collect();
        let col =
            |f: &dyn Fn(&OkRow) -> Option<f64>| -> Stat { Stat::of(&ok.iter().filter_map(f).collect::<Vec<_>>()) };
        Self {
            model,
            lambda,
            n_ok: ok.len(),
            n_failed: mine.len() - ok.len(),
            tp: col(&|r| Some(r.0.tp as f64)),
            fp: col(&|r| Some(r.0.fp as f64)),
            fn_: col(&|r| Some(r.0.fn_ as f64)),
            jaccard: col(&|r| r.0.jaccard),
            rmse_x: col(&|r| r.0.rmse_x),
            rmse_a: col(&|r| r.0.rmse_a),
            n_spikes: col(&|r| Some(r.1 as f64)),
            iterations: col(&|r| Some(r.2 as f64)),
            final_lambda: col(&|r| Some(r.3)),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let stat = |s: &Stat| {
            let finite = |v: f64| {
                if v.is_finite() {
                    json!(v)
                } else {
                    serde_json::Value::Null
                }
            };
            json!({"mean": finite(s.mean), "std": finite(s.std), "n": s.n})
        };
        json!({
            "model": self.model.to_string(),
            "lambda": self.lambda,
            "n_ok": self.n_ok,
            "n_failed": self.n_failed,
            "tp": stat(&self.tp),
            "fp": stat(&self.fp),
            "fn": stat(&self.fn_),
            "jaccard": stat(&self.jaccard),
            "rmse_x": stat(&self.rmse_x),
            "rmse_a": stat(&self.rmse_a),
            "n_spikes": stat(&self.n_spikes),
            "iterations": stat(&self.iterations),
            "final_lambda": stat(&self.final_lambda),
        })
    }

    /// λ on the x-axis: the grid value, or the mean final λ of a homotopy.
    fn x(&self) -> f64 {
        self.lambda.unwrap_or(self.final_lambda.mean)
    }
}

fn write_plot_data(out: &Path, groups: &[Group]) -> CliResult<()> {
    let mut counts = String::from("model,lambda,tp_mean,tp_std,fn_mean,fn_std,fp_mean,fp_std\n");
    let mut jac = String::from("model,lambda,jaccard_mean,jaccard_std\n");
    let mut rmse = String::from("model,lambda,rmse_x_mean,rmse_x_std,rmse_a_mean,rmse_a_std\n");
    for g in groups {
        let _ = writeln!(
            counts,
            "{},{},{},{},{},{},{},{}",
            g.model,
            g.x(),
            g.tp.mean,
            g.tp.std,
            g.fn_.mean,
            g.fn_.std,
            g.fp.mean,
            g.fp.std
        );
        let _ = writeln!(jac, "{},{},{},{}", g.model, g.x(), g.jaccard.mean, g.jaccard.std);
        let _ = writeln!(
            rmse,
            "{},{},{},{},{},{}",
            g.model,
            g.x(),
            g.rmse_x.mean,
            g.rmse_x.std,
            g.rmse_a.mean,
            g.rmse_a.std
        );
    }
    for (name, body) in [
        ("plot_counts.csv", counts),
        ("plot_jaccard.csv", jac),
        ("plot_rmse.csv", rmse),
    ] {
        let path = out.join(name);
        std::fs::write(&path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn write_svgs(out: &Path, groups: &[Group], models: &[FidelityKind]) -> CliResult<()> {
    let series_of = |stat: &dyn Fn(&Group) -> f64, suffix: &str| -> Vec<Series> {
        models
            .iter()
            .map(|&m| Series {
                name: format!("{m}{suffix}"),
                points: groups
                    .iter()
                    .filter(|g| g.model == m)
                    .map(|g| (g.x(), stat(g)))
                    .collect(),
            })
            .collect()
    };
    let mut counts = series_of(&|g| g.tp.mean, " TP");
    counts.extend(series_of(&|g| g.fn_.mean, " FN"));
    counts.extend(series_of(&|g| g.fp.mean, " FP"));
    let charts = [
        ("plot_counts.svg", "TP / FN / FP", counts),
        ("plot_jaccard.svg", "Jaccard index", series_of(&|g| g.jaccard.mean, "")),
        ("plot_rmse.svg", "RMSE of positions", series_of(&|g| g.rmse_x.mean, "")),
    ];
    for (name, ylabel, series) in charts {
        let path = out.join(name);
        std::fs::write(&path, line_chart(ylabel, "lambda", ylabel, &series, true))
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
