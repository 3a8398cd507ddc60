//! Decreasing-λ homotopy with warm starts, and the background / residual
//! target estimators used to stop it.

use serde::{Deserialize, Serialize};

use crate::certificate::build_certificate;
use crate::error::{Error, Result};
use crate::fidelity::FidelityModel;
use crate::forward::{ForwardModel, GridField};
use crate::geometry::{DiracMeasure, Grid};
use crate::sfw::{sfw_solve, SfwConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomotopyConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub c: f64,
    pub sigma_target: f64,
    pub t_max: usize,
    /// Inner solver template; its `lambda` is overwritten at every step.
    #[serde(default)]
    pub inner: SfwConfig,
    #[serde(skip)]
    pub init: Option<DiracMeasure>,
}

fn default_gamma() -> f64 {
    0.9
}

impl HomotopyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::NonPositiveInput {
                name: "c",
                value: self.c,
            });
        }
        if !(self.sigma_target > 0.0) {
            return Err(Error::NonPositiveInput {
                name: "sigma_target",
                value: self.sigma_target,
            });
        }
        if self.t_max == 0 {
            return Err(Error::InvalidConfig("t_max must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomotopyStep {
    pub t: usize,
    pub lambda: f64,
    pub sigma: f64,
    /// `‖η(λ_t, μ̂_t)‖_∞`.
    pub sup_eta: f64,
    /// Whether `μ̂_t` passed the `‖η‖_∞ ≤ 1 + tol` test.
    pub inner_optimal: bool,
    pub n_spikes: usize,
    pub objective_non_increasing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomotopyResult {
    pub measure: DiracMeasure,
    pub lambda_trace: Vec<HomotopyStep>,
    /// `μ̂_t` for every step, the last one being `measure`.
    pub iterates: Vec<DiracMeasure>,
    pub met_target: bool,
}

impl HomotopyResult {
    pub fn iterations(&self) -> usize {
        self.lambda_trace.len()
    }

    pub fn all_inner_optimal(&self) -> bool {
        self.lambda_trace.iter().all(|s| s.inner_optimal)
    }

    pub fn sigma_strictly_decreasing(&self) -> bool {
        self.lambda_trace.windows(2).all(|w| w[1].sigma < w[0].sigma)
    }

    /// `{lambda_trace:[{t, lambda, sigma, ...}], met_target, n_spikes}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "lambda_trace": self.lambda_trace,
            "met_target": self.met_target,
            "n_spikes": self.measure.len(),
        })
    }
}

/// `λ₁ = γ‖η(1, init)‖_∞`.
pub fn initial_lambda(
    fid: &FidelityModel,
    model: &ForwardModel,
    init: &DiracMeasure,
    gamma: f64,
    inner: &SfwConfig,
) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidConfig(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let sup = build_certificate(fid, model, init, 1.0, inner.positive)?.sup_norm(&inner.search);
    if !(sup > 0.0) {
        return Err(Error::ZeroCertificate);
    }
    Ok(gamma * sup)
}

/// `λ_{t+1} = λ_t · sup_t / (c + 1)`.
pub fn update_lambda(lambda_t: f64, sup_eta_t: f64, c: f64) -> f64 {
    lambda_t * sup_eta_t / (c + 1.0)
}

pub fn homotopy_solve(fid: &FidelityModel, model: &ForwardModel, cfg: &HomotopyConfig) -> Result<HomotopyResult> {
    cfg.validate()?;
    let mut mu = cfg.init.clone().unwrap_or_else(|| DiracMeasure::empty(model.dim()));
    let mut lambda = initial_lambda(fid, model, &mu, cfg.gamma, &cfg.inner)?;
    let mut trace = Vec::with_capacity(cfg.t_max);
    let mut iterates = Vec::with_capacity(cfg.t_max);
    let mut met_target = false;

    for t in 1..=cfg.t_max {
        let inner = SfwConfig {
            lambda,
            ..cfg.inner.clone()
        };
        let res = sfw_solve(fid, model, &inner, &mu)?;
        mu = res.measure.clone();
        let sigma = fid.residual_sigma(&model.apply_forward(&mu)?)?;
        let sup_eta = res.final_sup_eta();
        trace.push(HomotopyStep {
            t,
            lambda,
            sigma,
            sup_eta,
            inner_optimal: sup_eta <= 1.0 + cfg.inner.optimality_tol,
            n_spikes: mu.len(),
            objective_non_increasing: res.trace.objective_non_increasing(),
        });
        iterates.push(mu.clone());
        if sigma < cfg.sigma_target {
            met_target = true;
            break;
        }
        if !(sup_eta > 0.0) {
            // zero residual certificate: nothing left to explain
            break;
        }
        lambda = update_lambda(lambda, sup_eta, cfg.c);
    }

    Ok(HomotopyResult {
        measure: mu,
        lambda_trace: trace,
        iterates,
        met_target,
    })
}

/// Mean of `y` over the masked samples.
pub fn estimate_background(y: &GridField, mask: &[bool]) -> Result<f64> {
    if mask.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: y.len(),
            found: mask.len(),
        });
    }
    let (sum, count) = y
        .values()
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// `f_{y,b}(0)` over the mask, extrapolated to the whole grid by the sample
/// count ratio `|Ω| / |Ω_bg|`.
pub fn estimate_sigma_target(fid: &FidelityModel, mask: &[bool], background: f64) -> Result<f64> {
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    if fid.kind() == crate::fidelity::FidelityKind::Kl && !(background > 0.0) {
        return Err(Error::NonPositiveInput {
            name: "background",
            value: background,
        });
    }
    let grid = fid.observation().grid();
    let w = GridField::constant(grid.clone(), background);
    let partial = fid.masked_value(&w, mask)?;
    Ok(partial * grid.len() as f64 / count as f64)
}

/// `|Ω| / 2` with `|Ω|` the sample count.
pub fn poisson_discrepancy_target(grid: &Grid) -> f64 {
    grid.len() as f64 / 2.0
}

/// Rectangular ring: a sample belongs to the mask when, along some axis with
/// a positive margin, its relative coordinate lies within that margin of the
/// domain boundary.
pub fn ring_mask(grid: &Grid, margins: &[f64]) -> Result<Vec<bool>> {
    if margins.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            found: margins.len(),
        });
    }
    if margins.iter().any(|m| !(*m >= 0.0 && *m < 0.5)) {
        return Err(Error::InvalidConfig("ring margins must lie in [0, 0.5)".into()));
    }
    let dom = grid.domain();
    let mask = (0..grid.len())
        .map(|j| {
            let p = grid.point(j);
            p.iter().enumerate().any(|(k, &x)| {
                let m = margins[k];
                let r = (x - dom.lower()[k]) / dom.width(k);
                m > 0.0 && (r < m || r > 1.0 - m)
            })
        })
        .collect();
    Ok(mask)
}

/// Ring over the lateral axes (the first two, or the only one in 1D) with a
/// common margin.
pub fn lateral_ring_mask(grid: &Grid, margin: f64) -> Result<Vec<bool>> {
    let margins: Vec<f64> = (0..grid.dim()).map(|k| if k < 2 { margin } else { 0.0 }).collect();
    ring_mask(grid, &margins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificate::SearchConfig;
    use crate::fidelity::FidelityKind;
    use crate::forward::{Background, GaussianPsf};
    use crate::geometry::Domain;

    fn model(b: f64) -> ForwardModel {
        let grid = Grid::new(Domain::unit(1).unwrap(), vec![128]).unwrap();
        ForwardModel::new(GaussianPsf::isotropic(1, 0.07).unwrap(), grid, Background::Constant(b)).unwrap()
    }

    fn two_spikes() -> DiracMeasure {
        DiracMeasure::new(1, vec![0.3, 0.7], vec![1.0, 0.8]).unwrap()
    }

    #[test]
    fn update_examples() {
        assert_eq!(update_lambda(10.0, 1.0, 15.0), 0.625);
        assert_eq!(update_lambda(3.0, 41.0, 40.0), 3.0);
    }

    #[test]
    fn initial_lambda_gives_inverse_gamma_certificate() {
        let m = model(0.01);
        let fid = FidelityModel::kl(m.apply_forward(&two_spikes()).unwrap()).unwrap();
        let inner = SfwConfig::default();
        let empty = DiracMeasure::empty(1);
        let l1 = initial_lambda(&fid, &m, &empty, 0.9, &inner).unwrap();
        let sup = build_certificate(&fid, &m, &empty, l1, true)
            .unwrap()
            .sup_norm(&SearchConfig::default());
        assert!((sup - 1.0 / 0.9).abs() < 1e-10);
    }

    #[test]
    fn zero_residual_has_no_initial_lambda() {
        let m = model(0.01);
        let fid = FidelityModel::kl(m.background_field()).unwrap();
        let err = initial_lambda(&fid, &m, &DiracMeasure::empty(1), 0.9, &SfwConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ZeroCertificate));
    }

    #[test]
    fn infinite_target_stops_after_one_step() {
        let m = model(0.01);
        let fid = FidelityModel::kl(m.apply_forward(&two_spikes()).unwrap()).unwrap();
        let cfg = HomotopyConfig {
            gamma: 0.9,
            c: 40.0,
            sigma_target: f64::INFINITY,
            t_max: 12,
            inner: SfwConfig {
                max_outer_iters: 1,
                ..SfwConfig::default()
            },
            init: None,
        };
        let res = homotopy_solve(&fid, &m, &cfg).unwrap();
        assert_eq!(res.iterations(), 1);
        assert!(res.met_target);
    }

    #[test]
    fn noiseless_homotopy_decreases_lambda_and_sigma() {
        let m = model(0.01);
        for kind in [FidelityKind::L2, FidelityKind::Kl] {
            let fid = FidelityModel::new(kind, m.apply_forward(&two_spikes()).unwrap()).unwrap();
            let cfg = HomotopyConfig {
                gamma: 0.9,
                c: 5.0,
                sigma_target: 1e-4,
                t_max: 12,
                inner: SfwConfig {
                    max_outer_iters: 5,
                    ..SfwConfig::default()
                },
                init: None,
            };
            let res = homotopy_solve(&fid, &m, &cfg).unwrap();
            assert!(res.met_target, "{kind}: {:?}", res.lambda_trace);
            assert!(res.lambda_trace.windows(2).all(|w| w[1].lambda < w[0].lambda));
            assert!(res.sigma_strictly_decreasing(), "{kind}");
            assert_eq!(res.measure.len(), 2);
        }
    }

    #[test]
    fn post_update_certificate_is_one_plus_c() {
        let m = model(0.01);
        let fid = FidelityModel::kl(m.apply_forward(&two_spikes()).unwrap()).unwrap();
        let inner = SfwConfig {
            max_outer_iters: 1,
            ..SfwConfig::default()
        };
        let l1 = initial_lambda(&fid, &m, &DiracMeasure::empty(1), 0.9, &inner).unwrap();
        let res = sfw_solve(
            &fid,
            &m,
            &SfwConfig {
                lambda: l1,
                ..inner.clone()
            },
            &DiracMeasure::empty(1),
        )
        .unwrap();
        let l2 = update_lambda(l1, res.final_sup_eta(), 40.0);
        let sup = build_certificate(&fid, &m, &res.measure, l2, true)
            .unwrap()
            .sup_norm(&inner.search);
        assert!((sup - 41.0).abs() < 1e-10);
    }

    #[test]
    fn background_examples() {
        let grid = Grid::new(Domain::unit(2).unwrap(), vec![8, 8]).unwrap();
        let y = GridField::constant(grid.clone(), 0.5);
        let mask = lateral_ring_mask(&grid, 0.2).unwrap();
        assert_eq!(estimate_background(&y, &mask).unwrap(), 0.5);
        assert!(matches!(estimate_background(&y, &[false; 64]), Err(Error::EmptyMask)));
    }

    #[test]
    fn sigma_target_vanishes_on_pure_background() {
        let m = model(0.05);
        let fid = FidelityModel::kl(m.background_field()).unwrap();
        let mask = vec![true; 128];
        assert_eq!(estimate_sigma_target(&fid, &mask, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn bertero_targets() {
        let g = |lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>| Grid::new(Domain::new(lo, hi).unwrap(), shape).unwrap();
        assert_eq!(
            poisson_discrepancy_target(&g(vec![0.0; 2], vec![1.0; 2], vec![128, 128])),
            8192.0
        );
        assert_eq!(
            poisson_discrepancy_target(&g(vec![0.0; 3], vec![1.0; 3], vec![40, 40, 8])),
            6400.0
        );
        assert_eq!(
            poisson_discrepancy_target(&g(vec![0.0; 3], vec![1.0; 3], vec![190, 190, 17])),
            306850.0
        );
    }

    #[test]
    fn ring_mask_selects_border() {
        let grid = Grid::new(Domain::unit(2).unwrap(), vec![10, 10]).unwrap();
        let mask = ring_mask(&grid, &[0.2, 0.2]).unwrap();
        // interior 6x6 block excluded
        assert_eq!(mask.iter().filter(|m| **m).count(), 100 - 36);
        let g3 = Grid::new(Domain::unit(3).unwrap(), vec![10, 10, 4]).unwrap();
        let lateral = lateral_ring_mask(&g3, 0.2).unwrap();
        assert_eq!(lateral.iter().filter(|m| **m).count(), 4 * 64);
    }
}
