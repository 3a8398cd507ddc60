//! Dual certificate `η(λ, μ) = (1/λ) Φ*(−∇f(Φμ + b))`, optionally clipped to
//! its positive part, together with its global maximisation over the domain.
//!
//! The search works on the unscaled certificate `η̃ = λ η` so that the located
//! maximiser does not depend on `λ`; values are divided by `λ` afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::FidelityModel;
use crate::forward::{ForwardModel, GridField};
use crate::geometry::{project_in_place, DiracMeasure, Grid};

/// Coarse-grid plus local-ascent search parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Search-grid samples per acquisition sample, per axis.
    pub refine_factor: usize,
    /// Number of best coarse candidates refined by ascent.
    pub top_k: usize,
    pub max_ascent_steps: usize,
    /// Ascent stops once a step is shorter than this fraction of the domain width.
    pub step_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            refine_factor: 4,
            top_k: 5,
            max_ascent_steps: 200,
            step_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Certificate<'a> {
    lambda: f64,
    dual: GridField,
    model: &'a ForwardModel,
    positive_part: bool,
}

/// Builds the certificate of `μ` from `p = −∇f(Φμ + b)`.
pub fn build_certificate<'a>(
    fid: &FidelityModel,
    model: &'a ForwardModel,
    mu: &DiracMeasure,
    lambda: f64,
    positive_part: bool,
) -> Result<Certificate<'a>> {
    let w = model.apply_forward(mu)?;
    let grad = fid.gradient(&w)?;
    Certificate::from_dual(model, grad.map(|g| -g), lambda, positive_part)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maximizer {
    pub point: Vec<f64>,
    /// Certificate value there (`|η|` when the positive part is not taken).
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport {
    pub sup_norm: f64,
    pub argmax: Vec<f64>,
    pub support_values: Vec<f64>,
    pub is_optimal: bool,
}

impl<'a> Certificate<'a> {
    pub fn from_dual(model: &'a ForwardModel, dual: GridField, lambda: f64, positive_part: bool) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::NonPositiveInput {
                name: "lambda",
                value: lambda,
            });
        }
        if dual.grid() != model.grid() {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            lambda,
            dual,
            model,
            positive_part,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn dual_field(&self) -> &GridField {
        &self.dual
    }

    pub fn positive_part(&self) -> bool {
        self.positive_part
    }

    /// Same dual field, different `λ`.
    pub fn rescaled(&self, lambda: f64) -> Result<Self> {
        Self::from_dual(self.model, self.dual.clone(), lambda, self.positive_part)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if !self.model.grid().domain().contains(x) {
            return Err(Error::PositionOutOfDomain { position: x.to_vec() });
        }
        Ok(())
    }

    fn clip(&self, v: f64) -> f64 {
        if self.positive_part {
            v.max(0.0)
        } else {
            v
        }
    }

    /// `η(λ, μ)(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.clip(self.model.adjoint_value(&self.dual, x)?) / self.lambda)
    }

    /// Gradient of `η(λ, μ)` in `x`; zero where the positive part clips.
    pub fn eval_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let (v, g) = self.model.adjoint_value_and_gradient(&self.dual, x)?;
        if self.positive_part && v <= 0.0 {
            return Ok(vec![0.0; g.len()]);
        }
        Ok(g.into_iter().map(|gk| gk / self.lambda).collect())
    }

    /// Maximises `η` (positive part) or `|η|` over the domain: evaluation on a
    /// refined cell-centred grid, then projected ascent from the best `top_k`
    /// samples.
    pub fn argmax(&self, search: &SearchConfig) -> Maximizer {
        let best = self.argmax_unscaled(search);
        Maximizer {
            value: best.value / self.lambda,
            point: best.point,
        }
    }

    /// `‖η(λ, μ)‖_∞` as located by [`Self::argmax`].
    pub fn sup_norm(&self, search: &SearchConfig) -> f64 {
        self.argmax(search).value
    }

    fn score(&self, raw: f64) -> f64 {
        if self.positive_part {
            raw.max(0.0)
        } else {
            raw.abs()
        }
    }

    pub(crate) fn search_grid(&self, search: &SearchConfig) -> Grid {
        let grid = self.model.grid();
        let factor = search.refine_factor.max(1);
        let shape = grid.shape().iter().map(|n| n * factor).collect();
        Grid::new(grid.domain().clone(), shape).expect("refined grid of a valid grid")
    }

    /// `η` sampled on the search grid, for diagnostics.
    pub fn sample_on_search_grid(&self, search: &SearchConfig) -> GridField {
        let sgrid = self.search_grid(search);
        let axes: Vec<Vec<f64>> = (0..sgrid.dim()).map(|k| sgrid.coords(k).to_vec()).collect();
        let raw = self
            .model
            .adjoint_on_tensor_grid(&self.dual, &axes)
            .expect("search axes match the model");
        let values = raw.into_iter().map(|v| self.clip(v) / self.lambda).collect();
        GridField::from_parts_unchecked(sgrid, values)
    }

    fn argmax_unscaled(&self, search: &SearchConfig) -> Maximizer {
        let sgrid = self.search_grid(search);
        let axes: Vec<Vec<f64>> = (0..sgrid.dim()).map(|k| sgrid.coords(k).to_vec()).collect();
        let raw = self
            .model
            .adjoint_on_tensor_grid(&self.dual, &axes)
            .expect("search axes match the model");

        let mut order: Vec<usize> = (0..raw.len()).collect();
        // descending score, ascending index on ties
        order.sort_by(|&i, &j| self.score(raw[j]).total_cmp(&self.score(raw[i])).then(i.cmp(&j)));

        let mut best = Maximizer {
            point: sgrid.point(order[0]),
            value: self.score(raw[order[0]]),
        };
        for &idx in order.iter().take(search.top_k.max(1)) {
            let start_value = self.score(raw[idx]);
            if start_value <= 0.0 {
                break;
            }
            let refined = self.ascend(sgrid.point(idx), raw[idx].signum(), search);
            if refined.value > best.value {
                best = refined;
            }
        }
        best
    }

    /// Projected gradient ascent on `sign · η̃` with Armijo backtracking; the
    /// step is preconditioned by `σ_k² / η̃`, which is a Newton step for an
    /// isolated Gaussian bump.
    fn ascend(&self, mut x: Vec<f64>, sign: f64, search: &SearchConfig) -> Maximizer {
        let domain = self.model.grid().domain();
        let sigma = self.model.psf().sigma();
        let tol = search.step_tol * domain.max_width();
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let (v, g) = self
                .model
                .adjoint_value_and_gradient(&self.dual, x)
                .expect("point and field match the model");
            (sign * v, g.into_iter().map(|gk| sign * gk).collect())
        };
        let (mut value, mut grad) = eval(&x);
        for _ in 0..search.max_ascent_steps {
            if value <= 0.0 {
                break;
            }
            let dir: Vec<f64> = grad.iter().zip(sigma).map(|(g, s)| s * s * g / value).collect();
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + t * di).collect();
                project_in_place(&mut trial, domain);
                let slope: f64 = grad
                    .iter()
                    .zip(trial.iter().zip(&x))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                let (v, g) = eval(&trial);
                if v >= value + 1e-4 * slope && v >= value {
                    accepted = Some((trial, v, g));
                    break;
                }
                t *= 0.5;
            }
            let Some((trial, v, g)) = accepted else { break };
            let step = trial.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            x = trial;
            value = v;
            grad = g;
            if step < tol {
                break;
            }
        }
        Maximizer {
            point: x,
            value: value.max(0.0),
        }
    }

    /// Sup-norm, support values and the `‖η‖_∞ ≤ 1 + tol` test.
    pub fn check_optimality(&self, mu: &DiracMeasure, tol: f64, search: &SearchConfig) -> Result<OptimalityReport> {
        let best = self.argmax(search);
        let support_values = mu.positions().map(|x| self.eval(x)).collect::<Result<Vec<_>>>()?;
        Ok(OptimalityReport {
            sup_norm: best.value,
            argmax: best.point,
            support_values,
            is_optimal: best.value <= 1.0 + tol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{Background, GaussianPsf};
    use crate::geometry::Domain;

    fn model(b: f64) -> ForwardModel {
        let grid = Grid::new(Domain::unit(1).unwrap(), vec![128]).unwrap();
        ForwardModel::new(GaussianPsf::isotropic(1, 0.07).unwrap(), grid, Background::Constant(b)).unwrap()
    }

    fn noiseless(model: &ForwardModel, mu: &DiracMeasure) -> FidelityModel {
        FidelityModel::kl(model.apply_forward(mu).unwrap()).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_certificate() {
        let m = model(0.01);
        let truth = DiracMeasure::new(1, vec![0.4], vec![1.0]).unwrap();
        let fid = noiseless(&m, &truth);
        let cert = build_certificate(&fid, &m, &truth, 1.0, true).unwrap();
        assert!(cert.dual_field().values().iter().all(|v| v.abs() < 1e-14));
        let best = cert.argmax(&SearchConfig::default());
        assert_eq!(best.value, 0.0);
        assert_eq!(cert.eval_grad(&[0.3]).unwrap(), vec![0.0]);
    }

    #[test]
    fn constant_zero_ties_pick_first_sample() {
        let m = model(0.01);
        let cert = Certificate::from_dual(&m, GridField::constant(m.grid().clone(), 0.0), 2.0, false).unwrap();
        let best = cert.argmax(&SearchConfig::default());
        assert_eq!(best.value, 0.0);
        assert_eq!(best.point, vec![0.5 / 512.0]);
    }

    #[test]
    fn empty_measure_kl_certificate_closed_form() {
        let m = model(0.01);
        let truth = DiracMeasure::new(1, vec![0.4], vec![1.0]).unwrap();
        let fid = noiseless(&m, &truth);
        let cert = build_certificate(&fid, &m, &DiracMeasure::empty(1), 1.0, true).unwrap();
        let y = fid.observation();
        let expected = y.map(|v| (v - 0.01) / 0.01);
        for (a, b) in cert.dual_field().values().iter().zip(expected.values()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn empty_measure_l2_certificate_is_adjoint_of_data() {
        let m = model(0.0);
        let truth = DiracMeasure::new(1, vec![0.6], vec![1.2]).unwrap();
        let y = m.apply_forward(&truth).unwrap();
        let fid = FidelityModel::l2(y.clone());
        let cert = build_certificate(&fid, &m, &DiracMeasure::empty(1), 1.0, false).unwrap();
        for x in [0.1, 0.55, 0.9] {
            let direct = m.adjoint_value(&y, &[x]).unwrap();
            assert!((cert.eval(&[x]).unwrap() - direct).abs() < 1e-10 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn lambda_scaling_is_exact() {
        let m = model(0.01);
        let truth = DiracMeasure::new(1, vec![0.3, 0.7], vec![1.0, 0.5]).unwrap();
        let fid = noiseless(&m, &truth);
        let one = build_certificate(&fid, &m, &DiracMeasure::empty(1), 1.0, true).unwrap();
        let lam = one.rescaled(7.3).unwrap();
        for x in [0.05, 0.3, 0.5, 0.71] {
            let a = one.eval(&[x]).unwrap();
            let b = lam.eval(&[x]).unwrap();
            assert!((b * 7.3 - a).abs() <= 1e-14 * a.abs().max(1.0));
        }
        let s = SearchConfig::default();
        assert_eq!(one.argmax(&s).point, lam.argmax(&s).point);
    }

    #[test]
    fn argmax_locates_single_spike() {
        let m = model(0.01);
        let z = 0.4123;
        let truth = DiracMeasure::new(1, vec![z], vec![1.0]).unwrap();
        let fid = noiseless(&m, &truth);
        for alpha in [true, false] {
            let cert = build_certificate(&fid, &m, &DiracMeasure::empty(1), 1.0, alpha).unwrap();
            let best = cert.argmax(&SearchConfig::default());
            assert!((best.point[0] - z).abs() < 1e-4, "{}", best.point[0]);
        }
    }

    #[test]
    fn symmetric_residual_gives_equal_maxima() {
        let m = model(0.0);
        let truth = DiracMeasure::new(1, vec![0.3, 0.7], vec![1.0, 1.0]).unwrap();
        let fid = FidelityModel::l2(m.apply_forward(&truth).unwrap());
        let cert = build_certificate(&fid, &m, &DiracMeasure::empty(1), 1.0, false).unwrap();
        let best = cert.argmax(&SearchConfig::default());
        let mirror = cert.eval(&[1.0 - best.point[0]]).unwrap();
        assert!((best.value - mirror).abs() <= 1e-10 * best.value);
    }

    #[test]
    fn argmax_dominates_coarse_grid_and_positive_part_holds() {
        let m = model(0.01);
        let truth = DiracMeasure::new(1, vec![0.2, 0.52, 0.81], vec![1.0, 0.7, 1.3]).unwrap();
        let fid = noiseless(&m, &truth);
        let guess = DiracMeasure::new(1, vec![0.5], vec![0.9]).unwrap();
        let search = SearchConfig::default();
        let cert = build_certificate(&fid, &m, &guess, 3.0, true).unwrap();
        let samples = cert.sample_on_search_grid(&search);
        assert!(samples.values().iter().all(|v| *v >= 0.0));
        assert!(cert.argmax(&search).value >= samples.max());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model(0.01);
        let truth = DiracMeasure::new(1, vec![0.2, 0.6], vec![1.0, 0.7]).unwrap();
        let fid = noiseless(&m, &truth);
        let cert = build_certificate(&fid, &m, &DiracMeasure::empty(1), 2.5, true).unwrap();
        for x in [0.15, 0.33, 0.58, 0.64] {
            let g = cert.eval_grad(&[x]).unwrap()[0];
            let h = 1e-6;
            let fd = (cert.eval(&[x + h]).unwrap() - cert.eval(&[x - h]).unwrap()) / (2.0 * h);
            assert!((fd - g).abs() <= 1e-5 * g.abs().max(1.0));
        }
    }

    #[test]
    fn optimality_checks() {
        let m = model(0.01);
        let truth = DiracMeasure::new(1, vec![0.45], vec![1.0]).unwrap();
        let fid = noiseless(&m, &truth);
        let search = SearchConfig::default();
        let empty = DiracMeasure::empty(1);
        let unit = build_certificate(&fid, &m, &empty, 1.0, true).unwrap();
        let sup = unit.sup_norm(&search);
        let lambda1 = 0.9 * sup;
        let report = unit
            .rescaled(lambda1)
            .unwrap()
            .check_optimality(&empty, 1e-2, &search)
            .unwrap();
        assert!((report.sup_norm - 1.0 / 0.9).abs() < 1e-12);
        assert!(!report.is_optimal);
        let report = unit
            .rescaled(sup)
            .unwrap()
            .check_optimality(&empty, 1e-2, &search)
            .unwrap();
        assert!(report.is_optimal);
        assert!(report.support_values.is_empty());
    }

    #[test]
    fn out_of_domain_evaluation_fails() {
        let m = model(0.01);
        let cert = Certificate::from_dual(&m, GridField::constant(m.grid().clone(), 1.0), 1.0, false).unwrap();
        assert!(matches!(cert.eval(&[1.5]), Err(Error::PositionOutOfDomain { .. })));
        assert!(Certificate::from_dual(&m, GridField::constant(m.grid().clone(), 1.0), 0.0, false).is_err());
    }
}
