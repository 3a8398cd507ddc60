//! Sliding Frank-Wolfe over `f(Φμ + b) + λ|μ|(Ω) + α ι_{≥0}(μ)`.
//!
//! Each outer iteration locates the certificate maximiser, stops if
//! `|η(x*)| ≤ 1 + tol`, otherwise inserts a spike there, re-estimates all
//! amplitudes with positions frozen, then jointly slides amplitudes and
//! positions, and finally drops vanishing spikes. Every step is monotone in
//! the objective.

use serde::{Deserialize, Serialize};

use crate::certificate::{build_certificate, SearchConfig};
use crate::error::{Error, Result};
use crate::fidelity::{FidelityKind, FidelityModel};
use crate::forward::{ForwardModel, GridField};
use crate::geometry::DiracMeasure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplitudeSolverConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for AmplitudeSolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlideSolverConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
}

impl Default for SlideSolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfwConfig {
    pub lambda: f64,
    /// Enforce non-negative amplitudes (`α = 1`).
    pub positive: bool,
    pub max_outer_iters: usize,
    pub optimality_tol: f64,
    pub amp_solver: AmplitudeSolverConfig,
    pub slide_solver: SlideSolverConfig,
    pub prune_tol: f64,
    /// Spikes closer than this many PSF widths are fused after sliding.
    pub merge_radius: f64,
    /// Slide only after insertions whose certificate value is below
    /// `boost_trigger`, plus once before returning.
    pub boosted: bool,
    pub boost_trigger: f64,
    pub search: SearchConfig,
}

impl Default for SfwConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            positive: true,
            max_outer_iters: 12,
            optimality_tol: 1e-2,
            amp_solver: AmplitudeSolverConfig::default(),
            slide_solver: SlideSolverConfig::default(),
            prune_tol: 1e-6,
            merge_radius: 1e-3,
            boosted: false,
            boost_trigger: 1.5,
            search: SearchConfig::default(),
        }
    }
}

impl SfwConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("optimality_tol", self.optimality_tol),
            ("amp_solver.grad_tol", self.amp_solver.grad_tol),
            ("slide_solver.grad_tol", self.slide_solver.grad_tol),
            ("slide_solver.armijo_c", self.slide_solver.armijo_c),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::NonPositiveInput { name, value });
            }
        }
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidConfig("max_outer_iters must be >= 1".into()));
        }
        if !(self.slide_solver.backtrack_factor > 0.0 && self.slide_solver.backtrack_factor < 1.0) {
            return Err(Error::InvalidConfig("backtrack_factor must lie in (0, 1)".into()));
        }
        if !(self.merge_radius >= 0.0) {
            return Err(Error::InvalidConfig("merge_radius must be >= 0".into()));
        }
        if !(self.prune_tol >= 0.0) {
            return Err(Error::InvalidConfig("prune_tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub k: usize,
    pub objective: f64,
    pub sup_eta: f64,
    pub n_spikes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub iters: Vec<TraceEntry>,
}

impl SolverTrace {
    pub fn objective_non_increasing(&self) -> bool {
        self.iters.windows(2).all(|w| w[1].objective <= w[0].objective)
    }

    pub fn last(&self) -> Option<&TraceEntry> {
        self.iters.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub measure: DiracMeasure,
    pub converged: bool,
    pub trace: SolverTrace,
    /// Number of insertions performed.
    pub iterations: usize,
    pub sliding_calls: usize,
}

impl SolveResult {
    /// `‖η(λ, μ)‖_∞` at the returned measure.
    pub fn final_sup_eta(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |e| e.sup_eta)
    }

    /// JSON trace `{iters:[{k, objective, sup_eta, n_spikes}], converged}`.
    pub fn trace_json(&self) -> serde_json::Value {
        serde_json::json!({
            "iters": self.trace.iters,
            "converged": self.converged,
        })
    }
}

/// `T_λ(a, x) = f(Φ_x a + b) + λ‖a‖₁ + α ι_{≥0}(a)` for a fixed data term.
#[derive(Debug, Clone, Copy)]
pub struct SpikeObjective<'a> {
    fid: &'a FidelityModel,
    model: &'a ForwardModel,
    lambda: f64,
    positive: bool,
}

impl<'a> SpikeObjective<'a> {
    pub fn new(fid: &'a FidelityModel, model: &'a ForwardModel, lambda: f64, positive: bool) -> Result<Self> {
        if fid.observation().grid() != model.grid() {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            fid,
            model,
            lambda,
            positive,
        })
    }

    fn prediction(&self, positions: &[f64], amplitudes: &[f64]) -> Vec<f64> {
        let d = self.model.dim();
        let mut w: Vec<f64> = (0..self.model.grid().len())
            .map(|j| self.model.background_at(j))
            .collect();
        let mu = DiracMeasure::from_parts_unchecked(d, positions.to_vec(), amplitudes.to_vec());
        if !mu.is_empty() {
            let phi = self.model.apply_operator(&mu).expect("dimension checked");
            for (wj, pj) in w.iter_mut().zip(phi.values()) {
                *wj += pj;
            }
        }
        w
    }

    fn value_parts(&self, positions: &[f64], amplitudes: &[f64]) -> f64 {
        if self.positive && amplitudes.iter().any(|a| *a < 0.0) {
            return f64::INFINITY;
        }
        let w = self.prediction(positions, amplitudes);
        self.fid.value_slice(&w) + self.lambda * amplitudes.iter().map(|a| a.abs()).sum::<f64>()
    }

    /// `T_λ(μ)`; `+∞` when infeasible.
    pub fn value(&self, mu: &DiracMeasure) -> f64 {
        self.value_parts(mu.positions_flat(), mu.amplitudes())
    }

    /// Gradient of the smooth part `f(Φ_x a + b)` in `(a, x)`.
    fn smooth_gradient_parts(&self, positions: &[f64], amplitudes: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = self.prediction(positions, amplitudes);
        let g = self.fid.gradient_slice(&w)?;
        let g = GridField::from_parts_unchecked(self.model.grid().clone(), g);
        let mu = DiracMeasure::from_parts_unchecked(self.model.dim(), positions.to_vec(), amplitudes.to_vec());
        self.model.forward_jacobian_products(&mu, &g)
    }

    /// Gradient of `T_λ` in `(a, x)` away from `a_i = 0`: the amplitude part
    /// carries `λ sign(a_i)`. Positions are returned flat.
    pub fn gradient(&self, mu: &DiracMeasure) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mut ga, gx) = self.smooth_gradient_parts(mu.positions_flat(), mu.amplitudes())?;
        for (g, a) in ga.iter_mut().zip(mu.amplitudes()) {
            *g += self.lambda * a.signum();
        }
        Ok((ga, gx))
    }
}

fn prox_l1(v: f64, threshold: f64, positive: bool) -> f64 {
    if positive {
        (v - threshold).max(0.0)
    } else {
        v.signum() * (v.abs() - threshold).max(0.0)
    }
}

/// Sup-norm of the minimal-norm element of the subdifferential (projected
/// gradient when `positive`).
fn amplitude_stationarity(a: &[f64], smooth_grad: &[f64], lambda: f64, positive: bool) -> f64 {
    a.iter()
        .zip(smooth_grad)
        .map(|(&a, &g)| {
            if positive {
                if a > 0.0 {
                    (g + lambda).abs()
                } else {
                    (-(g + lambda)).max(0.0)
                }
            } else if a != 0.0 {
                (g + lambda * a.signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Convex amplitude re-estimation with frozen positions (`positions` flat).
///
/// L2 runs monotone FISTA with step `1/L` (`L` from power iteration on the
/// Gram matrix); KL runs proximal gradient with Barzilai-Borwein trial steps
/// and backtracking. The returned amplitudes never have a larger objective
/// than the (projected) warm start.
pub fn amplitude_step(
    fid: &FidelityModel,
    model: &ForwardModel,
    positions: &[f64],
    lambda: f64,
    positive: bool,
    cfg: &AmplitudeSolverConfig,
    warm_start: &[f64],
) -> Result<Vec<f64>> {
    let d = model.dim();
    if positions.len() != d * warm_start.len() {
        return Err(Error::DimensionMismatch {
            expected: d * warm_start.len(),
            found: positions.len(),
        });
    }
    if let Some(x) = positions.chunks(d).find(|x| !model.grid().domain().contains(x)) {
        return Err(Error::PositionOutOfDomain { position: x.to_vec() });
    }
    let columns: Vec<Vec<f64>> = positions.chunks(d).map(|x| model.kernel_column(x)).collect();
    let background: Vec<f64> = (0..model.grid().len()).map(|j| model.background_at(j)).collect();
    let mut a: Vec<f64> = warm_start
        .iter()
        .map(|&v| if positive { v.max(0.0) } else { v })
        .collect();
    if a.is_empty() {
        return Ok(a);
    }
    match fid.kind() {
        FidelityKind::L2 => Ok(fista_l2(fid, &columns, &background, lambda, positive, cfg, a)),
        FidelityKind::Kl => {
            let objective = |a: &[f64]| -> f64 {
                if positive && a.iter().any(|v| *v < 0.0) {
                    return f64::INFINITY;
                }
                let w = predict(&columns, &background, a);
                fid.value_slice(&w) + lambda * a.iter().map(|v| v.abs()).sum::<f64>()
            };
            let gradient = |a: &[f64]| -> Option<Vec<f64>> {
                let w = predict(&columns, &background, a);
                let g = fid.gradient_slice(&w).ok()?;
                Some(columns.iter().map(|c| dot(c, &g)).collect())
            };
            if !objective(&a).is_finite() {
                // infeasible warm start (signed amplitudes only): restart from zero
                a.iter_mut().for_each(|v| *v = 0.0);
                if !objective(&a).is_finite() {
                    return Err(Error::NonPositivePrediction {
                        index: 0,
                        value: model.min_background(),
                    });
                }
            }
            Ok(proximal_bb(objective, gradient, lambda, positive, cfg, a))
        }
    }
}

fn predict(columns: &[Vec<f64>], background: &[f64], a: &[f64]) -> Vec<f64> {
    let mut w = background.to_vec();
    for (col, &ai) in columns.iter().zip(a) {
        if ai != 0.0 {
            for (wj, cj) in w.iter_mut().zip(col) {
                *wj += ai * cj;
            }
        }
    }
    w
}

fn fista_l2(
    fid: &FidelityModel,
    columns: &[Vec<f64>],
    background: &[f64],
    lambda: f64,
    positive: bool,
    cfg: &AmplitudeSolverConfig,
    a0: Vec<f64>,
) -> Vec<f64> {
    let n = columns.len();
    let y = fid.observation().values();
    let gram: Vec<Vec<f64>> = columns
        .iter()
        .map(|ci| columns.iter().map(|cj| dot(ci, cj)).collect())
        .collect();
    let rhs: Vec<f64> = columns
        .iter()
        .map(|c| {
            c.iter()
                .zip(y.iter().zip(background))
                .map(|(ci, (yj, bj))| ci * (yj - bj))
                .sum()
        })
        .collect();
    let grad = |a: &[f64]| -> Vec<f64> { (0..n).map(|i| dot(&gram[i], a) - rhs[i]).collect() };
    // exact objective up to the constant ½‖y − b‖²
    let objective = |a: &[f64]| -> f64 {
        let ga: Vec<f64> = (0..n).map(|i| dot(&gram[i], a)).collect();
        0.5 * dot(a, &ga) - dot(&rhs, a) + lambda * a.iter().map(|v| v.abs()).sum::<f64>()
    };
    let lipschitz = power_iteration(&gram) * 1.01;
    if !(lipschitz > 0.0) {
        return a0;
    }
    let step = 1.0 / lipschitz;

    let mut x = a0;
    let mut fx = objective(&x);
    let mut yk = x.clone();
    let mut t = 1.0f64;
    for _ in 0..cfg.max_iters {
        if amplitude_stationarity(&x, &grad(&x), lambda, positive) <= cfg.grad_tol {
            break;
        }
        let gy = grad(&yk);
        let z: Vec<f64> = yk
            .iter()
            .zip(&gy)
            .map(|(v, g)| prox_l1(v - step * g, step * lambda, positive))
            .collect();
        let fz = objective(&z);
        let x_prev = x.clone();
        if fz <= fx {
            x = z.clone();
            fx = fz;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        yk = (0..n)
            .map(|i| x[i] + (t / t_next) * (z[i] - x[i]) + ((t - 1.0) / t_next) * (x[i] - x_prev[i]))
            .collect();
        t = t_next;
    }
    x
}

fn power_iteration(matrix: &[Vec<f64>]) -> f64 {
    let n = matrix.len();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut estimate = 0.0;
    for _ in 0..200 {
        let mv: Vec<f64> = matrix.iter().map(|row| dot(row, &v)).collect();
        let norm = dot(&mv, &mv).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = mv.into_iter().map(|x| x / norm).collect();
        if (next - estimate).abs() <= 1e-10 * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Monotone proximal gradient on `F = smooth + λ‖·‖₁ (+ι)` where `objective`
/// returns the full `F` and `gradient` the smooth part's gradient.
fn proximal_bb(
    objective: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Option<Vec<f64>>,
    lambda: f64,
    positive: bool,
    cfg: &AmplitudeSolverConfig,
    mut a: Vec<f64>,
) -> Vec<f64> {
    const SUFFICIENT: f64 = 1e-4;
    let mut fa = objective(&a);
    let Some(mut g) = gradient(&a) else { return a };
    let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut t = 1.0 / gmax.max(1e-12);
    for _ in 0..cfg.max_iters {
        if amplitude_stationarity(&a, &g, lambda, positive) <= cfg.grad_tol {
            break;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = a
                .iter()
                .zip(&g)
                .map(|(v, gi)| prox_l1(v - t * gi, t * lambda, positive))
                .collect();
            let step2: f64 = trial.iter().zip(&a).map(|(u, v)| (u - v) * (u - v)).sum();
            if step2 == 0.0 {
                break;
            }
            let ft = objective(&trial);
            if ft <= fa - SUFFICIENT / t * step2 {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((next, fnext)) = accepted else { break };
        let Some(gnext) = gradient(&next) else { break };
        let s: Vec<f64> = next.iter().zip(&a).map(|(u, v)| u - v).collect();
        let r: Vec<f64> = gnext.iter().zip(&g).map(|(u, v)| u - v).collect();
        let sr = dot(&s, &r);
        t = if sr > 0.0 { dot(&s, &s) / sr } else { t * 2.0 };
        t = t.clamp(1e-30, 1e30);
        a = next;
        fa = fnext;
        g = gnext;
    }
    a
}

/// Joint non-convex descent on amplitudes and positions with projected
/// (proximal) gradient steps, Barzilai-Borwein trial steps and Armijo
/// backtracking. Positions are rescaled by the PSF widths and amplitudes by
/// their mean magnitude.
pub fn sliding_step(
    fid: &FidelityModel,
    model: &ForwardModel,
    mu: &DiracMeasure,
    lambda: f64,
    positive: bool,
    cfg: &SlideSolverConfig,
) -> Result<DiracMeasure> {
    let obj = SpikeObjective::new(fid, model, lambda, positive)?;
    let n = mu.len();
    if n == 0 {
        return Ok(mu.clone());
    }
    let d = model.dim();
    let domain = model.grid().domain();
    let sigma = model.psf().sigma();
    let amp_scale = {
        let nz: Vec<f64> = mu.amplitudes().iter().map(|a| a.abs()).filter(|a| *a > 0.0).collect();
        if nz.is_empty() {
            1.0
        } else {
            nz.iter().sum::<f64>() / nz.len() as f64
        }
    };
    let pos_scale: Vec<f64> = (0..n * d).map(|i| sigma[i % d]).collect();

    let mut a = mu.amplitudes().to_vec();
    let mut x = mu.positions_flat().to_vec();
    let mut f = obj.value_parts(&x, &a);
    if !f.is_finite() {
        return Ok(mu.clone());
    }
    let (mut ga, mut gx) = obj.smooth_gradient_parts(&x, &a)?;

    let stationarity = |a: &[f64], x: &[f64], ga: &[f64], gx: &[f64]| -> f64 {
        let amp = amp_scale * amplitude_stationarity(a, ga, lambda, positive);
        let pos = x
            .iter()
            .zip(gx)
            .enumerate()
            .map(|(i, (&xi, &g))| {
                let k = i % d;
                let blocked = (xi <= domain.lower()[k] && g > 0.0) || (xi >= domain.upper()[k] && g < 0.0);
                if blocked {
                    0.0
                } else {
                    pos_scale[i] * g.abs()
                }
            })
            .fold(0.0, f64::max);
        amp.max(pos)
    };

    let scaled_gmax = {
        let ma = ga.iter().map(|g| (amp_scale * g).abs()).fold(0.0, f64::max);
        let mx = gx
            .iter()
            .zip(&pos_scale)
            .map(|(g, s)| (s * g).abs())
            .fold(0.0, f64::max);
        ma.max(mx)
    };
    let mut t = 0.1 / scaled_gmax.max(1e-12);

    for _ in 0..cfg.max_iters {
        if stationarity(&a, &x, &ga, &gx) <= cfg.grad_tol {
            break;
        }
        let mut accepted = None;
        for _ in 0..60 {
            let a_new: Vec<f64> = a
                .iter()
                .zip(&ga)
                .map(|(ai, gi)| {
                    let s2 = amp_scale * amp_scale * t;
                    prox_l1(ai - s2 * gi, s2 * lambda, positive)
                })
                .collect();
            let x_new: Vec<f64> = x
                .iter()
                .zip(&gx)
                .enumerate()
                .map(|(i, (xi, gi))| {
                    let k = i % d;
                    (xi - t * pos_scale[i] * pos_scale[i] * gi).clamp(domain.lower()[k], domain.upper()[k])
                })
                .collect();
            let step2: f64 = a_new
                .iter()
                .zip(&a)
                .map(|(u, v)| ((u - v) / amp_scale).powi(2))
                .chain(
                    x_new
                        .iter()
                        .zip(&x)
                        .zip(&pos_scale)
                        .map(|((u, v), s)| ((u - v) / s).powi(2)),
                )
                .sum();
            if step2 == 0.0 {
                break;
            }
            let f_new = obj.value_parts(&x_new, &a_new);
            if f_new <= f - cfg.armijo_c / t * step2 {
                accepted = Some((a_new, x_new, f_new, step2));
                break;
            }
            t *= cfg.backtrack_factor;
        }
        let Some((a_new, x_new, f_new, _)) = accepted else {
            break;
        };
        let (ga_new, gx_new) = obj.smooth_gradient_parts(&x_new, &a_new)?;
        // Barzilai-Borwein step in scaled variables
        let mut ss = 0.0;
        let mut sr = 0.0;
        for i in 0..n {
            let s = (a_new[i] - a[i]) / amp_scale;
            let r = (ga_new[i] - ga[i]) * amp_scale;
            ss += s * s;
            sr += s * r;
        }
        for i in 0..n * d {
            let s = (x_new[i] - x[i]) / pos_scale[i];
            let r = (gx_new[i] - gx[i]) * pos_scale[i];
            ss += s * s;
            sr += s * r;
        }
        t = if sr > 0.0 { ss / sr } else { t * 2.0 };
        t = t.clamp(1e-30, 1e30);
        a = a_new;
        x = x_new;
        f = f_new;
        ga = ga_new;
        gx = gx_new;
    }
    DiracMeasure::new(d, x, a)
}

/// Sliding Frank-Wolfe.
pub fn sfw_solve(
    fid: &FidelityModel,
    model: &ForwardModel,
    cfg: &SfwConfig,
    init: &DiracMeasure,
) -> Result<SolveResult> {
    cfg.validate()?;
    if fid.kind() == FidelityKind::Kl && !(model.min_background() > 0.0) {
        return Err(Error::InvalidConfig(
            "the KL model needs a strictly positive background".into(),
        ));
    }
    if init.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: init.dim(),
        });
    }
    if !init.in_domain(model.grid().domain()) {
        return Err(Error::InvalidConfig("initial measure leaves the domain".into()));
    }
    if cfg.positive && init.amplitudes().iter().any(|a| *a < 0.0) {
        return Err(Error::InvalidConfig(
            "initial amplitudes must be non-negative under the positivity constraint".into(),
        ));
    }
    let obj = SpikeObjective::new(fid, model, cfg.lambda, cfg.positive)?;
    let domain = model.grid().domain();

    let mut mu = init.clone();
    let mut trace = SolverTrace::default();
    let mut converged = false;
    let mut iterations = 0;
    let mut sliding_calls = 0;
    let mut slide_pending = false;

    loop {
        let cert = build_certificate(fid, model, &mu, cfg.lambda, cfg.positive)?;
        let best = cert.argmax(&cfg.search);
        trace.iters.push(TraceEntry {
            k: trace.iters.len(),
            objective: obj.value(&mu),
            sup_eta: best.value,
            n_spikes: mu.len(),
        });
        if best.value <= 1.0 + cfg.optimality_tol {
            converged = true;
            break;
        }
        if iterations == cfg.max_outer_iters {
            break;
        }
        iterations += 1;

        let grown = mu.add_spike(domain, &best.point, 0.0)?;
        let warm: Vec<f64> = grown.amplitudes().to_vec();
        let amps = amplitude_step(
            fid,
            model,
            grown.positions_flat(),
            cfg.lambda,
            cfg.positive,
            &cfg.amp_solver,
            &warm,
        )?;
        let mut next = grown.with_amplitudes(amps);

        if !cfg.boosted || best.value < cfg.boost_trigger {
            next = sliding_step(fid, model, &next, cfg.lambda, cfg.positive, &cfg.slide_solver)?;
            sliding_calls += 1;
            slide_pending = false;
        } else {
            slide_pending = true;
        }
        mu = simplify(fid, model, cfg, &obj, next)?;
    }

    if cfg.boosted && slide_pending {
        let slid = sliding_step(fid, model, &mu, cfg.lambda, cfg.positive, &cfg.slide_solver)?;
        sliding_calls += 1;
        mu = simplify(fid, model, cfg, &obj, slid)?;
        let cert = build_certificate(fid, model, &mu, cfg.lambda, cfg.positive)?;
        let best = cert.argmax(&cfg.search);
        converged = best.value <= 1.0 + cfg.optimality_tol;
        trace.iters.push(TraceEntry {
            k: trace.iters.len(),
            objective: obj.value(&mu),
            sup_eta: best.value,
            n_spikes: mu.len(),
        });
    }

    Ok(SolveResult {
        measure: mu,
        converged,
        trace,
        iterations,
        sliding_calls,
    })
}

/// Boosted variant: identical to [`sfw_solve`] with `boosted` forced on.
pub fn boosted_sfw_solve(
    fid: &FidelityModel,
    model: &ForwardModel,
    cfg: &SfwConfig,
    init: &DiracMeasure,
) -> Result<SolveResult> {
    let cfg = SfwConfig {
        boosted: true,
        ..cfg.clone()
    };
    sfw_solve(fid, model, &cfg, init)
}

/// Fuses near-coincident spikes, then prunes; each change is kept only if
/// the objective does not go up.
fn simplify(
    fid: &FidelityModel,
    model: &ForwardModel,
    cfg: &SfwConfig,
    obj: &SpikeObjective<'_>,
    mu: DiracMeasure,
) -> Result<DiracMeasure> {
    let mut mu = prune_monotone(obj, mu, cfg.prune_tol);
    if let Some(fused) = fuse_close(&mu, model.psf().sigma(), cfg.merge_radius) {
        let amps = amplitude_step(
            fid,
            model,
            fused.positions_flat(),
            cfg.lambda,
            cfg.positive,
            &cfg.amp_solver,
            fused.amplitudes(),
        )?;
        let fused = fused.with_amplitudes(amps);
        if obj.value(&fused) <= obj.value(&mu) {
            mu = prune_monotone(obj, fused, cfg.prune_tol);
        }
    }
    Ok(mu)
}

/// Greedily fuses spikes whose scaled distance is below `radius` into their
/// amplitude-weighted barycentre. `None` if nothing is close.
fn fuse_close(mu: &DiracMeasure, sigma: &[f64], radius: f64) -> Option<DiracMeasure> {
    let d = mu.dim();
    let n = mu.len();
    let scaled_dist = |i: usize, j: usize| -> f64 {
        let (p, q) = (mu.position(i), mu.position(j));
        (0..d).map(|k| ((p[k] - q[k]) / sigma[k]).powi(2)).sum::<f64>().sqrt()
    };
    let mut group: Vec<usize> = (0..n).collect();
    let mut any = false;
    for i in 0..n {
        if group[i] != i {
            continue;
        }
        for j in i + 1..n {
            if group[j] == j && scaled_dist(i, j) < radius {
                group[j] = i;
                any = true;
            }
        }
    }
    if !any {
        return None;
    }
    let mut positions = Vec::new();
    let mut amplitudes = Vec::new();
    for i in (0..n).filter(|&i| group[i] == i) {
        let members: Vec<usize> = (0..n).filter(|&j| group[j] == i).collect();
        let total: f64 = members.iter().map(|&j| mu.amplitudes()[j]).sum();
        let weight: f64 = members.iter().map(|&j| mu.amplitudes()[j].abs()).sum();
        for k in 0..d {
            let x = if weight > 0.0 {
                members
                    .iter()
                    .map(|&j| mu.amplitudes()[j].abs() * mu.position(j)[k])
                    .sum::<f64>()
                    / weight
            } else {
                mu.position(i)[k]
            };
            positions.push(x);
        }
        amplitudes.push(total);
    }
    DiracMeasure::new(d, positions, amplitudes).ok()
}

/// Drops spikes below `tol` unless that would raise the objective, in which
/// case only exact zeros go.
fn prune_monotone(obj: &SpikeObjective<'_>, mu: DiracMeasure, tol: f64) -> DiracMeasure {
    let exact = mu.prune(0.0);
    let pruned = exact.prune(tol);
    if pruned.len() == exact.len() || obj.value(&pruned) <= obj.value(&exact) {
        pruned
    } else {
        exact
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{Background, GaussianPsf};
    use crate::geometry::{Domain, Grid};

    fn model(b: f64) -> ForwardModel {
        let grid = Grid::new(Domain::unit(1).unwrap(), vec![128]).unwrap();
        ForwardModel::new(GaussianPsf::isotropic(1, 0.07).unwrap(), grid, Background::Constant(b)).unwrap()
    }

    fn spike(x: f64, a: f64) -> DiracMeasure {
        DiracMeasure::new(1, vec![x], vec![a]).unwrap()
    }

    #[test]
    fn amplitude_step_recovers_exact_l2_amplitude() {
        let m = model(0.01);
        let s = m.grid().coords(0)[50];
        let fid = FidelityModel::l2(m.apply_forward(&spike(s, 1.3)).unwrap());
        let cfg = AmplitudeSolverConfig::default();
        let a = amplitude_step(&fid, &m, &[s], 1e-12, true, &cfg, &[0.0]).unwrap();
        assert!((a[0] - 1.3).abs() < 1e-6, "{}", a[0]);
    }

    #[test]
    fn amplitude_step_recovers_exact_kl_amplitude() {
        let m = model(0.01);
        let s = m.grid().coords(0)[70];
        let fid = FidelityModel::kl(m.apply_forward(&spike(s, 0.8)).unwrap()).unwrap();
        let cfg = AmplitudeSolverConfig::default();
        let a = amplitude_step(&fid, &m, &[s], 1e-9, true, &cfg, &[0.0]).unwrap();
        assert!((a[0] - 0.8).abs() < 1e-5, "{}", a[0]);
    }

    #[test]
    fn large_lambda_zeroes_amplitudes() {
        let m = model(0.01);
        let truth = spike(0.4, 1.0);
        let search = SearchConfig::default();
        for kind in [FidelityKind::L2, FidelityKind::Kl] {
            let fid = FidelityModel::new(kind, m.apply_forward(&truth).unwrap()).unwrap();
            let sup = build_certificate(&fid, &m, &DiracMeasure::empty(1), 1.0, true)
                .unwrap()
                .sup_norm(&search);
            let a = amplitude_step(
                &fid,
                &m,
                &[0.4],
                1.01 * sup,
                true,
                &AmplitudeSolverConfig::default(),
                &[0.5],
            )
            .unwrap();
            assert_eq!(a, vec![0.0], "{kind}");
        }
    }

    #[test]
    fn amplitude_step_keeps_optimal_warm_start() {
        let m = model(0.01);
        let truth = spike(0.33, 1.0);
        let fid = FidelityModel::kl(m.apply_forward(&truth).unwrap()).unwrap();
        let cfg = AmplitudeSolverConfig::default();
        let first = amplitude_step(&fid, &m, &[0.33], 0.5, true, &cfg, &[0.2]).unwrap();
        let again = amplitude_step(&fid, &m, &[0.33], 0.5, true, &cfg, &first).unwrap();
        assert!((again[0] - first[0]).abs() < 1e-8);
    }

    #[test]
    fn sliding_moves_spike_onto_truth() {
        let m = model(0.01);
        let z = 0.4321;
        let truth = spike(z, 1.0);
        let h = m.grid().spacing(0);
        for kind in [FidelityKind::L2, FidelityKind::Kl] {
            let fid = FidelityModel::new(kind, m.apply_forward(&truth).unwrap()).unwrap();
            let start = spike(z + 0.5 * h, 0.9);
            let obj = SpikeObjective::new(&fid, &m, 1e-3, true).unwrap();
            let out = sliding_step(&fid, &m, &start, 1e-3, true, &SlideSolverConfig::default()).unwrap();
            assert!(obj.value(&out) <= obj.value(&start));
            let err = (out.position(0)[0] - z).abs();
            assert!(err * 10.0 <= 0.5 * h, "{kind}: {err}");
        }
    }

    #[test]
    fn sliding_objective_gradient_matches_finite_differences() {
        let m = model(0.01);
        let truth = DiracMeasure::new(1, vec![0.3, 0.62], vec![1.0, 0.8]).unwrap();
        let fid = FidelityModel::kl(m.apply_forward(&truth).unwrap()).unwrap();
        let obj = SpikeObjective::new(&fid, &m, 0.7, true).unwrap();
        let mu = DiracMeasure::new(1, vec![0.28, 0.65], vec![0.9, 1.1]).unwrap();
        let (ga, gx) = obj.gradient(&mu).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let bump = |da: f64, dx: f64| {
                let mut a = mu.amplitudes().to_vec();
                let mut x = mu.positions_flat().to_vec();
                a[i] += da;
                x[i] += dx;
                obj.value(&DiracMeasure::new(1, x, a).unwrap())
            };
            let fa = (bump(h, 0.0) - bump(-h, 0.0)) / (2.0 * h);
            let fx = (bump(0.0, h) - bump(0.0, -h)) / (2.0 * h);
            assert!((fa - ga[i]).abs() <= 1e-5 * ga[i].abs().max(1.0));
            assert!((fx - gx[i]).abs() <= 1e-5 * gx[i].abs().max(1.0));
        }
    }

    #[test]
    fn sliding_keeps_stationary_input() {
        let m = model(0.01);
        let truth = spike(0.5, 1.0);
        let fid = FidelityModel::kl(m.apply_forward(&truth).unwrap()).unwrap();
        let cfg = SlideSolverConfig::default();
        let once = sliding_step(&fid, &m, &spike(0.51, 0.9), 0.01, true, &cfg).unwrap();
        let twice = sliding_step(&fid, &m, &once, 0.01, true, &cfg).unwrap();
        assert!((once.position(0)[0] - twice.position(0)[0]).abs() < 1e-7);
        assert!((once.amplitudes()[0] - twice.amplitudes()[0]).abs() < 1e-7);
    }

    #[test]
    fn noiseless_single_spike_is_recovered() {
        let m = model(0.01);
        let z = 0.3719;
        let truth = spike(z, 1.1);
        for kind in [FidelityKind::L2, FidelityKind::Kl] {
            let fid = FidelityModel::new(kind, m.apply_forward(&truth).unwrap()).unwrap();
            let cfg = SfwConfig {
                lambda: 1e-3,
                max_outer_iters: 10,
                ..SfwConfig::default()
            };
            let res = sfw_solve(&fid, &m, &cfg, &DiracMeasure::empty(1)).unwrap();
            assert!(res.converged, "{kind}");
            assert!(res.iterations <= 3, "{kind}: {}", res.iterations);
            assert_eq!(res.measure.len(), 1, "{kind}");
            assert!((res.measure.position(0)[0] - z).abs() < 1e-3);
            assert!((res.measure.amplitudes()[0] - 1.1).abs() < 1.1e-2);
            assert!(res.trace.objective_non_increasing());
        }
    }

    #[test]
    fn large_lambda_returns_init() {
        let m = model(0.01);
        let truth = spike(0.6, 1.0);
        let fid = FidelityModel::kl(m.apply_forward(&truth).unwrap()).unwrap();
        let init = spike(0.2, 0.3);
        let sup = build_certificate(&fid, &m, &init, 1.0, true)
            .unwrap()
            .sup_norm(&SearchConfig::default());
        let cfg = SfwConfig {
            lambda: sup,
            ..SfwConfig::default()
        };
        let res = sfw_solve(&fid, &m, &cfg, &init).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.measure, init);
    }

    #[test]
    fn kl_without_background_is_rejected() {
        let m = model(0.0);
        let fid = FidelityModel::kl(GridField::constant(m.grid().clone(), 1.0)).unwrap();
        assert!(sfw_solve(&fid, &m, &SfwConfig::default(), &DiracMeasure::empty(1)).is_err());
    }

    #[test]
    fn boosted_matches_plain_on_noiseless_spike() {
        let m = model(0.01);
        let truth = spike(0.55, 1.0);
        let fid = FidelityModel::kl(m.apply_forward(&truth).unwrap()).unwrap();
        let cfg = SfwConfig {
            lambda: 1e-3,
            ..SfwConfig::default()
        };
        let plain = sfw_solve(&fid, &m, &cfg, &DiracMeasure::empty(1)).unwrap();
        let boosted = boosted_sfw_solve(&fid, &m, &cfg, &DiracMeasure::empty(1)).unwrap();
        assert_eq!(plain.measure.len(), boosted.measure.len());
        assert!(boosted.sliding_calls <= plain.sliding_calls);
        assert!(boosted.trace.objective_non_increasing());
    }
}
