//! Gaussian-PSF forward operator on Dirac measures, its adjoint on grid
//! fields, and the analytic spatial derivatives used by the solvers.
//!
//! The PSF is separable, so every adjoint evaluation is a tensor contraction
//! of the field with one 1D kernel per axis. Quadrature weights are all one:
//! `⟨p, φ_x⟩ = Σ_j p_j φ(s_j − x)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DiracMeasure, Grid};

/// Real-valued field sampled on a [`Grid`] (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: Grid,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite field value at sample {bad}")));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let values = vec![value; grid.len()];
        Self { grid, values }
    }

    pub(crate) fn from_parts_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_same_grid(&self, other: &GridField) -> Result<()> {
        if self.grid == other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Plain sum `Σ_j u_j v_j`.
    pub fn dot(&self, other: &GridField) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Separable Gaussian point spread function with per-axis standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPsf {
    sigma: Vec<f64>,
}

impl GaussianPsf {
    pub fn new(sigma: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() || sigma.len() > 3 {
            return Err(Error::InvalidConfig(format!(
                "psf needs 1 to 3 widths, got {}",
                sigma.len()
            )));
        }
        if let Some(&s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::NonPositiveInput {
                name: "psf sigma",
                value: s,
            });
        }
        Ok(Self { sigma })
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self> {
        Self::new(vec![sigma; dim])
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `∏_k (2πσ_k²)^{-1/2} exp(−offset_k² / 2σ_k²)`.
    pub fn value(&self, offset: &[f64]) -> f64 {
        assert_eq!(offset.len(), self.dim(), "psf offset dimension");
        offset.iter().zip(&self.sigma).map(|(&t, &s)| gauss_1d(t, s)).product()
    }

    pub fn peak(&self) -> f64 {
        self.sigma.iter().map(|&s| gauss_1d(0.0, s)).product()
    }
}

#[inline]
fn gauss_1d(t: f64, sigma: f64) -> f64 {
    (-(t * t) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Lateral and axial Gaussian widths from optics parameters, using
/// `FWHM = 0.61 λ / NA` and `FWHM = 2.355 σ`. Returns `[σ_x, σ_y, σ_z]`.
pub fn calibrate_sigma_from_fwhm(wavelength_nm: f64, numerical_aperture: f64, z_factor: f64) -> Result<[f64; 3]> {
    for (name, value) in [
        ("wavelength", wavelength_nm),
        ("numerical aperture", numerical_aperture),
        ("axial factor", z_factor),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::NonPositiveInput { name, value });
        }
    }
    let fwhm = 0.61 * wavelength_nm / numerical_aperture;
    let lateral = fwhm / 2.355;
    Ok([lateral, lateral, z_factor * lateral])
}

/// Additive background of the acquisition model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Background {
    Constant(f64),
    Field(Vec<f64>),
}

/// `w = Φμ + b` for a Gaussian PSF sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    psf: GaussianPsf,
    grid: Grid,
    background: Background,
    cutoff: Option<f64>,
}

impl ForwardModel {
    pub fn new(psf: GaussianPsf, grid: Grid, background: Background) -> Result<Self> {
        if psf.dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                found: psf.dim(),
            });
        }
        match &background {
            Background::Constant(b) => {
                if !(*b >= 0.0 && b.is_finite()) {
                    return Err(Error::InvalidConfig(format!("background must be >= 0, got {b}")));
                }
            }
            Background::Field(values) => {
                if values.len() != grid.len() {
                    return Err(Error::ShapeMismatch {
                        expected: grid.len(),
                        found: values.len(),
                    });
                }
                if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(Error::InvalidConfig("background must be >= 0 everywhere".into()));
                }
            }
        }
        Ok(Self {
            psf,
            grid,
            background,
            cutoff: None,
        })
    }

    /// Truncates every 1D kernel beyond `n_sigma` standard deviations.
    pub fn with_cutoff(mut self, n_sigma: f64) -> Self {
        self.cutoff = Some(n_sigma);
        self
    }

    pub fn psf(&self) -> &GaussianPsf {
        &self.psf
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn background(&self) -> &Background {
        &self.background
    }

    pub fn background_at(&self, j: usize) -> f64 {
        match &self.background {
            Background::Constant(b) => *b,
            Background::Field(v) => v[j],
        }
    }

    pub fn min_background(&self) -> f64 {
        match &self.background {
            Background::Constant(b) => *b,
            Background::Field(v) => v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn background_field(&self) -> GridField {
        let values = (0..self.grid.len()).map(|j| self.background_at(j)).collect();
        GridField::from_parts_unchecked(self.grid.clone(), values)
    }

    /// Same model with a different background.
    pub fn with_background(&self, background: Background) -> Result<Self> {
        let mut m = Self::new(self.psf.clone(), self.grid.clone(), background)?;
        m.cutoff = self.cutoff;
        Ok(m)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn check_field(&self, p: &GridField) -> Result<()> {
        if p.grid() != &self.grid {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    /// 1D kernel `s ↦ g_σ(s − x)` over the samples of one axis.
    pub(crate) fn axis_kernel(&self, axis: usize, x: f64) -> Vec<f64> {
        let sigma = self.psf.sigma[axis];
        let reach = self.cutoff.map(|c| c * sigma);
        self.grid
            .coords(axis)
            .iter()
            .map(|&s| {
                let t = s - x;
                match reach {
                    Some(r) if t.abs() > r => 0.0,
                    _ => gauss_1d(t, sigma),
                }
            })
            .collect()
    }

    /// Derivative of the axis kernel with respect to the spike coordinate:
    /// `∂_x g_σ(s − x) = g_σ(s − x)·(s − x)/σ²`.
    fn axis_kernel_derivative(&self, axis: usize, x: f64, kernel: &[f64]) -> Vec<f64> {
        let s2 = self.psf.sigma[axis].powi(2);
        self.grid
            .coords(axis)
            .iter()
            .zip(kernel)
            .map(|(&s, &g)| g * (s - x) / s2)
            .collect()
    }

    /// `Φμ` without background.
    pub fn apply_operator(&self, mu: &DiracMeasure) -> Result<GridField> {
        if mu.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: mu.dim(),
            });
        }
        let mut values = vec![0.0; self.grid.len()];
        for (x, &a) in mu.positions().zip(mu.amplitudes()) {
            let kernels: Vec<Vec<f64>> = (0..self.dim()).map(|k| self.axis_kernel(k, x[k])).collect();
            accumulate_outer(&mut values, self.grid.shape(), &kernels, a);
        }
        Ok(GridField::from_parts_unchecked(self.grid.clone(), values))
    }

    /// `w = Φμ + b` sampled on the grid.
    pub fn apply_forward(&self, mu: &DiracMeasure) -> Result<GridField> {
        let mut w = self.apply_operator(mu)?;
        for (j, v) in w.values.iter_mut().enumerate() {
            *v += self.background_at(j);
        }
        Ok(w)
    }

    /// Sampled kernel column `φ(s_j − x)` for one position.
    pub(crate) fn kernel_column(&self, x: &[f64]) -> Vec<f64> {
        let kernels: Vec<Vec<f64>> = (0..self.dim()).map(|k| self.axis_kernel(k, x[k])).collect();
        let mut col = vec![0.0; self.grid.len()];
        accumulate_outer(&mut col, self.grid.shape(), &kernels, 1.0);
        col
    }

    /// `(Φ*p)(x) = Σ_j p_j φ(s_j − x)`.
    pub fn adjoint_value(&self, p: &GridField, x: &[f64]) -> Result<f64> {
        self.check_field(p)?;
        self.check_point(x)?;
        let kernels: Vec<Vec<f64>> = (0..self.dim()).map(|k| self.axis_kernel(k, x[k])).collect();
        let refs: Vec<&[f64]> = kernels.iter().map(Vec::as_slice).collect();
        Ok(contract(p.values(), self.grid.shape(), &refs))
    }

    /// Exact gradient of [`Self::adjoint_value`] with respect to `x`.
    pub fn adjoint_gradient(&self, p: &GridField, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.adjoint_value_and_gradient(p, x)?.1)
    }

    pub fn adjoint_value_and_gradient(&self, p: &GridField, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_field(p)?;
        self.check_point(x)?;
        let d = self.dim();
        let kernels: Vec<Vec<f64>> = (0..d).map(|k| self.axis_kernel(k, x[k])).collect();
        let derivs: Vec<Vec<f64>> = (0..d)
            .map(|k| self.axis_kernel_derivative(k, x[k], &kernels[k]))
            .collect();
        let mut refs: Vec<&[f64]> = kernels.iter().map(Vec::as_slice).collect();
        let value = contract(p.values(), self.grid.shape(), &refs);
        let grad = (0..d)
            .map(|k| {
                refs[k] = &derivs[k];
                let g = contract(p.values(), self.grid.shape(), &refs);
                refs[k] = &kernels[k];
                g
            })
            .collect();
        Ok((value, grad))
    }

    /// Gradient of `(a, x) ↦ ⟨g, Φ_x a⟩` with respect to every amplitude and
    /// every position coordinate (positions returned flat).
    pub fn forward_jacobian_products(&self, mu: &DiracMeasure, g: &GridField) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_field(g)?;
        if mu.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: mu.dim(),
            });
        }
        let mut amp_grad = Vec::with_capacity(mu.len());
        let mut pos_grad = Vec::with_capacity(mu.len() * self.dim());
        for (x, &a) in mu.positions().zip(mu.amplitudes()) {
            let (v, grad) = self.adjoint_value_and_gradient(g, x)?;
            amp_grad.push(v);
            pos_grad.extend(grad.into_iter().map(|gk| a * gk));
        }
        Ok((amp_grad, pos_grad))
    }

    /// Evaluates `Φ*p` on the tensor grid spanned by per-axis point lists;
    /// output is row-major over those points.
    pub fn adjoint_on_tensor_grid(&self, p: &GridField, axes: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_field(p)?;
        if axes.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: axes.len(),
            });
        }
        let mut shape = self.grid.shape().to_vec();
        let mut values = p.values().to_vec();
        for (k, pts) in axes.iter().enumerate() {
            let matrix: Vec<Vec<f64>> = pts.iter().map(|&t| self.axis_kernel(k, t)).collect();
            values = mode_product(&values, &shape, k, &matrix);
            shape[k] = pts.len();
        }
        Ok(values)
    }
}

/// `Σ_idx v[idx] ∏_k kernels[k][idx_k]` for a row-major tensor.
pub(crate) fn contract(values: &[f64], shape: &[usize], kernels: &[&[f64]]) -> f64 {
    let d = shape.len();
    let last = kernels[d - 1];
    let n_last = shape[d - 1];
    let prefix = outer_weights(&kernels[..d - 1]);
    values
        .chunks(n_last)
        .zip(&prefix)
        .filter(|(_, &w)| w != 0.0)
        .map(|(row, &w)| w * row.iter().zip(last).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// `values += scale · ⊗_k kernels[k]`.
fn accumulate_outer(values: &mut [f64], shape: &[usize], kernels: &[Vec<f64>], scale: f64) {
    let d = shape.len();
    let refs: Vec<&[f64]> = kernels[..d - 1].iter().map(Vec::as_slice).collect();
    let prefix = outer_weights(&refs);
    let last = &kernels[d - 1];
    for (row, &w) in values.chunks_mut(shape[d - 1]).zip(&prefix) {
        let w = w * scale;
        if w == 0.0 {
            continue;
        }
        for (v, &g) in row.iter_mut().zip(last) {
            *v += w * g;
        }
    }
}

/// Row-major outer product of the given vectors (`[1.0]` for none).
fn outer_weights(kernels: &[&[f64]]) -> Vec<f64> {
    kernels.iter().fold(vec![1.0], |acc, k| {
        acc.iter().flat_map(|&a| k.iter().map(move |&b| a * b)).collect()
    })
}

/// Mode-`axis` product of a row-major tensor with a `(m × n_axis)` matrix.
fn mode_product(values: &[f64], shape: &[usize], axis: usize, matrix: &[Vec<f64>]) -> Vec<f64> {
    let before: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let after: usize = shape[axis + 1..].iter().product();
    let m = matrix.len();
    let mut out = vec![0.0; before * m * after];
    for a in 0..before {
        let block = &values[a * n * after..(a + 1) * n * after];
        let out_block = &mut out[a * m * after..(a + 1) * m * after];
        for (r, row) in matrix.iter().enumerate() {
            let dst = &mut out_block[r * after..(r + 1) * after];
            for (i, &kv) in row.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let src = &block[i * after..(i + 1) * after];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += kv * s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Domain;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_1d(n: usize, sigma: f64, b: f64) -> ForwardModel {
        let grid = Grid::new(Domain::unit(1).unwrap(), vec![n]).unwrap();
        ForwardModel::new(GaussianPsf::isotropic(1, sigma).unwrap(), grid, Background::Constant(b)).unwrap()
    }

    fn model_nd(dim: usize) -> ForwardModel {
        let shape = [vec![37], vec![19, 23], vec![9, 11, 7]][dim - 1].clone();
        let sigma = [vec![0.07], vec![0.08, 0.06], vec![0.15, 0.12, 0.2]][dim - 1].clone();
        let grid = Grid::new(Domain::unit(dim).unwrap(), shape).unwrap();
        ForwardModel::new(GaussianPsf::new(sigma).unwrap(), grid, Background::Constant(0.0)).unwrap()
    }

    fn random_field(grid: &Grid, rng: &mut ChaCha8Rng) -> GridField {
        let v = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        GridField::new(grid.clone(), v).unwrap()
    }

    fn random_point(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(0.1..0.9)).collect()
    }

    #[test]
    fn psf_examples() {
        let p = GaussianPsf::isotropic(1, 0.07).unwrap();
        let expected = 1.0 / (0.07 * (2.0 * PI).sqrt());
        assert!((p.value(&[0.0]) - expected).abs() < 1e-12);
        assert!((p.value(&[0.0]) - 5.699175).abs() < 1e-6);
        let unit = GaussianPsf::isotropic(1, 1.0).unwrap();
        assert!((unit.value(&[1.0]) - 0.2419707245).abs() < 1e-9);
        let p3 = GaussianPsf::new(vec![200.0, 200.0, 400.0]).unwrap();
        let peak: f64 = [200.0f64, 200.0, 400.0]
            .iter()
            .map(|s| (2.0 * PI * s * s).powf(-0.5))
            .product();
        assert!((p3.value(&[0.0; 3]) - peak).abs() <= 1e-15 * peak.max(1e-300) + 1e-24);
        assert!(GaussianPsf::new(vec![0.0]).is_err());
    }

    #[test]
    fn forward_examples() {
        let m = model_1d(128, 0.07, 0.01);
        let w = m.apply_forward(&DiracMeasure::empty(1)).unwrap();
        assert!(w.values().iter().all(|&v| v == 0.01));

        let m0 = model_1d(128, 0.07, 0.0);
        let s = m0.grid().coords(0)[40];
        let mu = DiracMeasure::new(1, vec![s], vec![1.0]).unwrap();
        let w = m0.apply_forward(&mu).unwrap();
        assert!((w.values()[40] - 5.699175).abs() < 1e-6);
        assert_eq!(w.max(), w.values()[40]);
    }

    #[test]
    fn forward_is_linear() {
        let m = model_1d(64, 0.07, 0.3);
        let mu1 = DiracMeasure::new(1, vec![0.2, 0.6], vec![1.0, 0.4]).unwrap();
        let mu2 = DiracMeasure::new(1, vec![0.45], vec![2.0]).unwrap();
        let both = DiracMeasure::new(1, vec![0.2, 0.6, 0.45], vec![1.0, 0.4, 2.0]).unwrap();
        let w1 = m.apply_forward(&mu1).unwrap();
        let w2 = m.apply_forward(&mu2).unwrap();
        let w = m.apply_forward(&both).unwrap();
        for j in 0..64 {
            let lhs = w.values()[j] - 0.3;
            let rhs = (w1.values()[j] - 0.3) + (w2.values()[j] - 0.3);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_examples() {
        let m = model_1d(50, 0.07, 0.0);
        let zero = GridField::constant(m.grid().clone(), 0.0);
        assert_eq!(m.adjoint_value(&zero, &[0.3]).unwrap(), 0.0);
        assert_eq!(m.adjoint_gradient(&zero, &[0.3]).unwrap(), vec![0.0]);

        let mut v = vec![0.0; 50];
        v[17] = 1.0;
        let unit = GridField::new(m.grid().clone(), v).unwrap();
        let s = m.grid().coords(0)[17];
        assert!((m.adjoint_value(&unit, &[s]).unwrap() - m.psf().peak()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_field_has_zero_gradient_at_centre() {
        let m = model_1d(64, 0.07, 0.0);
        let v: Vec<f64> = m
            .grid()
            .coords(0)
            .iter()
            .map(|s| (-(s - 0.5f64).powi(2) * 30.0).exp())
            .collect();
        let p = GridField::new(m.grid().clone(), v).unwrap();
        assert!(m.adjoint_gradient(&p, &[0.5]).unwrap()[0].abs() < 1e-10);
    }

    #[test]
    fn adjoint_matches_forward_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in 1..=3 {
            let m = model_nd(dim);
            for _ in 0..10 {
                let p = random_field(m.grid(), &mut rng);
                let n = rng.random_range(1..5);
                let pos: Vec<f64> = (0..n).flat_map(|_| random_point(dim, &mut rng)).collect();
                let amps: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let mu = DiracMeasure::new(dim, pos, amps).unwrap();
                let lhs = m.apply_operator(&mu).unwrap().dot(&p).unwrap();
                let rhs: f64 = mu
                    .positions()
                    .zip(mu.amplitudes())
                    .map(|(x, a)| a * m.adjoint_value(&p, x).unwrap())
                    .sum();
                assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{dim}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in 1..=3 {
            let m = model_nd(dim);
            for _ in 0..20 {
                let p = random_field(m.grid(), &mut rng);
                let x = random_point(dim, &mut rng);
                let grad = m.adjoint_gradient(&p, &x).unwrap();
                let h = 1e-5;
                for k in 0..dim {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (m.adjoint_value(&p, &xp).unwrap() - m.adjoint_value(&p, &xm).unwrap()) / (2.0 * h);
                    let scale = grad.iter().map(|g| g.abs()).fold(1e-3, f64::max);
                    assert!((fd - grad[k]).abs() <= 1e-5 * scale, "{dim}/{k}: {fd} vs {}", grad[k]);
                }
            }
        }
    }

    #[test]
    fn jacobian_products_single_spike() {
        let m = model_1d(40, 0.07, 0.0);
        let x = 0.43;
        let mu = DiracMeasure::new(1, vec![x], vec![1.7]).unwrap();
        let mut v = vec![0.0; 40];
        v[18] = 1.0;
        let g = GridField::new(m.grid().clone(), v).unwrap();
        let (da, dx) = m.forward_jacobian_products(&mu, &g).unwrap();
        let s = m.grid().coords(0)[18];
        let psf = m.psf().value(&[s - x]);
        assert!((da[0] - psf).abs() < 1e-12);
        assert!((dx[0] - 1.7 * psf * (s - x) / 0.0049).abs() < 1e-9);

        let zero = GridField::constant(m.grid().clone(), 0.0);
        let (da, dx) = m.forward_jacobian_products(&mu, &zero).unwrap();
        assert_eq!((da, dx), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn tensor_grid_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in 1..=3 {
            let m = model_nd(dim);
            let p = random_field(m.grid(), &mut rng);
            let axes: Vec<Vec<f64>> = (0..dim)
                .map(|k| (0..4 + k).map(|i| 0.05 + 0.2 * i as f64).collect())
                .collect();
            let tensor = m.adjoint_on_tensor_grid(&p, &axes).unwrap();
            let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
            for (flat, &v) in tensor.iter().enumerate() {
                let mut rem = flat;
                let mut x = vec![0.0; dim];
                for k in (0..dim).rev() {
                    x[k] = axes[k][rem % shape[k]];
                    rem /= shape[k];
                }
                assert!((v - m.adjoint_value(&p, &x).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positivity_with_background() {
        let m = model_1d(64, 0.07, 0.01);
        let mu = DiracMeasure::new(1, vec![0.1, 0.9], vec![0.5, 2.0]).unwrap();
        assert!(m.apply_forward(&mu).unwrap().min() >= 0.01);
    }

    #[test]
    fn translation_covariance() {
        let m = model_1d(64, 0.05, 0.0);
        let h = m.grid().spacing(0);
        let s = m.grid().coords(0)[30];
        let argmax = |x: f64| {
            let w = m
                .apply_forward(&DiracMeasure::new(1, vec![x], vec![1.0]).unwrap())
                .unwrap();
            w.values()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(s), 30);
        assert_eq!(argmax(s + h), 31);
    }

    #[test]
    fn cutoff_error_is_tiny() {
        let exact = model_1d(128, 0.07, 0.0);
        let cut = exact.clone().with_cutoff(5.0);
        let mu = DiracMeasure::new(1, vec![0.37], vec![1.0]).unwrap();
        let a = exact.apply_forward(&mu).unwrap();
        let b = cut.apply_forward(&mu).unwrap();
        let peak = a.max();
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() < 1e-5 * peak);
        }
    }

    #[test]
    fn fwhm_calibration() {
        let [sx, sy, sz] = calibrate_sigma_from_fwhm(508.0, 1.49, 2.0).unwrap();
        assert!((sx - 88.31).abs() < 0.01 && sx == sy);
        assert!((sz - 2.0 * sx).abs() < 1e-12);
        let [dx, _, dz] = calibrate_sigma_from_fwhm(1016.0, 1.49, 2.0).unwrap();
        assert!((dx - 2.0 * sx).abs() < 1e-12 && (dz - 2.0 * sz).abs() < 1e-12);
        let [one, _, _] = calibrate_sigma_from_fwhm(2.355 * 2.0, 0.61, 1.0).unwrap();
        assert!((one - 2.0).abs() < 1e-12);
        assert!(calibrate_sigma_from_fwhm(-1.0, 1.0, 2.0).is_err());
    }
}
