//! Box domains, cell-centred sampling grids and finite Dirac measures.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lower, upper]` in 1, 2 or 3 dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if !(1..=3).contains(&lower.len()) {
            return Err(Error::InvalidConfig(format!(
                "domain dimension must be 1, 2 or 3, got {}",
                lower.len()
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidConfig(format!(
                "empty domain: lower {lower:?} upper {upper:?}"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    /// Largest side length of the box.
    pub fn max_width(&self) -> f64 {
        (0..self.dim()).map(|k| self.width(k)).fold(0.0, f64::max)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}

/// Componentwise clamp of `x` onto the box.
pub fn project_into_domain(x: &[f64], dom: &Domain) -> Vec<f64> {
    let mut out = x.to_vec();
    project_in_place(&mut out, dom);
    out
}

pub(crate) fn project_in_place(x: &mut [f64], dom: &Domain) {
    for (k, v) in x.iter_mut().enumerate() {
        *v = v.clamp(dom.lower[k], dom.upper[k]);
    }
}

/// Uniform cell-centred grid over a [`Domain`]; samples are stored row-major
/// (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    domain: Domain,
    shape: Vec<usize>,
    coords: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct GridSpec {
    domain: Domain,
    shape: Vec<usize>,
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        Grid::new(spec.domain, spec.shape)
    }
}

impl From<Grid> for GridSpec {
    fn from(grid: Grid) -> Self {
        GridSpec {
            domain: grid.domain,
            shape: grid.shape,
        }
    }
}

impl Grid {
    pub fn new(domain: Domain, shape: Vec<usize>) -> Result<Self> {
        if shape.len() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                found: shape.len(),
            });
        }
        if shape.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "grid shape must be positive, got {shape:?}"
            )));
        }
        let coords = shape
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let h = domain.width(k) / n as f64;
                (0..n).map(|i| domain.lower[k] + (i as f64 + 0.5) * h).collect()
            })
            .collect();
        Ok(Self { domain, shape, coords })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Sample count `|Ω|`.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, axis: usize) -> &[f64] {
        &self.coords[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.domain.width(axis) / self.shape[axis] as f64
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.shape[k];
            flat /= self.shape[k];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Physical position of the sample with the given flat index.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.coords[k][i])
            .collect()
    }
}

/// Finite weighted sum of Dirac masses `Σ a_i δ_{x_i}`.
///
/// Positions are stored flat (`dim` values per spike). Amplitudes are signed;
/// non-negativity is a solver constraint, not a type invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct DiracMeasure {
    dim: usize,
    positions: Vec<f64>,
    amplitudes: Vec<f64>,
}

impl DiracMeasure {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            positions: Vec::new(),
            amplitudes: Vec::new(),
        }
    }

    /// Builds a measure from flat positions. Exactly coincident spikes are
    /// merged by summing their amplitudes.
    pub fn new(dim: usize, positions: Vec<f64>, amplitudes: Vec<f64>) -> Result<Self> {
        if dim == 0 || positions.len() != dim * amplitudes.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * amplitudes.len(),
                found: positions.len(),
            });
        }
        let mut mu = Self::empty(dim);
        for (x, &a) in positions.chunks(dim).zip(&amplitudes) {
            mu.push_merging(x, a);
        }
        Ok(mu)
    }

    pub fn from_points(points: &[Vec<f64>], amplitudes: &[f64]) -> Result<Self> {
        let dim = points.first().map_or(1, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: points.iter().map(Vec::len).find(|&l| l != dim).unwrap_or(0),
            });
        }
        Self::new(dim, points.concat(), amplitudes.to_vec())
    }

    pub(crate) fn from_parts_unchecked(dim: usize, positions: Vec<f64>, amplitudes: Vec<f64>) -> Self {
        debug_assert_eq!(positions.len(), dim * amplitudes.len());
        Self {
            dim,
            positions,
            amplitudes,
        }
    }

    fn push_merging(&mut self, x: &[f64], a: f64) {
        if let Some(i) = self.positions.chunks(self.dim).position(|p| p == x) {
            self.amplitudes[i] += a;
        } else {
            self.positions.extend_from_slice(x);
            self.amplitudes.push(a);
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> impl Iterator<Item = &[f64]> {
        self.positions.chunks(self.dim)
    }

    pub fn positions_flat(&self) -> &[f64] {
        &self.positions
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    /// Total variation norm, i.e. the L1 norm of the amplitudes.
    pub fn tv_norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.abs()).sum()
    }

    /// Keeps spikes with `|a| > amp_tol`, preserving order.
    pub fn prune(&self, amp_tol: f64) -> Self {
        let mut out = Self::empty(self.dim);
        for (x, &a) in self.positions().zip(&self.amplitudes) {
            if a.abs() > amp_tol {
                out.positions.extend_from_slice(x);
                out.amplitudes.push(a);
            }
        }
        out
    }

    /// Returns a copy with one more spike; a spike at an existing position is
    /// merged into it.
    pub fn add_spike(&self, dom: &Domain, x: &[f64], a: f64) -> Result<Self> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        if !dom.contains(x) {
            return Err(Error::PositionOutOfDomain { position: x.to_vec() });
        }
        let mut out = self.clone();
        out.push_merging(x, a);
        Ok(out)
    }

    pub fn with_amplitudes(&self, amplitudes: Vec<f64>) -> Self {
        assert_eq!(amplitudes.len(), self.len());
        Self {
            dim: self.dim,
            positions: self.positions.clone(),
            amplitudes,
        }
    }

    pub fn in_domain(&self, dom: &Domain) -> bool {
        self.dim == dom.dim() && self.positions().all(|x| dom.contains(x))
    }

    /// Serializes as CSV with header `x0[,x1[,x2]],amplitude`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in 0..self.dim {
            let _ = write!(out, "x{k},");
        }
        out.push_str("amplitude\n");
        for (x, a) in self.positions().zip(&self.amplitudes) {
            for v in x {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{a}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MalformedHeader("empty spike file".into()))?;
        let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        let dim = cols.len().saturating_sub(1);
        let expected: Vec<String> = (0..dim)
            .map(|k| format!("x{k}"))
            .chain(std::iter::once("amplitude".to_string()))
            .collect();
        if !(1..=3).contains(&dim) || cols != expected {
            return Err(Error::MalformedHeader(header.to_string()));
        }
        let mut positions = Vec::new();
        let mut amplitudes = Vec::new();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let values: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidConfig(format!("spike row {}: {e}", row + 1)))?;
            if values.len() != dim + 1 {
                return Err(Error::DimensionMismatch {
                    expected: dim + 1,
                    found: values.len(),
                });
            }
            positions.extend_from_slice(&values[..dim]);
            amplitudes.push(values[dim]);
        }
        Self::new(dim, positions, amplitudes)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
