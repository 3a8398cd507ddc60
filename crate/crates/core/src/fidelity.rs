//! Data terms: squared L2 distance and the (extended) Kullback-Leibler
//! divergence, both evaluated on predictions `w = Φμ + b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::GridField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityKind {
    L2,
    Kl,
}

impl std::str::FromStr for FidelityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Self::L2),
            "kl" => Ok(Self::Kl),
            other => Err(Error::InvalidConfig(format!(
                "unknown model `{other}` (expected l2 or kl)"
            ))),
        }
    }
}

impl std::fmt::Display for FidelityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::L2 => "l2",
            Self::Kl => "kl",
        })
    }
}

/// Fidelity `f_{y,b}` tied to one observation `y`.
///
/// Observations may contain zeros (Poisson counts); the KL term uses the
/// limit `0 · log 0 = 0` for them.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityModel {
    kind: FidelityKind,
    observation: GridField,
}

impl FidelityModel {
    pub fn new(kind: FidelityKind, observation: GridField) -> Result<Self> {
        if kind == FidelityKind::Kl {
            if let Some((j, &v)) = observation.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "KL fidelity needs a non-negative observation, sample {j} is {v}"
                )));
            }
        }
        Ok(Self { kind, observation })
    }

    pub fn l2(observation: GridField) -> Self {
        Self {
            kind: FidelityKind::L2,
            observation,
        }
    }

    pub fn kl(observation: GridField) -> Result<Self> {
        Self::new(FidelityKind::Kl, observation)
    }

    pub fn kind(&self) -> FidelityKind {
        self.kind
    }

    pub fn observation(&self) -> &GridField {
        &self.observation
    }

    /// `½ Σ (w − y)²` or `Σ [w − y + y (log y − log w)]`; the KL value is
    /// `+∞` as soon as one prediction is `≤ 0`.
    pub fn value(&self, w: &GridField) -> Result<f64> {
        self.observation.check_same_grid(w)?;
        Ok(self.value_slice(w.values()))
    }

    pub(crate) fn value_slice(&self, w: &[f64]) -> f64 {
        let y = self.observation.values();
        match self.kind {
            FidelityKind::L2 => 0.5 * w.iter().zip(y).map(|(w, y)| (w - y) * (w - y)).sum::<f64>(),
            FidelityKind::Kl => {
                let mut total = 0.0;
                for (&w, &y) in w.iter().zip(y) {
                    if w <= 0.0 {
                        return f64::INFINITY;
                    }
                    total += kl_term(w, y);
                }
                total
            }
        }
    }

    /// `w − y` or `1 − y/w`.
    pub fn gradient(&self, w: &GridField) -> Result<GridField> {
        self.observation.check_same_grid(w)?;
        let values = self.gradient_slice(w.values())?;
        Ok(GridField::from_parts_unchecked(w.grid().clone(), values))
    }

    pub(crate) fn gradient_slice(&self, w: &[f64]) -> Result<Vec<f64>> {
        let y = self.observation.values();
        match self.kind {
            FidelityKind::L2 => Ok(w.iter().zip(y).map(|(w, y)| w - y).collect()),
            FidelityKind::Kl => w
                .iter()
                .zip(y)
                .enumerate()
                .map(|(index, (&w, &y))| {
                    if w > 0.0 {
                        Ok(1.0 - y / w)
                    } else {
                        Err(Error::NonPositivePrediction { index, value: w })
                    }
                })
                .collect(),
        }
    }

    /// Residual `σ = f_{y,b}(Φμ)` logged by the homotopy loop.
    pub fn residual_sigma(&self, w: &GridField) -> Result<f64> {
        self.value(w)
    }

    /// Value restricted to the samples selected by `mask`.
    pub fn masked_value(&self, w: &GridField, mask: &[bool]) -> Result<f64> {
        self.observation.check_same_grid(w)?;
        if mask.len() != w.len() {
            return Err(Error::ShapeMismatch {
                expected: w.len(),
                found: mask.len(),
            });
        }
        let y = self.observation.values();
        let mut total = 0.0;
        for ((&w, &y), _) in w.values().iter().zip(y).zip(mask).filter(|(_, m)| **m) {
            match self.kind {
                FidelityKind::L2 => total += 0.5 * (w - y) * (w - y),
                FidelityKind::Kl if w <= 0.0 => return Ok(f64::INFINITY),
                FidelityKind::Kl => total += kl_term(w, y),
            }
        }
        Ok(total)
    }
}

#[inline]
fn kl_term(w: f64, y: f64) -> f64 {
    if y > 0.0 {
        w - y + y * (y.ln() - w.ln())
    } else {
        w
    }
}

/// Scalar KL function `g_t(s) = (s − t + t log t − t log s) / λ`, `+∞` for `s ≤ 0`.
pub fn kl_scalar(t: f64, lambda: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return f64::INFINITY;
    }
    let d = s - t;
    (d - t * (d / t).ln_1p()) / lambda
}

/// Convex conjugate of [`kl_scalar`]: `−(t/λ) log(1 − λ s*)` for `s* < 1/λ`,
/// `+∞` otherwise.
pub fn kl_scalar_conjugate(t: f64, lambda: f64, s_star: f64) -> f64 {
    if lambda * s_star >= 1.0 {
        return f64::INFINITY;
    }
    -(t / lambda) * (-lambda * s_star).ln_1p()
}
