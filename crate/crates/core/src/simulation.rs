//! Seeded ground truths and noisy acquisitions.
//!
//! Every replicate owns a ChaCha8 generator seeded with `seed`; the spike
//! draw uses stream 0 and the noise draw stream 1, so the acquisition noise
//! does not depend on how many numbers the spike draw consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Background, ForwardModel, GaussianPsf, GridField};
use crate::geometry::{DiracMeasure, Domain, Grid};

const SPIKE_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    Poisson,
    Gaussian { std: f64 },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub grid: Grid,
    pub sigma: Vec<f64>,
    pub n_spikes: usize,
    pub amplitude_range: [f64; 2],
    pub background: f64,
    pub noise: NoiseModel,
    #[serde(default)]
    pub seed: u64,
    /// Rates are multiplied by this before Poisson sampling and the counts
    /// divided back.
    #[serde(default = "one")]
    pub photon_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.amplitude_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "amplitude_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if self.n_spikes == 0 {
            return Err(Error::InvalidConfig("n_spikes must be >= 1".into()));
        }
        if self.sigma.len() != self.grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.dim(),
                found: self.sigma.len(),
            });
        }
        if !(self.background >= 0.0) {
            return Err(Error::InvalidConfig("background must be >= 0".into()));
        }
        if matches!(self.noise, NoiseModel::Poisson) && !(self.background > 0.0) {
            return Err(Error::NonPositiveInput {
                name: "background",
                value: self.background,
            });
        }
        if let NoiseModel::Gaussian { std } = self.noise {
            if !(std >= 0.0) {
                return Err(Error::InvalidConfig("gaussian std must be >= 0".into()));
            }
        }
        if !(self.photon_scale > 0.0 && self.photon_scale.is_finite()) {
            return Err(Error::NonPositiveInput {
                name: "photon_scale",
                value: self.photon_scale,
            });
        }
        GaussianPsf::new(self.sigma.clone())?;
        Ok(())
    }

    pub fn domain(&self) -> &Domain {
        self.grid.domain()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn forward_model(&self) -> Result<ForwardModel> {
        ForwardModel::new(
            GaussianPsf::new(self.sigma.clone())?,
            self.grid.clone(),
            Background::Constant(self.background),
        )
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Built-in scenarios: `sim1d`, `sim2d`, `sim3d`.
pub fn paper_scenario(name: &str) -> Result<ScenarioConfig> {
    let (lower, upper, shape, sigma, n_spikes, amplitude_range, background) = match name {
        "sim1d" => (vec![0.0], vec![1.0], vec![128], vec![0.07], 6, [0.6, 1.4], 0.01),
        "sim2d" => (
            vec![0.0; 2],
            vec![1.0; 2],
            vec![128, 128],
            vec![0.07; 2],
            15,
            [0.5, 1.5],
            0.05,
        ),
        "sim3d" => (
            vec![-1300.0, -1300.0, -1000.0],
            vec![1300.0, 1300.0, 1000.0],
            vec![40, 40, 8],
            vec![200.0, 200.0, 400.0],
            7,
            [0.6, 1.4],
            0.5,
        ),
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    Ok(ScenarioConfig {
        grid: Grid::new(Domain::new(lower, upper)?, shape)?,
        sigma,
        n_spikes,
        amplitude_range,
        background,
        noise: NoiseModel::Poisson,
        seed: 0,
        photon_scale: 1.0,
    })
}

/// I.i.d. uniform positions on the domain and amplitudes on the range, with
/// resampling of any position closer than `1e-9 · width` to an earlier one.
pub fn generate_ground_truth(cfg: &ScenarioConfig) -> Result<DiracMeasure> {
    cfg.validate()?;
    let dom = cfg.domain();
    let d = dom.dim();
    let min_sep = 1e-9 * dom.max_width();
    let mut rng = cfg.rng(SPIKE_STREAM);
    let mut positions: Vec<f64> = Vec::with_capacity(cfg.n_spikes * d);
    while positions.len() < cfg.n_spikes * d {
        let x: Vec<f64> = (0..d)
            .map(|k| rng.random_range(dom.lower()[k]..dom.upper()[k]))
            .collect();
        let too_close = positions
            .chunks(d)
            .any(|p| p.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() < min_sep);
        if !too_close {
            positions.extend(x);
        }
    }
    let [lo, hi] = cfg.amplitude_range;
    let amplitudes: Vec<f64> = (0..cfg.n_spikes)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) })
        .collect();
    DiracMeasure::new(d, positions, amplitudes)
}

pub fn simulate_acquisition(cfg: &ScenarioConfig, mu_gt: &DiracMeasure) -> Result<GridField> {
    cfg.validate()?;
    let model = cfg.forward_model()?;
    let clean = model.apply_forward(mu_gt)?;
    let mut rng = cfg.rng(NOISE_STREAM);
    let values: Vec<f64> = match cfg.noise {
        NoiseModel::None => return Ok(clean),
        NoiseModel::Poisson => clean
            .values()
            .iter()
            .map(|&w| sample_poisson(&mut rng, w * cfg.photon_scale) / cfg.photon_scale)
            .collect(),
        NoiseModel::Gaussian { std } => {
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            clean.values().iter().map(|&w| w + normal.sample(&mut rng)).collect()
        }
    };
    GridField::new(clean.grid().clone(), values)
}

/// One Poisson draw; zero rate gives zero.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).expect("positive finite rate").sample(rng)
}

/// Ground truth plus acquisition for one seed.
pub fn simulate(cfg: &ScenarioConfig) -> Result<(DiracMeasure, GridField)> {
    let mu = generate_ground_truth(cfg)?;
    let y = simulate_acquisition(cfg, &mu)?;
    Ok((mu, y))
}
