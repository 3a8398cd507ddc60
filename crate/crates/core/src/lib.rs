//! Off-the-grid sparse spike recovery under Gaussian blur with L2 or
//! Kullback-Leibler data terms.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificate;
pub mod error;
pub mod fidelity;
pub mod forward;
pub mod geometry;
pub mod homotopy;
pub mod io;
pub mod metrics;
pub mod sfw;
pub mod simulation;

pub use certificate::{build_certificate, Certificate, Maximizer, OptimalityReport, SearchConfig};
pub use error::{Error, Result};
pub use fidelity::{FidelityKind, FidelityModel};
pub use forward::{calibrate_sigma_from_fwhm, Background, ForwardModel, GaussianPsf, GridField};
pub use geometry::{project_into_domain, DiracMeasure, Domain, Grid};
pub use homotopy::{
    estimate_background, estimate_sigma_target, homotopy_solve, initial_lambda, lateral_ring_mask,
    poisson_discrepancy_target, ring_mask, update_lambda, HomotopyConfig, HomotopyResult, HomotopyStep,
};
pub use metrics::{
    jaccard, match_spikes, rmse_amplitudes, rmse_positions, summarize, MatchReport, MatchedPair, MetricsSummary,
};
pub use sfw::{
    amplitude_step, boosted_sfw_solve, sfw_solve, sliding_step, AmplitudeSolverConfig, SfwConfig, SlideSolverConfig,
    SolveResult, SolverTrace, SpikeObjective, TraceEntry,
};
pub use simulation::{
    generate_ground_truth, paper_scenario, sample_poisson, simulate, simulate_acquisition, NoiseModel, ScenarioConfig,
};
