//! Configured experiments: measurement dumps, bound trajectories and maps,
//! single online runs and Monte Carlo tables.

mod config;
mod monte_carlo;
mod output;

use std::collections::BTreeMap;

pub use config::{
    load_config, parse_config, ExperimentConfig, ExperimentSection, MapSection, NoiseSection, OutputFormat,
    PriorSection, SceneSection, SolverSection, Sweep, SweepParameter, TruthSection, DEFAULT_CHECKPOINTS,
    MAX_FAILURE_FRACTION,
};
pub use monte_carlo::{
    bound_columns, run_monte_carlo, run_monte_carlo_with, McRow, Online, Oracle, ResultTable, TrialContext,
    TrialEstimator,
};
pub use output::{emit_results, sig6, write_rows, BoundRow, MapRow, MeasurementRow, Row, TrajectoryRow};

use crate::bounds::{bound_map, lattice, MapSettings};
use crate::error::{Error, Result};
use crate::estimator::run_online;
use crate::sim::{derive_seed, simulate_campaign, EpochMeasurement};

fn trial_stream(cfg: &ExperimentConfig, trial: u64) -> Result<Vec<EpochMeasurement>> {
    cfg.validate()?;
    let scene = cfg.scene()?;
    let prior = cfg.prior()?;
    let truth = cfg.truth_for_trial(trial, &prior, &scene)?;
    let modes = vec![cfg.mode(); cfg.experiment.epochs];
    simulate_campaign(&truth, &scene, &cfg.noise()?, &modes, derive_seed(cfg.experiment.seed, &[trial]))
}

/// Measurements of the first trial's campaign.
pub fn simulate_rows(cfg: &ExperimentConfig) -> Result<Vec<MeasurementRow>> {
    Ok(trial_stream(cfg, 0)?
        .iter()
        .map(|m| {
            let y = m.y.as_slice();
            let relay = |i: usize| y.get(i).copied();
            MeasurementRow {
                trial: 0,
                k: m.k,
                mode: m.mode.as_str().to_string(),
                y_phi: y[0],
                y_u: y[1],
                y_m: y[2],
                y_1: relay(3),
                y_2: relay(4),
                y_3: relay(5),
            }
        })
        .collect())
}

/// Configured bound (CRB at the true position, or HCRB) at each checkpoint.
pub fn bound_rows(cfg: &ExperimentConfig) -> Result<Vec<BoundRow>> {
    cfg.validate()?;
    let scene = cfg.scene()?;
    let prior = cfg.prior()?;
    let cps = &cfg.experiment.checkpoints;
    let bounds = bound_columns(cfg, cfg.bound_kind(), &scene, cfg.experiment.epochs, cfg.noise.sigma_ns, &prior, cps)?;
    Ok(cps
        .iter()
        .zip(bounds)
        .map(|(&k, b)| BoundRow {
            k,
            bound_phi_ns: b.as_ref().map(|b| b.sqrt_diag[0]),
            bound_tu_ns: b.as_ref().map(|b| b.sqrt_diag[1]),
            bound_tm_ns: b.as_ref().map(|b| b.sqrt_diag[2]),
        })
        .collect())
}

/// Root bound of `phi_u` over the `[experiment.map]` lattice (2-D scenes).
pub fn map_rows(cfg: &ExperimentConfig) -> Result<Vec<MapRow>> {
    cfg.validate()?;
    let scene = cfg.scene()?;
    if scene.dim() != 2 {
        return Err(Error::key("scene.master", "bound maps need a 2-D scene"));
    }
    let m = &cfg.experiment.map;
    let prior = cfg.prior()?;
    let settings = MapSettings {
        kind: m.kind,
        mode: cfg.mode(),
        sigma: cfg.noise.sigma_ns,
        epochs: cfg.experiment.epochs,
        alpha: cfg.noise.alpha,
        prior_precision: prior.is_informative().then(|| prior.precision.clone()),
        n_samples: cfg.experiment.hcrb_samples,
        seed: cfg.experiment.seed,
    };
    let grid = lattice(m.lo, m.hi, m.nx, m.ny);
    Ok(bound_map(&grid, &settings, &scene)?
        .into_iter()
        .map(|p| MapRow {
            x1_m: p.position[0],
            x2_m: p.position[1],
            sqrt_bound_phi_ns: p.sqrt_bound_phi,
        })
        .collect())
}

/// Online estimates of the first trial, one row per epoch.
pub fn run_rows(cfg: &ExperimentConfig) -> Result<Vec<TrajectoryRow>> {
    let stream = trial_stream(cfg, 0)?;
    let scene = cfg.scene()?;
    let steps = run_online(&stream, &scene, &cfg.prior()?, cfg.noise.alpha, &cfg.solver()?)?;
    let d = scene.dim();
    Ok(steps
        .iter()
        .map(|s| {
            let th = &s.theta_hat;
            TrajectoryRow {
                trial: 0,
                k: s.k,
                phi_hat: th[0],
                tu_hat: th[1],
                tm_hat: th[2],
                x_hat: (0..d).map(|i| (format!("x{}_hat", i + 1), th[3 + i])).collect::<BTreeMap<_, _>>(),
                sigma_hat: s.sigma_hat_sq.sqrt(),
                provisional: s.provisional,
            }
        })
        .collect())
}
