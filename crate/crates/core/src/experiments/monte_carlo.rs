//! Monte Carlo harness: RMSE of the online estimator against the matching
//! CRB or hybrid CRB, at a set of epoch checkpoints.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SweepParameter, MAX_FAILURE_FRACTION};
use crate::bounds::{crb_trajectory, hcrb_trajectory, BoundKind, BoundResult};
use crate::error::{Error, Result};
use crate::estimator::{run_online, SolverOptions};
use crate::model::{NoiseConfig, PositionPrior, SceneConfig};
use crate::sim::{derive_seed, simulate_campaign, stream, EpochMeasurement, GroundTruth};

/// One row of the Monte Carlo table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub sweep_value: f64,
    pub k: usize,
    pub rmse_phi_ns: f64,
    #[serde(rename = "rmse_Tu_ns")]
    pub rmse_tu_ns: f64,
    #[serde(rename = "rmse_Tm_ns")]
    pub rmse_tm_ns: f64,
    pub rmse_x_m: f64,
    pub bound_phi_ns: Option<f64>,
    #[serde(rename = "bound_Tu_ns")]
    pub bound_tu_ns: Option<f64>,
    #[serde(rename = "bound_Tm_ns")]
    pub bound_tm_ns: Option<f64>,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<McRow>,
    pub seed: u64,
    /// Trials excluded because the estimator failed, summed over sweep values.
    pub failed_trials: usize,
}

/// Everything a trial estimator may look at.
pub struct TrialContext<'a> {
    pub scene: &'a SceneConfig,
    pub prior: &'a PositionPrior,
    pub alpha: f64,
    pub opts: &'a SolverOptions,
}

/// Produces the combined estimate `theta_hat` after every epoch.
pub trait TrialEstimator: Sync {
    fn estimate(
        &self,
        ctx: &TrialContext,
        stream: &[EpochMeasurement],
        truth: &GroundTruth,
    ) -> Result<Vec<DVector<f64>>>;
}

/// The recursive online estimator.
pub struct Online;

impl TrialEstimator for Online {
    fn estimate(&self, ctx: &TrialContext, stream: &[EpochMeasurement], _: &GroundTruth) -> Result<Vec<DVector<f64>>> {
        Ok(run_online(stream, ctx.scene, ctx.prior, ctx.alpha, ctx.opts)?
            .into_iter()
            .map(|s| s.theta_hat)
            .collect())
    }
}

/// Returns the truth at every epoch; checks the error bookkeeping.
pub struct Oracle;

impl TrialEstimator for Oracle {
    fn estimate(&self, _: &TrialContext, stream: &[EpochMeasurement], truth: &GroundTruth) -> Result<Vec<DVector<f64>>> {
        let d = truth.position.len();
        let mut theta = DVector::zeros(3 + d);
        theta.rows_mut(0, 3).copy_from(&truth.clock.to_vector());
        theta.rows_mut(3, d).copy_from(&truth.position);
        Ok(vec![theta; stream.len()])
    }
}

/// Per-sweep-value settings.
struct Point {
    value: f64,
    epochs: usize,
    checkpoints: Vec<usize>,
    noise: NoiseConfig,
    prior: PositionPrior,
}

fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<Point>> {
    let (param, values) = cfg.sweep_points();
    values
        .into_iter()
        .map(|value| {
            let mut epochs = cfg.experiment.epochs;
            let mut checkpoints = cfg.experiment.checkpoints.clone();
            let mut sigma = cfg.noise.sigma_ns;
            let mut prior_std = None;
            match param {
                SweepParameter::Sigma => sigma = value,
                SweepParameter::PriorStd => prior_std = Some(value),
                SweepParameter::Epochs => {
                    epochs = value as usize;
                    checkpoints = vec![epochs];
                }
            }
            Ok(Point {
                value,
                epochs,
                checkpoints,
                noise: cfg.noise_with(sigma)?,
                prior: cfg.prior_with(prior_std)?,
            })
        })
        .collect()
}

/// Squared errors `[phi, T_u, T_m, |x|^2]` at each checkpoint.
type TrialErrors = Vec<[f64; 4]>;

fn run_trial(
    cfg: &ExperimentConfig,
    point: &Point,
    scene: &SceneConfig,
    opts: &SolverOptions,
    estimator: &dyn TrialEstimator,
    trial: u64,
) -> Result<TrialErrors> {
    let truth = cfg.truth_for_trial(trial, &point.prior, scene)?;
    let modes = vec![cfg.mode(); point.epochs];
    let seed = derive_seed(cfg.experiment.seed, &[trial]);
    let stream = simulate_campaign(&truth, scene, &point.noise, &modes, seed)?;
    let ctx = TrialContext {
        scene,
        prior: &point.prior,
        alpha: point.noise.alpha,
        opts,
    };
    let thetas = estimator.estimate(&ctx, &stream, &truth)?;
    if thetas.len() != stream.len() {
        return Err(Error::DimensionMismatch {
            expected: stream.len(),
            found: thetas.len(),
        });
    }
    let d = truth.position.len();
    let c = truth.clock.to_vector();
    point
        .checkpoints
        .iter()
        .map(|&k| {
            let th = &thetas[k - 1];
            let e: Vec<f64> = (0..3).map(|i| th[i] - c[i]).collect();
            let ex = (th.rows(3, d) - &truth.position).norm_squared();
            let out = [e[0] * e[0], e[1] * e[1], e[2] * e[2], ex];
            if out.iter().all(|v| v.is_finite()) {
                Ok(out)
            } else {
                Err(Error::InvalidParameter(format!("non-finite estimate at k = {k}")))
            }
        })
        .collect()
}

/// Bound at each checkpoint of one sweep point, using the base noise level
/// for every epoch.
pub fn bound_columns(
    cfg: &ExperimentConfig,
    kind: BoundKind,
    scene: &SceneConfig,
    epochs: usize,
    sigma: f64,
    prior: &PositionPrior,
    checkpoints: &[usize],
) -> Result<Vec<Option<BoundResult>>> {
    let modes = vec![cfg.mode(); epochs];
    let sigmas = vec![sigma; epochs];
    let alpha = cfg.noise.alpha;
    let traj = match kind {
        BoundKind::Crb => {
            let x = &cfg.truth.position;
            let precision = prior.is_informative().then_some(&prior.precision);
            crb_trajectory(x, scene, &modes, &sigmas, alpha, precision, checkpoints)?
        }
        BoundKind::Hcrb => {
            let seed = derive_seed(cfg.experiment.seed, &[stream::BOUNDS]);
            hcrb_trajectory(prior, scene, &modes, &sigmas, alpha, cfg.experiment.hcrb_samples, seed, checkpoints)?
        }
    };
    Ok(traj.into_iter().map(|(_, b)| b.ok()).collect())
}

/// Monte Carlo run with a caller-supplied estimator.
pub fn run_monte_carlo_with(cfg: &ExperimentConfig, estimator: &dyn TrialEstimator) -> Result<ResultTable> {
    cfg.validate()?;
    let scene = cfg.scene()?;
    let opts = cfg.solver()?;
    let trials = cfg.experiment.trials;
    let mut rows = Vec::new();
    let mut failed_total = 0;
    for point in sweep_points(cfg)? {
        let results: Vec<Result<TrialErrors>> = (0..trials as u64)
            .into_par_iter()
            .map(|t| run_trial(cfg, &point, &scene, &opts, estimator, t))
            .collect();
        let ok: Vec<&TrialErrors> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let failed = trials - ok.len();
        if failed as f64 > MAX_FAILURE_FRACTION * trials as f64 || ok.is_empty() {
            return Err(Error::TooManyFailures { failed, trials });
        }
        failed_total += failed;
        let bounds = bound_columns(
            cfg,
            cfg.bound_kind(),
            &scene,
            point.epochs,
            point.noise.schedule.base_sigma(),
            &point.prior,
            &point.checkpoints,
        )?;
        let n = ok.len() as f64;
        for (ci, &k) in point.checkpoints.iter().enumerate() {
            // fixed summation order over trials
            let mut sums = [0.0; 4];
            for errs in &ok {
                for (s, e) in sums.iter_mut().zip(errs[ci]) {
                    *s += e;
                }
            }
            let b = bounds[ci].as_ref();
            rows.push(McRow {
                sweep_value: point.value,
                k,
                rmse_phi_ns: (sums[0] / n).sqrt(),
                rmse_tu_ns: (sums[1] / n).sqrt(),
                rmse_tm_ns: (sums[2] / n).sqrt(),
                rmse_x_m: (sums[3] / n).sqrt(),
                bound_phi_ns: b.map(|b| b.sqrt_diag[0]),
                bound_tu_ns: b.map(|b| b.sqrt_diag[1]),
                bound_tm_ns: b.map(|b| b.sqrt_diag[2]),
                trials: ok.len(),
            });
        }
    }
    Ok(ResultTable {
        rows,
        seed: cfg.experiment.seed,
        failed_trials: failed_total,
    })
}

/// Monte Carlo run of the online estimator.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<ResultTable> {
    run_monte_carlo_with(cfg, &Online)
}

