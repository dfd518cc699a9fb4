//! Synthetic measurement streams.
//!
//! Noisy epochs are drawn from the linear-Gaussian model in [`crate::model`].
//! [`noise_free_trace`] instead builds the explicit event timeline (master
//! transmissions, relays, node ticks) and reads the intervals off it, which
//! gives an independent check of the closed-form model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_sqrt;
use crate::model::{
    build_system_matrices, dist, mean_observation, noise_shape_template, ClockParams, EpochMode,
    NoiseConfig, NoiseSchedule, SceneConfig,
};

/// Stream labels for [`derive_seed`].
pub mod stream {
    pub const TRUTH: u64 = 1;
    pub const SCHEDULE: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const BOUNDS: u64 = 4;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a path of counters.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(root), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng_for(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}

/// Ground-truth clock and position of the simulated node.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub clock: ClockParams,
    pub position: DVector<f64>,
    /// Interval from the first master reception to the next node tick, ns.
    pub delta_1: f64,
}

impl GroundTruth {
    /// Builds the truth from the first-epoch interval: `phi_u = delta_1 + rho_m / v`.
    pub fn from_first_interval(
        delta_1: f64,
        t_u: f64,
        t_m: f64,
        position: DVector<f64>,
        scene: &SceneConfig,
    ) -> Result<Self> {
        scene.check_dim(position.as_slice())?;
        let tof = dist(position.as_slice(), scene.master()) / scene.prop_speed();
        let truth = GroundTruth {
            clock: ClockParams {
                phi_u: delta_1 + tof,
                t_u,
                t_m,
            },
            position,
            delta_1,
        };
        truth.validate(scene)?;
        Ok(truth)
    }

    pub fn validate(&self, scene: &SceneConfig) -> Result<()> {
        scene.check_dim(self.position.as_slice())?;
        self.clock
            .validate()
            .map_err(|e| Error::InvalidTruth(e.to_string()))?;
        if !(self.delta_1 >= 0.0 && self.delta_1 < self.clock.t_u) {
            return Err(Error::InvalidTruth(format!(
                "delta_1 = {} ns must lie in [0, T_u = {})",
                self.delta_1, self.clock.t_u
            )));
        }
        let tof = dist(self.position.as_slice(), scene.master()) / scene.prop_speed();
        let implied = self.clock.phi_u - tof;
        if (implied - self.delta_1).abs() > 1e-9 * self.clock.phi_u.abs().max(1.0) {
            return Err(Error::InvalidTruth(format!(
                "delta_1 = {} ns inconsistent with phi_u - tof = {implied} ns",
                self.delta_1
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_clock_model(clock: &ClockParams, scene: &SceneConfig) -> Result<()> {
    let node_span = scene.node_cycles() as f64 * clock.t_u;
    let master_span = scene.master_cycles() as f64 * clock.t_m;
    if node_span < master_span {
        return Err(Error::ModelViolation {
            node_span,
            master_span,
        });
    }
    Ok(())
}

/// One epoch's observed intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMeasurement {
    pub k: usize,
    pub mode: EpochMode,
    pub y: DVector<f64>,
    /// Noise level used to generate this epoch, ns.
    pub sigma_true: f64,
}

/// Draws `sigma * Q^{1/2} z` for a fixed mode.
#[derive(Clone, Debug)]
pub struct NoiseShaper {
    root: DMatrix<f64>,
}

impl NoiseShaper {
    pub fn new(mode: EpochMode, alpha: f64) -> Self {
        let s = mode.selection();
        let q = &s * noise_shape_template(alpha) * s.transpose();
        NoiseShaper { root: sym_sqrt(&q) }
    }

    pub fn sample<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> DVector<f64> {
        let n = self.root.nrows();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.root * z) * sigma
    }
}

fn simulate_with<R: Rng + ?Sized>(
    truth: &GroundTruth,
    scene: &SceneConfig,
    mode: EpochMode,
    k: usize,
    sigma_k: f64,
    alpha: f64,
    shaper: &NoiseShaper,
    rng: &mut R,
) -> Result<EpochMeasurement> {
    if !(sigma_k > 0.0) || !sigma_k.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma_k must be positive, got {sigma_k}"
        )));
    }
    let mats = build_system_matrices(k, mode, scene, alpha)?;
    let mean = mean_observation(&mats, &truth.clock, truth.position.as_slice(), scene)?;
    let y = mean + shaper.sample(sigma_k, rng);
    Ok(EpochMeasurement {
        k,
        mode,
        y,
        sigma_true: sigma_k,
    })
}

/// Simulates epoch `k`: `y = mu + H c + G rho(x) / v + w`,
/// `w ~ N(0, sigma_k^2 Q)`.
pub fn simulate_epoch<R: Rng + ?Sized>(
    truth: &GroundTruth,
    scene: &SceneConfig,
    mode: EpochMode,
    k: usize,
    sigma_k: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<EpochMeasurement> {
    check_clock_model(&truth.clock, scene)?;
    truth.validate(scene)?;
    let shaper = NoiseShaper::new(mode, alpha);
    simulate_with(truth, scene, mode, k, sigma_k, alpha, &shaper, rng)
}

/// Per-epoch noise levels. Epoch `k`'s outlier draw comes from its own
/// sub-stream, so the sequence prefix does not depend on `epochs`.
pub fn make_noise_schedule(schedule: &NoiseSchedule, epochs: usize, seed: u64) -> Result<Vec<f64>> {
    if epochs < 1 {
        return Err(Error::InvalidParameter("epoch count must be >= 1".into()));
    }
    NoiseConfig {
        alpha: 0.5,
        schedule: *schedule,
    }
    .validate()?;
    Ok(match *schedule {
        NoiseSchedule::Constant { sigma } => vec![sigma; epochs],
        NoiseSchedule::Outliers {
            sigma,
            probability,
            factor,
        } => (1..=epochs as u64)
            .map(|k| {
                let u: f64 = rng_for(seed, &[stream::SCHEDULE, k]).random();
                if u < probability {
                    factor * sigma
                } else {
                    sigma
                }
            })
            .collect(),
    })
}

/// Simulates epochs `1..=modes.len()` with independent noise per epoch.
pub fn simulate_campaign(
    truth: &GroundTruth,
    scene: &SceneConfig,
    noise: &NoiseConfig,
    modes: &[EpochMode],
    seed: u64,
) -> Result<Vec<EpochMeasurement>> {
    noise.validate()?;
    check_clock_model(&truth.clock, scene)?;
    truth.validate(scene)?;
    let sigmas = make_noise_schedule(&noise.schedule, modes.len(), seed)?;
    let master_only = NoiseShaper::new(EpochMode::MasterOnly, noise.alpha);
    let full = NoiseShaper::new(EpochMode::WithTransceivers, noise.alpha);
    modes
        .iter()
        .zip(sigmas)
        .enumerate()
        .map(|(i, (&mode, sigma))| {
            let k = i + 1;
            let shaper = match mode {
                EpochMode::MasterOnly => &master_only,
                EpochMode::WithTransceivers => &full,
            };
            let mut rng = rng_for(seed, &[stream::NOISE, k as u64]);
            simulate_with(truth, scene, mode, k, sigma, noise.alpha, shaper, &mut rng)
        })
        .collect()
}

/// Explicit event timeline of a noise-free run.
#[derive(Clone, Debug, PartialEq)]
pub struct TickTrace {
    /// Master transmission ticks `T_m * n_m` for `n_m = 0, M, ..., K M`.
    pub master_ticks: Vec<f64>,
    /// Observed node ticks `T_u * n_u + phi_u` for `n_u = 0, N, ..., K N`.
    pub node_ticks: Vec<f64>,
    /// Per epoch (`K + 1` entries), arrival times at the node in the
    /// order m, 1, 2, 3 (master only when there are no transceivers).
    pub reception_times: Vec<Vec<f64>>,
}

impl TickTrace {
    pub fn epochs(&self) -> usize {
        self.reception_times.len() - 1
    }

    /// Intervals of epoch `k` read off the timeline, in measurement order.
    pub fn intervals(&self, k: usize, mode: EpochMode) -> Result<DVector<f64>> {
        if k < 1 || k > self.epochs() {
            return Err(Error::InvalidEpoch(k));
        }
        let rx = &self.reception_times[k - 1];
        let y_phi = self.node_ticks[k - 1] - rx[0];
        let y_u = self.node_ticks[k] - self.node_ticks[k - 1];
        let y_m = self.reception_times[k][0] - rx[0];
        match mode {
            EpochMode::MasterOnly => Ok(DVector::from_column_slice(&[y_phi, y_u, y_m])),
            EpochMode::WithTransceivers => {
                if rx.len() < 4 {
                    return Err(Error::MissingTransceivers);
                }
                Ok(DVector::from_column_slice(&[
                    y_phi,
                    y_u,
                    y_m,
                    rx[1] - rx[0],
                    rx[2] - rx[1],
                    rx[3] - rx[2],
                ]))
            }
        }
    }
}

/// Builds the event timeline for `epochs` epochs. Requires the relay delay
/// to exceed every time of flight and the relay chain to finish within the
/// epoch.
pub fn noise_free_trace(truth: &GroundTruth, scene: &SceneConfig, epochs: usize) -> Result<TickTrace> {
    if epochs < 1 {
        return Err(Error::InvalidParameter("epoch count must be >= 1".into()));
    }
    check_clock_model(&truth.clock, scene)?;
    truth.validate(scene)?;
    let v = scene.prop_speed();
    let x = truth.position.as_slice();
    let epoch_len = scene.master_cycles() as f64 * truth.clock.t_m;
    let n_anchor = scene.anchor_count();

    if scene.has_transceivers() {
        let mut max_flight: f64 = 0.0;
        for i in 0..n_anchor {
            max_flight = max_flight.max(dist(scene.anchor(i).unwrap(), x) / v);
            for j in 0..n_anchor {
                max_flight = max_flight.max(scene.anchor_distance(i, j) / v);
            }
        }
        if !(scene.relay_delay() > max_flight) {
            return Err(Error::ScheduleViolation(format!(
                "relay delay {} ns does not exceed the longest time of flight {max_flight} ns",
                scene.relay_delay()
            )));
        }
    }

    // transmission offsets within an epoch, relative to the master tick
    let mut tx = vec![0.0; n_anchor];
    for i in 1..n_anchor {
        tx[i] = tx[i - 1] + scene.anchor_distance(i - 1, i) / v + scene.relay_delay();
    }
    let flights: Vec<f64> = (0..n_anchor)
        .map(|i| dist(scene.anchor(i).unwrap(), x) / v)
        .collect();
    let last_arrival = tx
        .iter()
        .zip(&flights)
        .map(|(t, f)| t + f)
        .fold(0.0, f64::max);
    if last_arrival >= epoch_len {
        return Err(Error::ScheduleViolation(format!(
            "relay chain ends {last_arrival} ns into an epoch of {epoch_len} ns"
        )));
    }

    let m = scene.master_cycles() as f64;
    let n = scene.node_cycles() as f64;
    let master_ticks: Vec<f64> = (0..=epochs).map(|e| truth.clock.t_m * (e as f64 * m)).collect();
    let node_ticks: Vec<f64> = (0..=epochs)
        .map(|e| truth.clock.t_u * (e as f64 * n) + truth.clock.phi_u)
        .collect();
    let reception_times = master_ticks
        .iter()
        .map(|t0| tx.iter().zip(&flights).map(|(t, f)| t0 + t + f).collect())
        .collect();
    Ok(TickTrace {
        master_ticks,
        node_ticks,
        reception_times,
    })
}
