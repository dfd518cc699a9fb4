//! TOML experiment configuration.
//!
//! Every key is optional; omitted keys take the reference values (M = 100,
//! N = 101, T_m = T_u = 50 ns, delta_1 = 5 ns, alpha = 0.1, sigma_0 = 10 ns,
//! eta = 1.2, epsilon = 1e-7 m). Unknown keys are rejected.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundKind, DEFAULT_HCRB_SAMPLES};
use crate::error::{Error, Result};
use crate::estimator::{SolverOptions, Weighting};
use crate::model::{EpochMode, NoiseConfig, NoiseSchedule, PositionPrior, SceneConfig, PROP_SPEED_M_PER_NS};
use crate::sim::{derive_seed, rng_for, stream, GroundTruth};

pub const DEFAULT_CHECKPOINTS: [usize; 9] = [1, 2, 5, 10, 20, 50, 100, 250, 500];

/// Fraction of failed Monte Carlo trials tolerated before a run is rejected.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub truth: TruthSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// `[scene]`: anchor layout (meters) and epoch timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub master: Vec<f64>,
    /// Three relay positions; an empty list means a master-only scene.
    pub transceivers: Vec<Vec<f64>>,
    pub master_cycles: u32,
    pub node_cycles: u32,
    pub relay_delay_ns: f64,
    pub prop_speed_m_per_ns: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        SceneSection {
            master: vec![1.0, 1.0],
            transceivers: vec![vec![11.0, 11.0], vec![1.0, 11.0], vec![11.0, 1.0]],
            master_cycles: 100,
            node_cycles: 101,
            relay_delay_ns: 100.0,
            prop_speed_m_per_ns: PROP_SPEED_M_PER_NS,
        }
    }
}

/// `[truth]`: true clock and node position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthSection {
    /// Fixed node position, meters. Ignored when `from_prior` is set.
    pub position: Vec<f64>,
    /// Draw the position from the prior in every trial.
    pub from_prior: bool,
    pub first_interval_ns: f64,
    pub t_u_ns: f64,
    pub t_m_ns: f64,
}

impl Default for TruthSection {
    fn default() -> Self {
        TruthSection {
            position: vec![9.0, 8.0],
            from_prior: false,
            first_interval_ns: 5.0,
            t_u_ns: 50.0,
            t_m_ns: 50.0,
        }
    }
}

/// `[prior]`: Gaussian position prior with independent axes. An empty
/// `std_m` means no prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub mean: Vec<f64>,
    pub std_m: Vec<f64>,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            mean: vec![9.0, 8.0],
            std_m: Vec::new(),
        }
    }
}

/// `[noise]`: RF noise level and timing-device fraction. Outlier epochs
/// (probability `outlier_probability`) use `outlier_factor * sigma_ns`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub alpha: f64,
    pub sigma_ns: f64,
    pub outlier_probability: f64,
    pub outlier_factor: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            alpha: 0.1,
            sigma_ns: 2.0,
            outlier_probability: 0.0,
            outlier_factor: 1.0,
        }
    }
}

/// `[solver]`: per-epoch descent and combiner weighting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub eta: f64,
    pub epsilon_m: f64,
    pub max_iters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_step_cap_m: Option<f64>,
    pub sigma_nominal_ns: f64,
    pub line_search_evals: usize,
    pub weighting: Weighting,
}

impl Default for SolverSection {
    fn default() -> Self {
        let o = SolverOptions::default();
        SolverSection {
            eta: o.eta,
            epsilon_m: o.epsilon,
            max_iters: o.max_iters,
            initial_step_cap_m: o.initial_step_cap,
            sigma_nominal_ns: o.sigma_nominal,
            line_search_evals: o.line_search_evals,
            weighting: o.weighting,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// RF noise level, ns.
    Sigma,
    /// Isotropic prior standard deviation, meters.
    PriorStd,
    /// Campaign length; each value reports a single row at its last epoch.
    Epochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// `[experiment.map]`: bound map lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSection {
    pub kind: BoundKind,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            kind: BoundKind::Crb,
            lo: [0.0, 0.0],
            hi: [12.0, 12.0],
            nx: 25,
            ny: 25,
        }
    }
}

/// `[experiment]`: run size, seeding, bound type and outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub epochs: usize,
    pub trials: usize,
    pub seed: u64,
    /// Defaults to `with_transceivers` when the scene has relays.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<EpochMode>,
    pub checkpoints: Vec<usize>,
    /// Defaults to `hcrb` when the truth is drawn from the prior.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundKind>,
    pub hcrb_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    pub format: OutputFormat,
    pub map: MapSection,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            epochs: 500,
            trials: 300,
            seed: 0,
            mode: None,
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
            bound: None,
            hcrb_samples: DEFAULT_HCRB_SAMPLES,
            sweep: None,
            output: None,
            format: OutputFormat::Csv,
            map: MapSection::default(),
        }
    }
}

/// Parses and validates a TOML document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn keyed<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::ConfigKey { .. } => e,
        other => Error::key(key, other.to_string()),
    })
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::key(key, format!("must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        let s = &self.scene;
        let relays = match s.transceivers.len() {
            0 => None,
            3 => Some([
                s.transceivers[0].as_slice(),
                s.transceivers[1].as_slice(),
                s.transceivers[2].as_slice(),
            ]),
            n => {
                return Err(Error::key(
                    "scene.transceivers",
                    format!("expected 0 or 3 positions, got {n}"),
                ))
            }
        };
        keyed(
            "scene",
            SceneConfig::new(
                &s.master,
                relays,
                s.master_cycles,
                s.node_cycles,
                s.relay_delay_ns,
                s.prop_speed_m_per_ns,
            ),
        )
    }

    /// Prior with the `[prior]` values, or with an isotropic standard
    /// deviation overriding `std_m` (prior sweeps).
    pub fn prior_with(&self, std_override: Option<f64>) -> Result<PositionPrior> {
        let mean = DVector::from_column_slice(&self.prior.mean);
        if mean.len() != self.scene.master.len() {
            return Err(Error::key(
                "prior.mean",
                format!("expected {} coordinates, got {}", self.scene.master.len(), mean.len()),
            ));
        }
        match std_override {
            Some(s) => keyed("prior.std_m", PositionPrior::isotropic(mean, s)),
            None if self.prior.std_m.is_empty() => Ok(PositionPrior::none(mean)),
            None => keyed("prior.std_m", PositionPrior::diagonal(mean, &self.prior.std_m)),
        }
    }

    pub fn prior(&self) -> Result<PositionPrior> {
        self.prior_with(None)
    }

    pub fn noise_with(&self, sigma: f64) -> Result<NoiseConfig> {
        let n = &self.noise;
        let schedule = if n.outlier_probability > 0.0 {
            NoiseSchedule::Outliers {
                sigma,
                probability: n.outlier_probability,
                factor: n.outlier_factor,
            }
        } else {
            NoiseSchedule::Constant { sigma }
        };
        let cfg = NoiseConfig {
            alpha: n.alpha,
            schedule,
        };
        positive("noise.sigma_ns", sigma)?;
        if !(n.alpha > 0.0 && n.alpha < 1.0) {
            return Err(Error::key("noise.alpha", format!("must lie in (0, 1), got {}", n.alpha)));
        }
        if !(0.0..=1.0).contains(&n.outlier_probability) {
            return Err(Error::key(
                "noise.outlier_probability",
                format!("must lie in [0, 1], got {}", n.outlier_probability),
            ));
        }
        positive("noise.outlier_factor", n.outlier_factor)?;
        keyed("noise", cfg.validate())?;
        Ok(cfg)
    }

    pub fn noise(&self) -> Result<NoiseConfig> {
        self.noise_with(self.noise.sigma_ns)
    }

    pub fn solver(&self) -> Result<SolverOptions> {
        let s = &self.solver;
        let opts = SolverOptions {
            eta: s.eta,
            epsilon: s.epsilon_m,
            max_iters: s.max_iters,
            initial_step_cap: s.initial_step_cap_m,
            sigma_nominal: s.sigma_nominal_ns,
            line_search_evals: s.line_search_evals,
            weighting: s.weighting,
        };
        positive("solver.eta", s.eta)?;
        positive("solver.epsilon_m", s.epsilon_m)?;
        positive("solver.sigma_nominal_ns", s.sigma_nominal_ns)?;
        if let Some(c) = s.initial_step_cap_m {
            positive("solver.initial_step_cap_m", c)?;
        }
        if s.max_iters < 1 {
            return Err(Error::key("solver.max_iters", "must be >= 1"));
        }
        if s.line_search_evals < 3 {
            return Err(Error::key("solver.line_search_evals", "must be >= 3"));
        }
        keyed("solver", opts.validate())?;
        Ok(opts)
    }

    /// True clock periods `(T_u, T_m)`, ns.
    pub fn periods(&self) -> Result<(f64, f64)> {
        let t = &self.truth;
        positive("truth.t_u_ns", t.t_u_ns)?;
        positive("truth.t_m_ns", t.t_m_ns)?;
        let node_span = self.scene.node_cycles as f64 * t.t_u_ns;
        let master_span = self.scene.master_cycles as f64 * t.t_m_ns;
        if node_span < master_span {
            return Err(Error::key(
                "truth.t_u_ns",
                format!("N*T_u = {node_span} ns is shorter than M*T_m = {master_span} ns"),
            ));
        }
        if !(t.first_interval_ns >= 0.0 && t.first_interval_ns < t.t_u_ns) {
            return Err(Error::key(
                "truth.first_interval_ns",
                format!("must lie in [0, T_u = {}), got {}", t.t_u_ns, t.first_interval_ns),
            ));
        }
        Ok((t.t_u_ns, t.t_m_ns))
    }

    /// Ground truth of one Monte Carlo trial.
    pub fn truth_for_trial(&self, trial: u64, prior: &PositionPrior, scene: &SceneConfig) -> Result<GroundTruth> {
        let (t_u, t_m) = self.periods()?;
        let position = if self.truth.from_prior {
            let mut rng = rng_for(derive_seed(self.experiment.seed, &[trial]), &[stream::TRUTH]);
            crate::bounds::sample_prior(prior, 1, &mut rng)?.remove(0)
        } else {
            DVector::from_column_slice(&self.truth.position)
        };
        keyed(
            "truth",
            GroundTruth::from_first_interval(self.truth.first_interval_ns, t_u, t_m, position, scene),
        )
    }

    pub fn mode(&self) -> EpochMode {
        self.experiment.mode.unwrap_or(if self.scene.transceivers.is_empty() {
            EpochMode::MasterOnly
        } else {
            EpochMode::WithTransceivers
        })
    }

    pub fn bound_kind(&self) -> BoundKind {
        self.experiment.bound.unwrap_or(if self.truth.from_prior {
            BoundKind::Hcrb
        } else {
            BoundKind::Crb
        })
    }

    /// Sweep values, or the single configured value of the swept quantity's
    /// natural default (`sigma_ns`).
    pub fn sweep_points(&self) -> (SweepParameter, Vec<f64>) {
        match &self.experiment.sweep {
            Some(s) => (s.parameter, s.values.clone()),
            None => (SweepParameter::Sigma, vec![self.noise.sigma_ns]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scene = self.scene()?;
        self.periods()?;
        let prior = self.prior()?;
        self.noise()?;
        self.solver()?;
        let e = &self.experiment;
        if e.epochs < 1 {
            return Err(Error::key("experiment.epochs", "must be >= 1"));
        }
        if e.trials < 1 {
            return Err(Error::key("experiment.trials", "must be >= 1"));
        }
        if e.hcrb_samples < 1 {
            return Err(Error::key("experiment.hcrb_samples", "must be >= 1"));
        }
        if e.checkpoints.is_empty() {
            return Err(Error::key("experiment.checkpoints", "must not be empty"));
        }
        if e.checkpoints[0] < 1 || e.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::key("experiment.checkpoints", "must be strictly increasing and >= 1"));
        }
        if let Some(s) = &e.sweep {
            if s.values.is_empty() {
                return Err(Error::key("experiment.sweep.values", "must not be empty"));
            }
            for v in &s.values {
                positive("experiment.sweep.values", *v)?;
                if s.parameter == SweepParameter::Epochs && v.fract() != 0.0 {
                    return Err(Error::key("experiment.sweep.values", format!("epoch count {v} is not an integer")));
                }
            }
        }
        let swept_epochs = matches!(&e.sweep, Some(s) if s.parameter == SweepParameter::Epochs);
        if !swept_epochs && *e.checkpoints.last().unwrap() > e.epochs {
            return Err(Error::key("experiment.checkpoints", format!("exceed epochs = {}", e.epochs)));
        }
        let mode = self.mode();
        if mode == EpochMode::WithTransceivers && !scene.has_transceivers() {
            return Err(Error::key("experiment.mode", "with_transceivers needs scene.transceivers"));
        }
        if mode == EpochMode::MasterOnly && !prior.is_informative() {
            return Err(Error::key("prior.std_m", "a master-only experiment needs a position prior"));
        }
        if self.truth.from_prior && !prior.is_proper() {
            return Err(Error::key("truth.from_prior", "needs a prior with positive std_m on every axis"));
        }
        if !self.truth.from_prior {
            self.truth_for_trial(0, &prior, &scene)?;
        }
        if self.bound_kind() == BoundKind::Hcrb && !prior.is_proper() {
            return Err(Error::key("experiment.bound", "hcrb needs a proper position prior"));
        }
        let m = &e.map;
        if m.nx < 1 || m.ny < 1 {
            return Err(Error::key("experiment.map", "nx and ny must be >= 1"));
        }
        if m.kind == BoundKind::Hcrb && !prior.is_proper() {
            return Err(Error::key("experiment.map.kind", "hcrb maps need a proper position prior"));
        }
        Ok(())
    }
}
