//! Deterministic per-epoch measurement model.
//!
//! One epoch yields up to six time intervals, ordered
//! `[y_phi, y_u, y_m, y_1, y_2, y_3]`:
//!
//! * `y_phi`: master reception to the observed node tick,
//! * `y_u`: `N` node clock cycles,
//! * `y_m`: epoch duration between two master receptions,
//! * `y_1..y_3`: gaps between consecutive relayed signals.
//!
//! Stacked, the epoch reads `y = mu + H c + G rho(x) / v + w` with
//! `c = [phi_u, T_u, T_m]`, `rho` the four anchor ranges and `v` the
//! propagation speed. Times are nanoseconds, distances meters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in meters per nanosecond.
pub const PROP_SPEED_M_PER_NS: f64 = 0.299_792_458;

/// Anchor order used by every range vector: master first, then the three
/// transceivers in transmission order.
pub const ANCHOR_NAMES: [&str; 4] = ["master", "transceiver 1", "transceiver 2", "transceiver 3"];

/// Clock parameters `c = [phi_u, T_u, T_m]`, nanoseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockParams {
    /// Offset of the node's initial tick from the master transmission.
    pub phi_u: f64,
    /// Node clock period.
    pub t_u: f64,
    /// Master clock period.
    pub t_m: f64,
}

impl ClockParams {
    pub fn new(phi_u: f64, t_u: f64, t_m: f64) -> Result<Self> {
        let c = ClockParams { phi_u, t_u, t_m };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_u > 0.0) || !(self.t_m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "clock periods must be positive (T_u = {}, T_m = {})",
                self.t_u, self.t_m
            )));
        }
        if !(self.phi_u >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "phi_u must be non-negative, got {}",
                self.phi_u
            )));
        }
        Ok(())
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.phi_u, self.t_u, self.t_m])
    }

    /// Reads the first three entries of an estimate vector. No validation:
    /// estimates may fall outside the physical range.
    pub fn from_slice(v: &[f64]) -> Self {
        ClockParams {
            phi_u: v[0],
            t_u: v[1],
            t_m: v[2],
        }
    }
}

/// Per-epoch measurement layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochMode {
    /// Only the master broadcast is received: `[y_phi, y_u, y_m]`.
    MasterOnly,
    /// Master plus three relayed signals: all six intervals.
    WithTransceivers,
}

impl EpochMode {
    pub fn len(self) -> usize {
        match self {
            EpochMode::MasterOnly => 3,
            EpochMode::WithTransceivers => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EpochMode::MasterOnly => "master_only",
            EpochMode::WithTransceivers => "with_transceivers",
        }
    }

    /// Selection matrix `S_k`.
    pub fn selection(self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, 6, |i, j| if i == j { 1.0 } else { 0.0 })
    }
}

/// Anchor geometry and epoch timing constants.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    dim: usize,
    // master then transceivers; unused trailing coordinates are zero
    anchors: [[f64; 3]; 4],
    has_transceivers: bool,
    master_cycles: u32,
    node_cycles: u32,
    relay_delay: f64,
    prop_speed: f64,
}

impl SceneConfig {
    pub fn new(
        master: &[f64],
        transceivers: Option<[&[f64]; 3]>,
        master_cycles: u32,
        node_cycles: u32,
        relay_delay: f64,
        prop_speed: f64,
    ) -> Result<Self> {
        let dim = master.len();
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidParameter(format!(
                "spatial dimension must be 2 or 3, got {dim}"
            )));
        }
        if master_cycles == 0 || node_cycles == 0 {
            return Err(Error::InvalidParameter(
                "cycle counts M and N must be positive".into(),
            ));
        }
        if !(prop_speed > 0.0) || !prop_speed.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "propagation speed must be positive, got {prop_speed}"
            )));
        }
        if !(relay_delay >= 0.0) || !relay_delay.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "relay delay must be non-negative, got {relay_delay}"
            )));
        }
        let mut anchors = [[0.0; 3]; 4];
        let mut fill = |slot: usize, p: &[f64]| -> Result<()> {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{} position is not finite",
                    ANCHOR_NAMES[slot]
                )));
            }
            anchors[slot][..dim].copy_from_slice(p);
            Ok(())
        };
        fill(0, master)?;
        if let Some(ts) = transceivers {
            for (i, p) in ts.iter().enumerate() {
                fill(i + 1, p)?;
            }
        }
        let scene = SceneConfig {
            dim,
            anchors,
            has_transceivers: transceivers.is_some(),
            master_cycles,
            node_cycles,
            relay_delay,
            prop_speed,
        };
        let n = scene.anchor_count();
        for i in 0..n {
            for j in (i + 1)..n {
                if scene.anchor_distance(i, j) == 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "{} and {} share a position",
                        ANCHOR_NAMES[i], ANCHOR_NAMES[j]
                    )));
                }
            }
        }
        Ok(scene)
    }

    /// The 2-D layout used throughout the bundled experiments: master at
    /// (1, 1), transceivers at (11, 11), (1, 11), (11, 1); M = 100,
    /// N = 101; 100 ns relay delay.
    pub fn reference() -> Self {
        Self::new(
            &[1.0, 1.0],
            Some([&[11.0, 11.0], &[1.0, 11.0], &[11.0, 1.0]]),
            100,
            101,
            100.0,
            PROP_SPEED_M_PER_NS,
        )
        .expect("reference scene is valid")
    }

    /// The reference layout with the transceivers removed.
    pub fn reference_master_only() -> Self {
        Self::new(&[1.0, 1.0], None, 100, 101, 100.0, PROP_SPEED_M_PER_NS)
            .expect("reference scene is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_transceivers(&self) -> bool {
        self.has_transceivers
    }

    pub fn anchor_count(&self) -> usize {
        if self.has_transceivers {
            4
        } else {
            1
        }
    }

    pub fn master_cycles(&self) -> u32 {
        self.master_cycles
    }

    pub fn node_cycles(&self) -> u32 {
        self.node_cycles
    }

    pub fn relay_delay(&self) -> f64 {
        self.relay_delay
    }

    pub fn prop_speed(&self) -> f64 {
        self.prop_speed
    }

    /// Anchor coordinates (length `dim`) in the fixed order m, 1, 2, 3.
    pub fn anchor(&self, i: usize) -> Option<&[f64]> {
        (i < self.anchor_count()).then(|| &self.anchors[i][..self.dim])
    }

    pub fn master(&self) -> &[f64] {
        &self.anchors[0][..self.dim]
    }

    pub fn transceivers(&self) -> Option<[&[f64]; 3]> {
        self.has_transceivers.then(|| {
            [
                &self.anchors[1][..self.dim],
                &self.anchors[2][..self.dim],
                &self.anchors[3][..self.dim],
            ]
        })
    }

    pub fn anchor_distance(&self, i: usize, j: usize) -> f64 {
        dist(&self.anchors[i][..self.dim], &self.anchors[j][..self.dim])
    }

    /// Centroid of the transmitting nodes.
    pub fn anchor_centroid(&self) -> DVector<f64> {
        let n = self.anchor_count();
        DVector::from_fn(self.dim, |i, _| {
            (0..n).map(|a| self.anchors[a][i]).sum::<f64>() / n as f64
        })
    }

    /// Diagonal of the anchors' bounding box (at least 1 m).
    pub fn extent(&self) -> f64 {
        let n = self.anchor_count();
        let span: f64 = (0..self.dim)
            .map(|i| {
                let lo = (0..n).map(|a| self.anchors[a][i]).fold(f64::INFINITY, f64::min);
                let hi = (0..n)
                    .map(|a| self.anchors[a][i])
                    .fold(f64::NEG_INFINITY, f64::max);
                (hi - lo).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        span.max(1.0)
    }

    pub(crate) fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_mode(&self, mode: EpochMode) -> Result<()> {
        if mode == EpochMode::WithTransceivers && !self.has_transceivers {
            return Err(Error::MissingTransceivers);
        }
        Ok(())
    }
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Gaussian position prior `x ~ N(mean, precision^-1)`. Zero precision
/// means no prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionPrior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl PositionPrior {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if precision.nrows() != d || precision.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: precision.nrows(),
            });
        }
        if (&precision - precision.transpose()).amax() > 1e-12 * precision.amax().max(1.0) {
            return Err(Error::InvalidParameter("prior precision is not symmetric".into()));
        }
        let min_eig = precision
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-12 * precision.amax().max(1.0) {
            return Err(Error::InvalidParameter(
                "prior precision is not positive semi-definite".into(),
            ));
        }
        Ok(PositionPrior { mean, precision })
    }

    /// No prior information; the mean is a placeholder.
    pub fn none(mean: DVector<f64>) -> Self {
        let d = mean.len();
        PositionPrior {
            mean,
            precision: DMatrix::zeros(d, d),
        }
    }

    /// Independent axes with the given standard deviations, meters.
    pub fn diagonal(mean: DVector<f64>, std_m: &[f64]) -> Result<Self> {
        if std_m.len() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: std_m.len(),
            });
        }
        if std_m.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter(
                "prior standard deviations must be positive".into(),
            ));
        }
        let precision = DMatrix::from_diagonal(&DVector::from_iterator(
            std_m.len(),
            std_m.iter().map(|s| 1.0 / (s * s)),
        ));
        Self::new(mean, precision)
    }

    pub fn isotropic(mean: DVector<f64>, std_m: f64) -> Result<Self> {
        let d = mean.len();
        Self::diagonal(mean, &vec![std_m; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_informative(&self) -> bool {
        self.precision.iter().any(|v| *v != 0.0)
    }

    /// True when the precision is positive definite.
    pub fn is_proper(&self) -> bool {
        self.precision.clone().cholesky().is_some()
    }

    /// Covariance `precision^-1`, when it exists.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        self.precision.clone().cholesky().map(|c| c.inverse())
    }
}

/// Per-epoch noise level specification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    Constant { sigma: f64 },
    /// Each epoch is an outlier with the given probability; outlier epochs
    /// use `factor * sigma`.
    Outliers { sigma: f64, probability: f64, factor: f64 },
}

impl NoiseSchedule {
    pub fn base_sigma(&self) -> f64 {
        match *self {
            NoiseSchedule::Constant { sigma } | NoiseSchedule::Outliers { sigma, .. } => sigma,
        }
    }
}

/// Noise model: timing-device fraction and the RF noise schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub alpha: f64,
    pub schedule: NoiseSchedule,
}

impl NoiseConfig {
    pub fn constant(alpha: f64, sigma: f64) -> Result<Self> {
        let n = NoiseConfig {
            alpha,
            schedule: NoiseSchedule::Constant { sigma },
        };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        let sigma = self.schedule.base_sigma();
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise sigma must be positive, got {sigma}"
            )));
        }
        if let NoiseSchedule::Outliers {
            probability,
            factor,
            ..
        } = self.schedule
        {
            if !(0.0..=1.0).contains(&probability) {
                return Err(Error::InvalidParameter(format!(
                    "outlier probability must lie in [0, 1], got {probability}"
                )));
            }
            if !(factor > 0.0) || !factor.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "outlier factor must be positive, got {factor}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "noise fraction alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Unit-variance noise shape of the full six-interval epoch.
pub fn noise_shape_template(alpha: f64) -> DMatrix<f64> {
    let a2 = alpha * alpha;
    #[rustfmt::skip]
    let q = DMatrix::from_row_slice(6, 6, &[
        1.0 + a2, 0.0,      1.0, 0.0, 0.0, 0.0,
        0.0,      2.0 * a2, 0.0, 0.0, 0.0, 0.0,
        1.0,      0.0,      2.0, 1.0, 0.0, 0.0,
        0.0,      0.0,      1.0, 2.0, 1.0, 0.0,
        0.0,      0.0,      0.0, 1.0, 2.0, 1.0,
        0.0,      0.0,      0.0, 0.0, 1.0, 2.0,
    ]);
    q
}

/// Range-mixing matrix of the full epoch (columns: m, 1, 2, 3).
pub fn range_mixing_template() -> DMatrix<f64> {
    #[rustfmt::skip]
    let g = DMatrix::from_row_slice(6, 4, &[
        -1.0,  0.0,  0.0, 0.0,
         0.0,  0.0,  0.0, 0.0,
         0.0,  0.0,  0.0, 0.0,
        -1.0,  1.0,  0.0, 0.0,
         0.0, -1.0,  1.0, 0.0,
         0.0,  0.0, -1.0, 1.0,
    ]);
    g
}

/// Clock regressor of the full epoch `k`.
pub fn clock_regressor_template(k: usize, master_cycles: u32, node_cycles: u32) -> DMatrix<f64> {
    let lag = (k - 1) as f64;
    let n = node_cycles as f64;
    let m = master_cycles as f64;
    let mut h = DMatrix::zeros(6, 3);
    h[(0, 0)] = 1.0;
    h[(0, 1)] = lag * n;
    h[(0, 2)] = -lag * m;
    h[(1, 1)] = n;
    h[(2, 2)] = m;
    h
}

/// Known system matrices of one epoch, already reduced by `S_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrices {
    pub k: usize,
    pub mode: EpochMode,
    pub s: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl SystemMatrices {
    pub fn len(&self) -> usize {
        self.mode.len()
    }
}

pub fn build_system_matrices(
    k: usize,
    mode: EpochMode,
    scene: &SceneConfig,
    alpha: f64,
) -> Result<SystemMatrices> {
    if k < 1 {
        return Err(Error::InvalidEpoch(k));
    }
    scene.check_mode(mode)?;
    check_alpha(alpha)?;

    let s = mode.selection();
    let mut mu_full = DVector::zeros(6);
    if scene.has_transceivers() {
        let v = scene.prop_speed();
        for i in 0..3 {
            mu_full[3 + i] = scene.anchor_distance(i, i + 1) / v + scene.relay_delay();
        }
    }
    let h = &s * clock_regressor_template(k, scene.master_cycles(), scene.node_cycles());
    let g = &s * range_mixing_template();
    let mu = &s * mu_full;
    let q = &s * noise_shape_template(alpha) * s.transpose();
    Ok(SystemMatrices { k, mode, s, h, g, mu, q })
}

/// Anchor ranges and their Jacobian at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeModel {
    /// Ranges to (m, 1, 2, 3), meters. Absent transceivers give 0.
    pub rho: [f64; 4],
    /// 4 x d matrix of unit direction vectors (rows of absent anchors are zero).
    pub jacobian: DMatrix<f64>,
}

pub fn range_model(x: &[f64], scene: &SceneConfig) -> Result<RangeModel> {
    scene.check_dim(x)?;
    let d = scene.dim();
    let mut rho = [0.0; 4];
    let mut jacobian = DMatrix::zeros(4, d);
    for i in 0..scene.anchor_count() {
        let a = scene.anchor(i).expect("anchor index in range");
        let r = dist(x, a);
        if r == 0.0 {
            return Err(Error::SingularGeometry {
                anchor: ANCHOR_NAMES[i],
                position: x.to_vec(),
            });
        }
        rho[i] = r;
        for j in 0..d {
            jacobian[(i, j)] = (x[j] - a[j]) / r;
        }
    }
    Ok(RangeModel { rho, jacobian })
}

/// Noise-free model output `mu + H c + G rho(x) / v`.
pub fn mean_observation(
    mats: &SystemMatrices,
    clock: &ClockParams,
    x: &[f64],
    scene: &SceneConfig,
) -> Result<DVector<f64>> {
    let ranges = range_model(x, scene)?;
    let rho = DVector::from_column_slice(&ranges.rho);
    Ok(&mats.mu + &mats.h * clock.to_vector() + &mats.g * rho / scene.prop_speed())
}
