//! Fisher information, Cramér-Rao and hybrid Cramér-Rao bounds on the clock
//! parameters.
//!
//! Parameters are ordered `theta = [phi_u, T_u, T_m, x]`. Information is
//! additive over epochs, and the clock bound is the inverse of the Schur
//! complement of the position block.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{gated_inverse, rcond_sym, symmetrize, RCOND_GATE};
use crate::model::{build_system_matrices, range_model, EpochMode, PositionPrior, SceneConfig, SystemMatrices};
use crate::sim::{rng_for, stream};

/// Default number of prior draws for the hybrid bound.
pub const DEFAULT_HCRB_SAMPLES: usize = 500;

/// Accumulated information matrix over `[c; x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoMatrix {
    pub lambda: DMatrix<f64>,
    /// Number of epochs absorbed.
    pub k: usize,
}

impl InfoMatrix {
    pub fn zeros(dim: usize) -> Self {
        InfoMatrix {
            lambda: DMatrix::zeros(3 + dim, 3 + dim),
            k: 0,
        }
    }

    pub fn position_dim(&self) -> usize {
        self.lambda.nrows() - 3
    }

    /// Adds a prior precision to the position block (does not count as an epoch).
    pub fn with_position_prior(mut self, precision: &DMatrix<f64>) -> Result<Self> {
        let d = self.position_dim();
        if precision.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: precision.nrows(),
            });
        }
        let mut block = self.lambda.view_mut((3, 3), (d, d));
        block += precision;
        Ok(self)
    }
}

/// Clock-parameter bound.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundResult {
    /// 3 x 3 bound on `[phi_u, T_u, T_m]`, ns^2.
    pub crb_clock: DMatrix<f64>,
    /// Root of the diagonal, ns.
    pub sqrt_diag: [f64; 3],
    pub k: usize,
}

impl BoundResult {
    pub fn phi(&self) -> f64 {
        self.sqrt_diag[0]
    }
}

/// Whitened, `x`-independent part of one epoch's design.
#[derive(Clone, Debug)]
struct WhitenedDesign {
    /// `L^-1 H`, with `Q = L L^T`.
    h: DMatrix<f64>,
    /// `L^-1 G`.
    g: DMatrix<f64>,
}

impl WhitenedDesign {
    fn new(mats: &SystemMatrices) -> Self {
        let chol = mats.q.clone().cholesky().expect("noise shape is positive definite");
        let l = chol.l();
        let h = l.solve_lower_triangular(&mats.h).expect("triangular solve");
        let g = l.solve_lower_triangular(&mats.g).expect("triangular solve");
        WhitenedDesign { h, g }
    }
}

/// Single-epoch information `J_k(x, sigma^2)` from prebuilt system matrices.
pub fn fisher_info_from(
    mats: &SystemMatrices,
    x: &[f64],
    sigma_sq: f64,
    scene: &SceneConfig,
) -> Result<InfoMatrix> {
    if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise variance must be positive, got {sigma_sq}"
        )));
    }
    let ranges = range_model(x, scene)?;
    let w = WhitenedDesign::new(mats);
    let d = scene.dim();
    let n = mats.len();
    let gx = &w.g * &ranges.jacobian / scene.prop_speed();
    let mut b = DMatrix::zeros(n, 3 + d);
    b.columns_mut(0, 3).copy_from(&w.h);
    b.columns_mut(3, d).copy_from(&gx);
    let mut lambda = b.transpose() * &b / sigma_sq;
    symmetrize(&mut lambda);
    Ok(InfoMatrix { lambda, k: 1 })
}

/// Single-epoch Fisher information of `[c; x]`. Independent of the clock values.
pub fn fisher_info(
    x: &[f64],
    sigma_sq: f64,
    k: usize,
    mode: EpochMode,
    scene: &SceneConfig,
    alpha: f64,
) -> Result<InfoMatrix> {
    let mats = build_system_matrices(k, mode, scene, alpha)?;
    fisher_info_from(&mats, x, sigma_sq, scene)
}

pub fn accumulate_info(prev: &InfoMatrix, j: &InfoMatrix) -> Result<InfoMatrix> {
    if prev.lambda.shape() != j.lambda.shape() {
        return Err(Error::DimensionMismatch {
            expected: prev.lambda.nrows(),
            found: j.lambda.nrows(),
        });
    }
    let mut lambda = &prev.lambda + &j.lambda;
    symmetrize(&mut lambda);
    Ok(InfoMatrix {
        lambda,
        k: prev.k + j.k,
    })
}

/// `(Lambda_c - Lambda_xc^T Lambda_x^-1 Lambda_xc)^-1`.
pub fn crb_clock(info: &InfoMatrix) -> Result<BoundResult> {
    let d = info.position_dim();
    let lc = info.lambda.view((0, 0), (3, 3)).clone_owned();
    let lxc = info.lambda.view((3, 0), (d, 3)).clone_owned();
    let lx = info.lambda.view((3, 3), (d, d)).clone_owned();
    let lx_inv = gated_inverse(&lx).ok_or_else(|| {
        Error::NotIdentifiable(format!(
            "position information block has rcond {:.3e} <= {RCOND_GATE:e}",
            rcond_sym(&lx)
        ))
    })?;
    let mut schur = lc - lxc.transpose() * lx_inv * &lxc;
    symmetrize(&mut schur);
    let crb = gated_inverse(&schur).ok_or_else(|| {
        Error::NotIdentifiable(format!(
            "clock Schur complement has rcond {:.3e} <= {RCOND_GATE:e}",
            rcond_sym(&schur)
        ))
    })?;
    let sqrt_diag = [crb[(0, 0)].sqrt(), crb[(1, 1)].sqrt(), crb[(2, 2)].sqrt()];
    if sqrt_diag.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::NotIdentifiable("non-positive bound diagonal".into()));
    }
    Ok(BoundResult {
        crb_clock: crb,
        sqrt_diag,
        k: info.k,
    })
}

/// Running sums of the position-independent design products
/// `sum_k sigma_k^-2 [Hw^T Hw, Hw^T Gw, Gw^T Gw]`. Any accumulated
/// information matrix is then assembled in O(1) per position.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignSums {
    hh: DMatrix<f64>,
    hg: DMatrix<f64>,
    gg: DMatrix<f64>,
    k: usize,
}

impl Default for DesignSums {
    fn default() -> Self {
        DesignSums {
            hh: DMatrix::zeros(3, 3),
            hg: DMatrix::zeros(3, 4),
            gg: DMatrix::zeros(4, 4),
            k: 0,
        }
    }
}

impl DesignSums {
    pub fn absorb(&mut self, mats: &SystemMatrices, sigma_sq: f64) {
        let w = WhitenedDesign::new(mats);
        let ht = w.h.transpose();
        self.hh += &ht * &w.h / sigma_sq;
        self.hg += &ht * &w.g / sigma_sq;
        self.gg += w.g.transpose() * &w.g / sigma_sq;
        self.k += 1;
    }

    pub fn epochs(&self) -> usize {
        self.k
    }

    fn assemble(&self, xc: &DMatrix<f64>, xx: &DMatrix<f64>) -> InfoMatrix {
        let d = xx.nrows();
        let mut lambda = DMatrix::zeros(3 + d, 3 + d);
        lambda.view_mut((0, 0), (3, 3)).copy_from(&self.hh);
        lambda.view_mut((0, 3), (3, d)).copy_from(xc);
        lambda.view_mut((3, 0), (d, 3)).copy_from(&xc.transpose());
        lambda.view_mut((3, 3), (d, d)).copy_from(xx);
        symmetrize(&mut lambda);
        InfoMatrix { lambda, k: self.k }
    }

    /// `Lambda_k(x)`: the sum of the absorbed epochs' Fisher information at `x`.
    pub fn info_at(&self, x: &[f64], scene: &SceneConfig) -> Result<InfoMatrix> {
        let gamma = range_model(x, scene)?.jacobian / scene.prop_speed();
        let xc = &self.hg * &gamma;
        let xx = gamma.transpose() * &self.gg * &gamma;
        Ok(self.assemble(&xc, &xx))
    }

    /// `E_x[Lambda_k(x)]` over the given position samples.
    pub fn mean_info(&self, samples: &[DVector<f64>], scene: &SceneConfig) -> Result<InfoMatrix> {
        let d = scene.dim();
        let v = scene.prop_speed();
        let mut gamma_mean = DMatrix::zeros(4, d);
        let mut xx = DMatrix::zeros(d, d);
        for x in samples {
            let gamma = range_model(x.as_slice(), scene)?.jacobian / v;
            xx += gamma.transpose() * &self.gg * &gamma;
            gamma_mean += gamma;
        }
        let n = samples.len() as f64;
        gamma_mean /= n;
        xx /= n;
        let xc = &self.hg * gamma_mean;
        Ok(self.assemble(&xc, &xx))
    }
}

fn check_schedule(modes: &[EpochMode], sigmas: &[f64]) -> Result<()> {
    if modes.is_empty() {
        return Err(Error::InvalidParameter("at least one epoch is required".into()));
    }
    if modes.len() != sigmas.len() {
        return Err(Error::DimensionMismatch {
            expected: modes.len(),
            found: sigmas.len(),
        });
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {s}")));
    }
    Ok(())
}

/// Design sums after each epoch listed in `checkpoints` (sorted, 1-based,
/// at most `modes.len()`).
pub fn design_checkpoints(
    scene: &SceneConfig,
    modes: &[EpochMode],
    sigmas: &[f64],
    alpha: f64,
    checkpoints: &[usize],
) -> Result<Vec<DesignSums>> {
    check_schedule(modes, sigmas)?;
    let mut sums = DesignSums::default();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    for (i, (&mode, &sigma)) in modes.iter().zip(sigmas).enumerate() {
        let k = i + 1;
        let mats = build_system_matrices(k, mode, scene, alpha)?;
        sums.absorb(&mats, sigma * sigma);
        while next.peek() == Some(&&k) {
            out.push(sums.clone());
            next.next();
        }
    }
    if next.peek().is_some() {
        return Err(Error::InvalidParameter(
            "checkpoints must be sorted and not exceed the epoch count".into(),
        ));
    }
    Ok(out)
}

/// Clock CRB at a fixed position after `modes.len()` epochs, optionally with
/// a position prior precision added to the position block.
pub fn crb_at(
    x: &[f64],
    scene: &SceneConfig,
    modes: &[EpochMode],
    sigmas: &[f64],
    alpha: f64,
    prior_precision: Option<&DMatrix<f64>>,
) -> Result<BoundResult> {
    let sums = design_checkpoints(scene, modes, sigmas, alpha, &[modes.len()])?;
    let mut info = sums[0].info_at(x, scene)?;
    if let Some(p) = prior_precision {
        info = info.with_position_prior(p)?;
    }
    crb_clock(&info)
}

/// Draws `n` positions from the prior.
pub fn sample_prior<R: Rng + ?Sized>(prior: &PositionPrior, n: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
    let cov = prior
        .covariance()
        .ok_or_else(|| Error::InvalidParameter("prior precision must be positive definite".into()))?;
    let root = cov
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("prior covariance is not positive definite".into()))?
        .l();
    let d = prior.dim();
    Ok((0..n)
        .map(|_| {
            let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            &prior.mean + &root * z
        })
        .collect())
}

fn hybrid_from(sums: &DesignSums, samples: &[DVector<f64>], prior: &PositionPrior, scene: &SceneConfig) -> Result<BoundResult> {
    let info = sums.mean_info(samples, scene)?.with_position_prior(&prior.precision)?;
    crb_clock(&info)
}

/// Hybrid CRB: prior-averaged information plus the prior precision.
pub fn hcrb_clock(
    prior: &PositionPrior,
    scene: &SceneConfig,
    modes: &[EpochMode],
    sigmas: &[f64],
    alpha: f64,
    n_samples: usize,
    seed: u64,
) -> Result<BoundResult> {
    let mut traj = hcrb_trajectory(prior, scene, modes, sigmas, alpha, n_samples, seed, &[modes.len()])?;
    traj.pop().expect("one checkpoint").1
}

/// Hybrid CRB at each checkpoint, sharing one set of prior draws.
#[allow(clippy::too_many_arguments)]
pub fn hcrb_trajectory(
    prior: &PositionPrior,
    scene: &SceneConfig,
    modes: &[EpochMode],
    sigmas: &[f64],
    alpha: f64,
    n_samples: usize,
    seed: u64,
    checkpoints: &[usize],
) -> Result<Vec<(usize, Result<BoundResult>)>> {
    if n_samples < 1 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    if prior.dim() != scene.dim() {
        return Err(Error::DimensionMismatch {
            expected: scene.dim(),
            found: prior.dim(),
        });
    }
    let mut rng = rng_for(seed, &[stream::BOUNDS]);
    let samples = sample_prior(prior, n_samples, &mut rng)?;
    let sums = design_checkpoints(scene, modes, sigmas, alpha, checkpoints)?;
    Ok(checkpoints
        .iter()
        .zip(&sums)
        .map(|(&k, s)| (k, hybrid_from(s, &samples, prior, scene)))
        .collect())
}

/// CRB at a fixed position at each checkpoint.
pub fn crb_trajectory(
    x: &[f64],
    scene: &SceneConfig,
    modes: &[EpochMode],
    sigmas: &[f64],
    alpha: f64,
    prior_precision: Option<&DMatrix<f64>>,
    checkpoints: &[usize],
) -> Result<Vec<(usize, Result<BoundResult>)>> {
    let sums = design_checkpoints(scene, modes, sigmas, alpha, checkpoints)?;
    Ok(checkpoints
        .iter()
        .zip(&sums)
        .map(|(&k, s)| {
            let r = s.info_at(x, scene).and_then(|info| match prior_precision {
                Some(p) => info.with_position_prior(p),
                None => Ok(info),
            });
            (k, r.and_then(|info| crb_clock(&info)))
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// CRB with the node at each grid point.
    Crb,
    /// Hybrid CRB with the prior mean at each grid point.
    Hcrb,
}

/// One map cell; `sqrt_bound_phi` is `None` where the bound is unavailable.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub position: [f64; 2],
    pub sqrt_bound_phi: Option<f64>,
}

/// Settings shared by every cell of a bound map.
#[derive(Clone, Debug)]
pub struct MapSettings {
    pub kind: BoundKind,
    pub mode: EpochMode,
    pub sigma: f64,
    pub epochs: usize,
    pub alpha: f64,
    /// Prior precision (required for `Hcrb`, ignored for `Crb`).
    pub prior_precision: Option<DMatrix<f64>>,
    pub n_samples: usize,
    pub seed: u64,
}

/// Rectangular lattice of `nx * ny` points, row-major in the second coordinate.
pub fn lattice(lo: [f64; 2], hi: [f64; 2], nx: usize, ny: usize) -> Vec<[f64; 2]> {
    let step = |l: f64, h: f64, n: usize, i: usize| {
        if n <= 1 {
            l
        } else {
            l + (h - l) * i as f64 / (n - 1) as f64
        }
    };
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| [step(lo[0], hi[0], nx, i), step(lo[1], hi[1], ny, j)]))
        .collect()
}

/// Root bound of `phi_u` at each grid point. Per-point failures leave the
/// cell empty.
pub fn bound_map(grid: &[[f64; 2]], settings: &MapSettings, scene: &SceneConfig) -> Result<Vec<MapPoint>> {
    if scene.dim() != 2 {
        return Err(Error::InvalidParameter("bound maps are two-dimensional".into()));
    }
    if settings.epochs < 1 {
        return Err(Error::InvalidParameter("epochs must be >= 1".into()));
    }
    let modes = vec![settings.mode; settings.epochs];
    let sigmas = vec![settings.sigma; settings.epochs];
    let sums = design_checkpoints(scene, &modes, &sigmas, settings.alpha, &[settings.epochs])?
        .pop()
        .expect("one checkpoint");
    let precision = match settings.kind {
        BoundKind::Crb => None,
        BoundKind::Hcrb => Some(settings.prior_precision.clone().ok_or_else(|| {
            Error::InvalidParameter("hybrid bound map requires a prior precision".into())
        })?),
    };
    if let Some(p) = &precision {
        PositionPrior::new(DVector::zeros(2), p.clone())?;
        if p.clone().cholesky().is_none() {
            return Err(Error::InvalidParameter("prior precision must be positive definite".into()));
        }
    }
    let points = grid
        .par_iter()
        .enumerate()
        .map(|(idx, p)| {
            let bound = match &precision {
                None => sums.info_at(p, scene).and_then(|i| crb_clock(&i)),
                Some(prec) => {
                    let prior = PositionPrior {
                        mean: DVector::from_column_slice(p),
                        precision: prec.clone(),
                    };
                    let mut rng = rng_for(settings.seed, &[stream::BOUNDS, idx as u64]);
                    sample_prior(&prior, settings.n_samples.max(1), &mut rng)
                        .and_then(|s| hybrid_from(&sums, &s, &prior, scene))
                }
            };
            MapPoint {
                position: *p,
                sqrt_bound_phi: bound.ok().map(|b| b.phi()),
            }
        })
        .collect();
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mean_observation, ClockParams};
    use approx::assert_relative_eq;

    const X: [f64; 2] = [9.0, 8.0];

    fn all(mode: EpochMode, k: usize) -> Vec<EpochMode> {
        vec![mode; k]
    }

    #[test]
    fn info_is_psd_with_rank_five() {
        let sc = SceneConfig::reference();
        let j = fisher_info(&X, 4.0, 1, EpochMode::WithTransceivers, &sc, 0.1).unwrap();
        assert_eq!(j.lambda, j.lambda.transpose());
        let eig = j.lambda.clone().symmetric_eigenvalues();
        let max = eig.max();
        assert!(eig.iter().all(|e| *e >= -1e-12 * max));
        assert!(j.lambda.rank(1e-10 * max) >= 5);
    }

    #[test]
    fn info_scales_with_inverse_variance() {
        let sc = SceneConfig::reference();
        let a = fisher_info(&X, 4.0, 3, EpochMode::WithTransceivers, &sc, 0.1).unwrap();
        let b = fisher_info(&X, 16.0, 3, EpochMode::WithTransceivers, &sc, 0.1).unwrap();
        assert_relative_eq!(a.lambda / 4.0, b.lambda, max_relative = 1e-14);
    }

    #[test]
    fn accumulation_is_additive() {
        let sc = SceneConfig::reference();
        let j = fisher_info(&X, 4.0, 2, EpochMode::WithTransceivers, &sc, 0.1).unwrap();
        let zero = InfoMatrix::zeros(2);
        assert_eq!(accumulate_info(&zero, &j).unwrap().lambda, j.lambda);
        let two = accumulate_info(&j, &j).unwrap();
        assert_eq!(two.lambda, &j.lambda * 2.0);
        assert_eq!(two.k, 2);
        assert!(accumulate_info(&InfoMatrix::zeros(3), &j).is_err());
    }

    #[test]
    fn repeated_epoch_scales_bound() {
        let sc = SceneConfig::reference();
        let j = fisher_info(&X, 4.0, 7, EpochMode::WithTransceivers, &sc, 0.1).unwrap();
        let single = crb_clock(&j).unwrap();
        let mut acc = InfoMatrix::zeros(2);
        for _ in 0..5 {
            acc = accumulate_info(&acc, &j).unwrap();
        }
        let five = crb_clock(&acc).unwrap();
        assert_relative_eq!(five.crb_clock * 5.0, single.crb_clock, max_relative = 1e-8);
    }

    #[test]
    fn block_diagonal_reduces_to_clock_inverse() {
        let mut lambda = DMatrix::zeros(5, 5);
        let lc = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        lambda.view_mut((0, 0), (3, 3)).copy_from(&lc);
        lambda[(3, 3)] = 7.0;
        lambda[(4, 4)] = 2.0;
        let b = crb_clock(&InfoMatrix { lambda, k: 1 }).unwrap();
        assert_relative_eq!(b.crb_clock, lc.try_inverse().unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn master_only_without_prior_is_not_identifiable() {
        let sc = SceneConfig::reference_master_only();
        let mut acc = InfoMatrix::zeros(2);
        for k in 1..=20 {
            let j = fisher_info(&X, 4.0, k, EpochMode::MasterOnly, &sc, 0.1).unwrap();
            acc = accumulate_info(&acc, &j).unwrap();
        }
        assert!(matches!(crb_clock(&acc), Err(Error::NotIdentifiable(_))));
    }

    #[test]
    fn info_ignores_clock_values() {
        // information depends on the mean's derivative, which is the same
        // for every clock value: compare finite-difference Jacobians
        let sc = SceneConfig::reference();
        let mats = build_system_matrices(3, EpochMode::WithTransceivers, &sc, 0.1).unwrap();
        let jac = |c: ClockParams| {
            let h = 1e-3;
            let base = c.to_vector();
            let mut cols = Vec::new();
            for i in 0..5 {
                let eval = |s: f64| {
                    let mut th = base.clone();
                    let mut x = X;
                    if i < 3 {
                        th[i] += s;
                    } else {
                        x[i - 3] += s;
                    }
                    mean_observation(&mats, &ClockParams::from_slice(th.as_slice()), &x, &sc).unwrap()
                };
                cols.push((eval(h) - eval(-h)) / (2.0 * h));
            }
            DMatrix::from_columns(&cols)
        };
        let a = jac(ClockParams::new(40.0, 50.0, 50.0).unwrap());
        let b = jac(ClockParams::new(3.0, 51.3, 49.1).unwrap());
        assert_relative_eq!(a, b, epsilon = 1e-6);
    }

    #[test]
    fn design_sums_match_direct_accumulation() {
        let sc = SceneConfig::reference();
        let modes: Vec<_> = (0..12)
            .map(|i| if i % 3 == 0 { EpochMode::MasterOnly } else { EpochMode::WithTransceivers })
            .collect();
        let sigmas: Vec<f64> = (0..12).map(|i| 1.0 + 0.25 * i as f64).collect();
        let sums = design_checkpoints(&sc, &modes, &sigmas, 0.1, &[12]).unwrap();
        let fast = sums[0].info_at(&X, &sc).unwrap();
        let mut slow = InfoMatrix::zeros(2);
        for (i, (m, s)) in modes.iter().zip(&sigmas).enumerate() {
            let j = fisher_info(&X, s * s, i + 1, *m, &sc, 0.1).unwrap();
            slow = accumulate_info(&slow, &j).unwrap();
        }
        assert_eq!(fast.k, 12);
        assert_relative_eq!(fast.lambda, slow.lambda, max_relative = 1e-10);
    }

    #[test]
    fn hcrb_is_deterministic_per_seed() {
        let sc = SceneConfig::reference_master_only();
        let prior = PositionPrior::isotropic(DVector::from_column_slice(&X), 0.2).unwrap();
        let m = all(EpochMode::MasterOnly, 50);
        let s = vec![2.0; 50];
        let a = hcrb_clock(&prior, &sc, &m, &s, 0.1, 1, 3).unwrap();
        let b = hcrb_clock(&prior, &sc, &m, &s, 0.1, 1, 3).unwrap();
        assert_eq!(a, b);
        let tight = PositionPrior::isotropic(DVector::from_column_slice(&X), 1e-9).unwrap();
        let a = hcrb_clock(&tight, &sc, &m, &s, 0.1, 1, 3).unwrap();
        let b = hcrb_clock(&tight, &sc, &m, &s, 0.1, 1, 4).unwrap();
        assert_relative_eq!(a.crb_clock, b.crb_clock, max_relative = 1e-9);
        assert!(hcrb_clock(&PositionPrior::none(DVector::from_column_slice(&X)), &sc, &m, &s, 0.1, 10, 0).is_err());
        assert!(hcrb_clock(&prior, &sc, &m, &s, 0.1, 0, 0).is_err());
    }

    #[test]
    fn lattice_layout() {
        let g = lattice([0.0, 0.0], [12.0, 12.0], 25, 25);
        assert_eq!(g.len(), 625);
        assert_eq!(g[1], [0.5, 0.0]);
        assert_eq!(g[25], [0.0, 0.5]);
        assert_eq!(g[624], [12.0, 12.0]);
    }

    #[test]
    fn map_marks_anchor_cells_missing() {
        let sc = SceneConfig::reference();
        let settings = MapSettings {
            kind: BoundKind::Crb,
            mode: EpochMode::WithTransceivers,
            sigma: 5.0,
            epochs: 20,
            alpha: 0.1,
            prior_precision: None,
            n_samples: 1,
            seed: 0,
        };
        let pts = bound_map(&[[1.0, 1.0], [9.0, 8.0]], &settings, &sc).unwrap();
        assert!(pts[0].sqrt_bound_phi.is_none());
        let direct = crb_at(&X, &sc, &all(EpochMode::WithTransceivers, 20), &[5.0; 20], 0.1, None).unwrap();
        assert_eq!(pts[1].sqrt_bound_phi, Some(direct.phi()));
    }

    #[test]
    fn schur_matches_full_inverse_block() {
        let sc = SceneConfig::reference();
        for k in [1, 3, 10, 100, 500] {
            let modes = all(EpochMode::WithTransceivers, k);
            let sums = design_checkpoints(&sc, &modes, &vec![2.0; k], 0.1, &[k]).unwrap();
            let info = sums[0].info_at(&X, &sc).unwrap();
            let crb = crb_clock(&info).unwrap();
            let full = info.lambda.clone().cholesky().unwrap().inverse();
            let block = full.view((0, 0), (3, 3)).clone_owned();
            assert_relative_eq!(crb.crb_clock, block, max_relative = 1e-8);
        }
    }

    #[test]
    fn info_matches_gauss_newton_differences() {
        let sc = SceneConfig::reference();
        let sigma_sq = 4.0;
        for k in [1, 7, 250] {
            let mats = build_system_matrices(k, EpochMode::WithTransceivers, &sc, 0.1).unwrap();
            let j = fisher_info_from(&mats, &X, sigma_sq, &sc).unwrap();
            let theta = [40.0, 50.0, 50.0, X[0], X[1]];
            let mean = |t: &[f64]| {
                let c = ClockParams::new(t[0], t[1], t[2]).unwrap();
                mean_observation(&mats, &c, &t[3..], &sc).unwrap()
            };
            let h = 1e-4;
            let cols: Vec<_> = (0..5)
                .map(|i| {
                    let (mut up, mut dn) = (theta, theta);
                    up[i] += h;
                    dn[i] -= h;
                    (mean(&up) - mean(&dn)) / (2.0 * h)
                })
                .collect();
            let d = DMatrix::from_columns(&cols);
            let cov_inv = (&mats.q * sigma_sq).try_inverse().unwrap();
            let gn = d.transpose() * cov_inv * &d;
            let scale = gn.amax();
            for (a, b) in j.lambda.iter().zip(gn.iter()) {
                let tol = 1e-4 * a.abs().max(b.abs()) + 1e-12 * scale;
                assert!((a - b).abs() <= tol, "k = {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn crb_is_monotone_in_epochs() {
        let sc = SceneConfig::reference();
        let k_max = 60;
        let checkpoints: Vec<usize> = (1..=k_max).collect();
        let traj = crb_trajectory(
            &X,
            &sc,
            &all(EpochMode::WithTransceivers, k_max),
            &vec![2.0; k_max],
            0.1,
            None,
            &checkpoints,
        )
        .unwrap();
        let bounds: Vec<[f64; 3]> = traj.into_iter().map(|(_, b)| b.unwrap().sqrt_diag).collect();
        for w in bounds.windows(2) {
            for p in 0..3 {
                assert!(w[1][p] <= w[0][p] * (1.0 + 1e-12), "{:?} -> {:?}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn sub_nanosecond_phase_bound_by_ten_epochs() {
        let sc = SceneConfig::reference();
        let b = crb_at(&X, &sc, &all(EpochMode::WithTransceivers, 10), &[2.0; 10], 0.1, None).unwrap();
        assert!(b.phi() < 1.0, "{}", b.phi());
    }

    #[test]
    fn tight_prior_hcrb_approaches_crb_at_mean() {
        let sc = SceneConfig::reference_master_only();
        let prior = PositionPrior::isotropic(DVector::from_column_slice(&X), 1e-4).unwrap();
        let modes = all(EpochMode::MasterOnly, 100);
        let sigmas = vec![2.0; 100];
        let h = hcrb_clock(&prior, &sc, &modes, &sigmas, 0.1, 200, 5).unwrap();
        let c = crb_at(&X, &sc, &modes, &sigmas, 0.1, Some(&prior.precision)).unwrap();
        for p in 0..3 {
            let gap = (h.sqrt_diag[p] - c.sqrt_diag[p]).abs() / c.sqrt_diag[p];
            assert!(gap < 0.02, "parameter {p}: gap {gap}");
        }
    }

    #[test]
    fn anisotropic_prior_bound_depends_on_direction() {
        let sc = SceneConfig::reference_master_only();
        let precision = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0 / 0.01, 1.0 / 1e-4]));
        let settings = MapSettings {
            kind: BoundKind::Hcrb,
            mode: EpochMode::MasterOnly,
            sigma: 5.0,
            epochs: 250,
            alpha: 0.1,
            prior_precision: Some(precision),
            n_samples: 200,
            seed: 1,
        };
        let pts = bound_map(&[[9.0, 1.0], [1.0, 9.0], [7.0, 7.0]], &settings, &sc).unwrap();
        let along_first = pts[0].sqrt_bound_phi.unwrap();
        let along_second = pts[1].sqrt_bound_phi.unwrap();
        assert!(along_first > 1.1 * along_second, "{along_first} vs {along_second}");
        assert!(pts.iter().all(|p| p.sqrt_bound_phi.unwrap() < 1.0));
    }
}
