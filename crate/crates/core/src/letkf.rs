//! Local ensemble transform Kalman filter.
//!
//! Every grid point solves its own analysis in the `N_e`-dimensional space
//! spanned by the forecast perturbations, using only observations within the
//! Gaspari-Cohn support and weighting `R^{-1}` by the taper:
//!
//! ```text
//! Q      = (N_e - 1)/beta I + dY^T R_loc^{-1} dY
//! P~a    = Q^{-1}
//! w_mean = P~a dY^T R_loc^{-1} (y - y_mean)
//! W      = [(N_e - 1) P~a]^{1/2}          (symmetric square root)
//! x_m    = x_mean + dX (w_mean + W[:, m])
//! ```
//!
//! `Q` is symmetric positive definite, so both its inverse and the square
//! root come from one eigendecomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::Observation;

pub const DEFAULT_BASELINE_INFLATION: f64 = 1.1;
pub const DEFAULT_GENERATIVE_INFLATION: f64 = 1.0;
const EIGEN_FLOOR: f64 = 1e-10;

/// Ensemble states, one member per column (`N x N_e`).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMatrix {
    pub members: DMatrix<f64>,
}

impl EnsembleMatrix {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() == 0 || members.nrows() == 0 {
            return Err(Error::Shape("empty ensemble".into()));
        }
        if !members.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidState("non-finite ensemble entry".into()));
        }
        Ok(EnsembleMatrix { members })
    }

    /// Builds from member-major data (`members` rows of `n` values each).
    pub fn from_member_rows(n: usize, members: usize, data: &[f64]) -> Self {
        EnsembleMatrix {
            members: DMatrix::from_column_slice(n, members, data),
        }
    }

    pub fn from_states(states: &[Vec<f64>]) -> Result<Self> {
        let n = states.first().map(|s| s.len()).unwrap_or(0);
        if states.iter().any(|s| s.len() != n) {
            return Err(Error::Shape("members differ in length".into()));
        }
        let flat: Vec<f64> = states.iter().flatten().copied().collect();
        EnsembleMatrix::new(DMatrix::from_column_slice(n, states.len(), &flat))
    }

    pub fn n(&self) -> usize {
        self.members.nrows()
    }

    pub fn n_ensembles(&self) -> usize {
        self.members.ncols()
    }

    pub fn member(&self, m: usize) -> Vec<f64> {
        self.members.column(m).iter().copied().collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Sample standard deviation across members at every grid point.
    pub fn spread(&self) -> Vec<f64> {
        let ne = self.n_ensembles();
        if ne < 2 {
            return vec![0.0; self.n()];
        }
        let mean = self.mean();
        (0..self.n())
            .map(|i| {
                let ss: f64 = self.members.row(i).iter().map(|v| (v - mean[i]).powi(2)).sum();
                (ss / (ne - 1) as f64).sqrt()
            })
            .collect()
    }

    /// Grid-averaged member standard deviation.
    pub fn mean_spread(&self) -> f64 {
        let s = self.spread();
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Ensemble mean and perturbation matrix `dX` (columns `x_m - mean`).
pub fn ensemble_stats(x: &EnsembleMatrix) -> (DVector<f64>, DMatrix<f64>) {
    let mean = x.mean();
    let mut perts = x.members.clone();
    for mut col in perts.column_iter_mut() {
        col -= &mean;
    }
    (mean, perts)
}

/// Fifth-order piecewise-rational compactly supported correlation with
/// half-width `c`: 1 at `r = 0`, 0 for `r >= 2c`.
pub fn gaspari_cohn(r: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::Config(format!(
            "Gaspari-Cohn half-width must be positive, got {c}"
        )));
    }
    let z = r.abs() / c;
    let w = if z <= 1.0 {
        (((-0.25 * z + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z * z + 1.0
    } else if z < 2.0 {
        ((((z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z + 4.0 - 2.0 / (3.0 * z)
    } else {
        0.0
    };
    Ok(w.max(0.0))
}

/// Localization cutoff `d = 2 (p - 1) dx`, widened to `2 dx` for dense observations.
pub fn default_cutoff(interval_p: usize, grid_spacing: f64) -> f64 {
    if interval_p <= 1 {
        2.0 * grid_spacing
    } else {
        2.0 * (interval_p - 1) as f64 * grid_spacing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LetkfConfig {
    pub inflation: f64,
    pub obs_error_var: f64,
    pub interval_p: usize,
    pub grid_spacing: f64,
    pub cutoff_d: f64,
}

impl LetkfConfig {
    pub fn for_interval(interval_p: usize, inflation: f64, obs_error_var: f64) -> Self {
        LetkfConfig {
            inflation,
            obs_error_var,
            interval_p,
            grid_spacing: 1.0,
            cutoff_d: default_cutoff(interval_p, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inflation >= 1.0 && self.inflation.is_finite()) {
            return Err(Error::Config(format!("inflation must be >= 1, got {}", self.inflation)));
        }
        if !(self.obs_error_var > 0.0) {
            return Err(Error::Config("observation error variance must be positive".into()));
        }
        if !(self.cutoff_d >= 0.0) || !(self.grid_spacing > 0.0) {
            return Err(Error::Config(
                "need a non-negative localization cutoff and a positive grid spacing".into(),
            ));
        }
        Ok(())
    }

    /// Gaspari-Cohn half-width; the support `2c` equals the cutoff.
    pub fn half_width(&self) -> f64 {
        self.cutoff_d / 2.0
    }
}

/// Observations influencing one grid point and their taper weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSelection {
    /// Positions into `Observation::values` / `indices`.
    pub obs: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn ring_distance(i: usize, j: usize, n: usize) -> usize {
    let d = i.abs_diff(j);
    d.min(n - d)
}

pub fn local_obs_selection(grid_i: usize, n: usize, obs: &Observation, cfg: &LetkfConfig) -> Result<LocalSelection> {
    let c = cfg.half_width();
    let mut sel = LocalSelection {
        obs: Vec::new(),
        weights: Vec::new(),
    };
    // a zero cutoff tapers every observation to nothing, the collocated one included
    if c == 0.0 {
        return Ok(sel);
    }
    for (k, &j) in obs.indices.iter().enumerate() {
        let r = ring_distance(grid_i, j, n) as f64 * cfg.grid_spacing;
        let w = gaspari_cohn(r, c)?;
        if w > 0.0 {
            sel.obs.push(k);
            sel.weights.push(w);
        }
    }
    Ok(sel)
}

/// Ensemble-space weights of one local analysis.
#[derive(Debug, Clone)]
pub struct Transform {
    pub w_mean: DVector<f64>,
    pub w_perts: DMatrix<f64>,
    pub p_tilde: DMatrix<f64>,
}

/// Solves the ensemble-space problem for observation perturbations `dy`
/// (`k x N_e`), innovations `y - y_mean`, and diagonal `R_loc^{-1}`.
pub fn ensemble_transform(
    dy: &DMatrix<f64>,
    innovation: &DVector<f64>,
    rinv: &DVector<f64>,
    inflation: f64,
) -> std::result::Result<Transform, f64> {
    let ne = dy.ncols();
    let scale = (ne - 1) as f64;
    // dY^T R^{-1}, built row-weighted to avoid forming a dense R
    let mut weighted = dy.clone();
    for (mut row, &r) in weighted.row_iter_mut().zip(rinv.iter()) {
        row *= r;
    }
    let mut q = dy.transpose() * &weighted;
    for i in 0..ne {
        q[(i, i)] += scale / inflation;
    }
    let eig = SymmetricEigen::new(q);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if !(lmin > EIGEN_FLOOR * lmax) {
        return Err(lmin);
    }
    let v = &eig.eigenvectors;
    let inv = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| (scale / l).sqrt()));
    let p_tilde = v * inv * v.transpose();
    let w_perts = v * sqrt * v.transpose();
    let w_mean = &p_tilde * (weighted.transpose() * innovation);
    Ok(Transform {
        w_mean,
        w_perts,
        p_tilde,
    })
}

/// Precomputed global quantities shared by all local problems.
struct Prepared<'a> {
    mean: DVector<f64>,
    perts: DMatrix<f64>,
    obs: &'a Observation,
}

impl<'a> Prepared<'a> {
    fn new(xf: &EnsembleMatrix, obs: &'a Observation, cfg: &LetkfConfig) -> Result<Self> {
        cfg.validate()?;
        if xf.n_ensembles() < 2 {
            return Err(Error::Shape("LETKF needs at least two members".into()));
        }
        if !xf.members.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidState("non-finite forecast ensemble".into()));
        }
        if obs.values.len() != obs.indices.len() {
            return Err(Error::Shape("observation values and indices differ".into()));
        }
        if let Some(&bad) = obs.indices.iter().find(|&&j| j >= xf.n()) {
            return Err(Error::IndexOutOfRange { index: bad, n: xf.n() });
        }
        let (mean, perts) = ensemble_stats(xf);
        Ok(Prepared { mean, perts, obs })
    }

    fn local(&self, grid_i: usize, cfg: &LetkfConfig) -> Result<Vec<f64>> {
        let n = self.mean.len();
        let ne = self.perts.ncols();
        let sel = local_obs_selection(grid_i, n, self.obs, cfg)?;
        let xbar = self.mean[grid_i];
        let dx = self.perts.row(grid_i);
        if sel.obs.is_empty() {
            let s = cfg.inflation.sqrt();
            return Ok(dx.iter().map(|&d| xbar + s * d).collect());
        }
        let k = sel.obs.len();
        let mut dy = DMatrix::zeros(k, ne);
        let mut innov = DVector::zeros(k);
        let mut rinv = DVector::zeros(k);
        for (row, (&o, &w)) in sel.obs.iter().zip(&sel.weights).enumerate() {
            let j = self.obs.indices[o];
            dy.row_mut(row).copy_from(&self.perts.row(j));
            innov[row] = self.obs.values[o] - self.mean[j];
            rinv[row] = w / cfg.obs_error_var;
        }
        let tr = ensemble_transform(&dy, &innov, &rinv, cfg.inflation)
            .map_err(|min_eig| Error::DegenerateTransform { grid: grid_i, min_eig })?;
        Ok((0..ne)
            .map(|m| {
                let w = &tr.w_mean + tr.w_perts.column(m);
                xbar + dx.dot(&w.transpose())
            })
            .collect())
    }
}

/// Analysis members at one grid point.
pub fn local_analysis(grid_i: usize, xf: &EnsembleMatrix, obs: &Observation, cfg: &LetkfConfig) -> Result<Vec<f64>> {
    if grid_i >= xf.n() {
        return Err(Error::IndexOutOfRange {
            index: grid_i,
            n: xf.n(),
        });
    }
    Prepared::new(xf, obs, cfg)?.local(grid_i, cfg)
}

/// Full LETKF analysis: an independent local problem at every grid point.
pub fn analysis(xf: &EnsembleMatrix, obs: &Observation, cfg: &LetkfConfig) -> Result<EnsembleMatrix> {
    let prep = Prepared::new(xf, obs, cfg)?;
    let mut xa = DMatrix::zeros(xf.n(), xf.n_ensembles());
    for i in 0..xf.n() {
        let row = prep.local(i, cfg)?;
        for (m, v) in row.into_iter().enumerate() {
            xa[(i, m)] = v;
        }
    }
    Ok(EnsembleMatrix { members: xa })
}

/// Textbook Kalman update of the ensemble mean with the explicit sample
/// covariance `P = dX dX^T / (N_e - 1)`. Dense and global; used to check the
/// LETKF.
pub fn kf_oracle_mean(
    xf: &EnsembleMatrix,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if xf.n_ensembles() < 2 {
        return Err(Error::Shape("need at least two members".into()));
    }
    let (mean, perts) = ensemble_stats(xf);
    let p = &perts * perts.transpose() / (xf.n_ensembles() - 1) as f64;
    let s = h * &p * h.transpose() + r;
    let innov = y - h * &mean;
    let lu = s.lu();
    let z = lu.solve(&innov).ok_or(Error::SingularInnovation)?;
    Ok(mean + p * h.transpose() * z)
}
