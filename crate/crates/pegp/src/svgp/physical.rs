//! Mapping latent predictions to physical density and speed fields with
//! propagated uncertainty.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, SpaceTimeGrid};
use crate::kernel::KernelMode;
use crate::svgp::{predict_latent, SvgpState};

/// How ARZ invariant predictions become (rho, v).
///
/// `Affine` linearizes the inverse pressure map at rho0; `Delta` inverts the
/// pressure law at the predictive mean and pushes the covariance through the
/// Jacobian of the exact map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhysicalMap {
    Affine,
    Delta,
}

/// Predicted physical fields with latent and observation-space variances.
#[derive(Debug, Clone)]
pub struct PredictiveField {
    pub grid: SpaceTimeGrid,
    pub mu_rho: DMatrix<f64>,
    pub mu_v: DMatrix<f64>,
    pub var_rho_latent: DMatrix<f64>,
    pub var_v_latent: DMatrix<f64>,
    pub var_rho_obs: DMatrix<f64>,
    pub var_v_obs: DMatrix<f64>,
    /// observation-noise contribution per cell (obs minus latent variance)
    pub noise_rho: DMatrix<f64>,
    pub noise_v: DMatrix<f64>,
}

impl PredictiveField {
    /// Mean field with an all-true mask, for scoring against ground truth.
    pub fn to_field(&self) -> Field {
        Field {
            grid: self.grid.clone(),
            rho: self.mu_rho.clone(),
            v: self.mu_v.clone(),
            mask: DMatrix::from_element(self.grid.nx, self.grid.nt, true),
        }
    }
}

/// One predicted cell in physical units.
struct CellOut {
    mu_rho: f64,
    mu_v: f64,
    var_rho_lat: f64,
    var_v_lat: f64,
    var_rho_obs: f64,
    var_v_obs: f64,
}

fn map_arz_cell(state: &SvgpState, map: PhysicalMap, mu_z: &DVector<f64>, cov_z: &DMatrix<f64>) -> CellOut {
    let s = &state.standardizer.tasks;
    let d = Matrix2::new(s[0].scale, 0.0, 0.0, s[1].scale);
    let mu_w = Vector2::new(s[0].destandardize(mu_z[0]), s[1].destandardize(mu_z[1]));
    let cov2 = Matrix2::new(cov_z[(0, 0)], cov_z[(0, 1)], cov_z[(1, 0)], cov_z[(1, 1)]);
    let sigma_w = d * cov2 * d;
    let lam_z = Matrix2::new(state.task_noise(0), 0.0, 0.0, state.task_noise(1));
    let lam_w = d * lam_z * d;
    let sigma_tot = sigma_w + lam_w;

    let pl = state.scaled_pressure();
    let c = &state.constants;
    match map {
        PhysicalMap::Affine => {
            let pp = pl.p_prime(c.rho0);
            let a = Matrix2::new(1.0 / pp, -1.0 / pp, 0.0, 1.0);
            let offset = Vector2::new(c.rho0 - pl.p(c.rho0) / pp, 0.0);
            let mu = offset + a * mu_w;
            let cov_lat = a * sigma_w * a.transpose();
            let cov_obs = a * sigma_tot * a.transpose();
            CellOut {
                mu_rho: mu[0],
                mu_v: mu[1],
                var_rho_lat: cov_lat[(0, 0)],
                var_v_lat: cov_lat[(1, 1)],
                var_rho_obs: cov_obs[(0, 0)],
                var_v_obs: cov_obs[(1, 1)],
            }
        }
        PhysicalMap::Delta => {
            let rho = pl.p_inverse(mu_w[0] - mu_w[1]);
            let mu_v = mu_w[1];
            // speed row of the Jacobian selects the (2,2) entry exactly
            let var_v_lat = sigma_w[(1, 1)];
            let var_v_obs = sigma_tot[(1, 1)];
            let (var_rho_lat, var_rho_obs) = if rho > 0.0 {
                let jr = 1.0 / pl.p_prime(rho);
                let quad = |m: &Matrix2<f64>| {
                    jr * jr * (m[(0, 0)] - m[(0, 1)] - m[(1, 0)] + m[(1, 1)])
                };
                (quad(&sigma_w), quad(&sigma_tot))
            } else {
                // Jacobian singular at the vacuum clamp: density variance missing
                (f64::NAN, f64::NAN)
            };
            CellOut { mu_rho: rho, mu_v, var_rho_lat, var_v_lat, var_rho_obs, var_v_obs }
        }
    }
}

fn map_lwr_scalar_cell(state: &SvgpState, mu_z: &DVector<f64>, cov_z: &DMatrix<f64>) -> CellOut {
    let s = &state.standardizer.tasks[0];
    let c = &state.constants;
    let v_prime = (c.lambda0_lwr - c.v0) / c.rho0;
    let mu_delta = s.destandardize(mu_z[0]);
    let var_lat = s.scale * s.scale * cov_z[(0, 0)];
    let var_tot = s.scale * s.scale * (cov_z[(0, 0)] + state.task_noise(0));
    // joint map m0 + F mu with F = [1, V'(rho0)]'
    let f = Vector2::new(1.0, v_prime);
    let cov_lat = f * var_lat * f.transpose();
    let cov_obs = f * var_tot * f.transpose();
    CellOut {
        mu_rho: c.rho0 + mu_delta,
        mu_v: c.v0 + v_prime * mu_delta,
        var_rho_lat: cov_lat[(0, 0)],
        var_v_lat: cov_lat[(1, 1)],
        var_rho_obs: cov_obs[(0, 0)],
        var_v_obs: cov_obs[(1, 1)],
    }
}

fn map_per_output_cell(state: &SvgpState, mu_z: &DVector<f64>, cov_z: &DMatrix<f64>) -> CellOut {
    let s = &state.standardizer.tasks;
    let (sr, su) = (s[0].scale, s[1].scale);
    CellOut {
        mu_rho: s[0].destandardize(mu_z[0]),
        mu_v: s[1].destandardize(mu_z[1]),
        var_rho_lat: sr * sr * cov_z[(0, 0)],
        var_v_lat: su * su * cov_z[(1, 1)],
        var_rho_obs: sr * sr * (cov_z[(0, 0)] + state.task_noise(0)),
        var_v_obs: su * su * (cov_z[(1, 1)] + state.task_noise(1)),
    }
}

#[cfg(test)]
pub(crate) fn test_map_arz(
    state: &SvgpState,
    map: PhysicalMap,
    mu_z: &DVector<f64>,
    cov_z: &DMatrix<f64>,
) -> (f64, f64) {
    let c = map_arz_cell(state, map, mu_z, cov_z);
    (c.mu_rho, c.mu_v)
}

#[cfg(test)]
pub(crate) fn test_map_arz_full(
    state: &SvgpState,
    map: PhysicalMap,
    mu_z: &DVector<f64>,
    cov_z: &DMatrix<f64>,
) -> (f64, f64, f64, f64) {
    let c = map_arz_cell(state, map, mu_z, cov_z);
    (c.mu_rho, c.mu_v, c.var_rho_obs, c.var_v_obs)
}

#[cfg(test)]
pub(crate) fn test_map_lwr_scalar(
    state: &SvgpState,
    mu_z: &DVector<f64>,
    cov_z: &DMatrix<f64>,
) -> (f64, f64, f64, f64, f64, f64) {
    let c = map_lwr_scalar_cell(state, mu_z, cov_z);
    (c.mu_rho, c.mu_v, c.var_rho_lat, c.var_v_lat, c.var_rho_obs, c.var_v_obs)
}

/// Predict the physical fields on every cell of a grid.
pub fn predict_field(state: &SvgpState, grid: &SpaceTimeGrid, map: PhysicalMap) -> Result<PredictiveField> {
    let mut query = Vec::with_capacity(grid.n_cells());
    for j in 0..grid.nt {
        for i in 0..grid.nx {
            query.push((grid.x_center(i), grid.t_center(j)));
        }
    }
    let (means, covs) = predict_latent(state, &query)?;

    let (nx, nt) = (grid.nx, grid.nt);
    let mut out = PredictiveField {
        grid: grid.clone(),
        mu_rho: DMatrix::zeros(nx, nt),
        mu_v: DMatrix::zeros(nx, nt),
        var_rho_latent: DMatrix::zeros(nx, nt),
        var_v_latent: DMatrix::zeros(nx, nt),
        var_rho_obs: DMatrix::zeros(nx, nt),
        var_v_obs: DMatrix::zeros(nx, nt),
        noise_rho: DMatrix::zeros(nx, nt),
        noise_v: DMatrix::zeros(nx, nt),
    };
    for (q, (mu_z, cov_z)) in means.iter().zip(covs.iter()).enumerate() {
        let (i, j) = (q % nx, q / nx);
        let cell = match &state.kernel.mode {
            KernelMode::Arz { .. } => map_arz_cell(state, map, mu_z, cov_z),
            KernelMode::LwrScalar { .. } => map_lwr_scalar_cell(state, mu_z, cov_z),
            KernelMode::LwrBidirectional { .. } | KernelMode::PlainSe => {
                if state.n_outputs() != 2 {
                    return Err(Error::InvalidArgument("two outputs expected".into()));
                }
                map_per_output_cell(state, mu_z, cov_z)
            }
        };
        out.mu_rho[(i, j)] = cell.mu_rho;
        out.mu_v[(i, j)] = cell.mu_v;
        out.var_rho_latent[(i, j)] = cell.var_rho_lat;
        out.var_v_latent[(i, j)] = cell.var_v_lat;
        out.var_rho_obs[(i, j)] = cell.var_rho_obs;
        out.var_v_obs[(i, j)] = cell.var_v_obs;
        out.noise_rho[(i, j)] = cell.var_rho_obs - cell.var_rho_lat;
        out.noise_v[(i, j)] = cell.var_v_obs - cell.var_v_lat;
    }
    Ok(out)
}
