//! Sparse variational multi-output Gaussian process inference.
//!
//! Inducing variables stack every latent output at each inducing location
//! (output-major: all of output 0, then all of output 1). For a Gaussian
//! likelihood both ELBO terms are closed forms:
//!
//! ```text
//! E_q[log p(y | u)] = -1/2 sum_i [ log(2 pi s_i^2)
//!                      + ((y_i - mu_i)^2 + Sigma_ii) / s_i^2 ]
//! KL[q || p]        = 1/2 [ log|Kuu|/|S| - D + tr(Kuu^-1 S) + m' Kuu^-1 m ]
//! ```
//!
//! with mu = Kfu Kuu^-1 m and Sigma the marginal of the projected prior.
//! For fixed hyperparameters the optimal (m, S) are available in closed
//! form and make the ELBO equal the collapsed Titsias bound.

pub mod oracle;
pub mod physical;
pub mod train;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cholesky_with_jitter, KernelSpec, Pt};
use crate::physics::{EquilibriumConstants, PressureLaw};
use crate::standardize::{CoordMap, Standardizer};

pub use physical::{predict_field, PhysicalMap, PredictiveField};
pub use train::{train, InitConfig, ModelConfig, ModelMode, TrainOutcome};

/// Observations in latent-task standardized form, ready for inference.
#[derive(Debug, Clone)]
pub struct SvgpData {
    /// standardized coordinates with task index
    pub pts: Vec<Pt>,
    /// standardized values
    pub y: DVector<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub iterations: usize,
    pub final_elbo: f64,
}

/// Trained sparse variational GP.
#[derive(Debug, Clone)]
pub struct SvgpState {
    pub kernel: KernelSpec,
    /// inducing inputs, standardized coordinates
    pub z: Vec<(f64, f64)>,
    /// variational mean, length n_outputs * M
    pub m: DVector<f64>,
    /// lower-triangular factor with S = S_factor S_factor'
    pub s_factor: DMatrix<f64>,
    /// per-task likelihood variances in standardized units
    pub noise: Vec<f64>,
    pub standardizer: Standardizer,
    pub coord_map: CoordMap,
    pub constants: EquilibriumConstants,
    pub pressure: PressureLaw,
    /// density normalization used by the ARZ invariant pipeline
    pub rho_scale: f64,
    pub jitter: f64,
    pub meta: TrainMeta,
}

impl SvgpState {
    pub fn n_outputs(&self) -> usize {
        self.kernel.n_outputs()
    }

    pub fn scaled_pressure(&self) -> crate::physics::ScaledPressure {
        crate::physics::ScaledPressure { law: self.pressure, rho_scale: self.rho_scale }
    }

    pub fn n_inducing(&self) -> usize {
        self.z.len()
    }

    /// Inducing (point, output) pairs, output-major.
    pub fn inducing_pts(&self) -> Vec<Pt> {
        let mut pts = Vec::with_capacity(self.n_outputs() * self.z.len());
        for out in 0..self.n_outputs() {
            for &(x, t) in &self.z {
                pts.push(Pt { x, t, out });
            }
        }
        pts
    }

    /// Observation noise variance for a latent task.
    pub fn task_noise(&self, task: usize) -> f64 {
        self.noise[task.min(self.noise.len() - 1)]
    }
}

/// Forward linear-algebra cache shared by the ELBO, its gradients, and the
/// closed-form variational update.
pub(crate) struct Workspace {
    pub l: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub c2: DVector<f64>,
    pub mu: DVector<f64>,
    pub sigma_ii: DVector<f64>,
    pub ell: f64,
    pub kl: f64,
}

impl Workspace {
    pub fn elbo(&self) -> f64 {
        self.ell - self.kl
    }
}

fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    l.solve_lower_triangular(b)
        .ok_or_else(|| Error::IllConditioned("singular triangular solve".into()))
}

fn solve_lower_t(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    l.tr_solve_lower_triangular(b)
        .ok_or_else(|| Error::IllConditioned("singular triangular solve".into()))
}

pub(crate) fn build_kuu(state: &SvgpState) -> Result<DMatrix<f64>> {
    crate::kernel::gram(&state.kernel, &state.inducing_pts())
}

pub(crate) fn build_kuf(state: &SvgpState, data: &SvgpData) -> Result<DMatrix<f64>> {
    crate::kernel::cross_gram(&state.kernel, &state.inducing_pts(), &data.pts)
}

pub(crate) fn forward(state: &SvgpState, data: &SvgpData) -> Result<Workspace> {
    let k_uu = build_kuu(state)?;
    let chol = cholesky_with_jitter(&k_uu, state.jitter)
        .map_err(|_| Error::IllConditioned("ill-conditioned K_uu".into()))?;
    let l = chol.l();
    let k_uf = build_kuf(state, data)?;
    let n = data.pts.len();
    let d = k_uu.nrows();

    let a = solve_lower(&l, &k_uf)?;
    let m_col = DMatrix::from_column_slice(d, 1, state.m.as_slice());
    let c = DVector::from_column_slice(solve_lower(&l, &m_col)?.as_slice());
    let mu = a.transpose() * &c;
    let p = solve_lower_t(&l, &a)?;
    let g = state.s_factor.transpose() * &p;
    let b = solve_lower(&l, &state.s_factor)?;
    let b2 = solve_lower_t(&l, &b)?;
    let c_col = DMatrix::from_column_slice(d, 1, c.as_slice());
    let c2 = DVector::from_column_slice(solve_lower_t(&l, &c_col)?.as_slice());

    let mut kff = DVector::zeros(n);
    for (i, pt) in data.pts.iter().enumerate() {
        let blk = state.kernel.total_block(0.0, 0.0);
        kff[i] = blk[pt.out][pt.out];
    }

    let mut sigma_ii = DVector::zeros(n);
    for i in 0..n {
        let s = kff[i] - a.column(i).norm_squared() + g.column(i).norm_squared();
        sigma_ii[i] = s;
    }

    let mut ell = 0.0;
    for i in 0..n {
        let s2 = state.task_noise(data.pts[i].out);
        let r = data.y[i] - mu[i];
        ell += -0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + (r * r + sigma_ii[i]) / s2);
    }

    let log_det_kuu: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
    let log_det_s: f64 = 2.0 * (0..d).map(|i| state.s_factor[(i, i)].ln()).sum::<f64>();
    let kl = 0.5
        * (log_det_kuu - log_det_s - d as f64
            + b.iter().map(|v| v * v).sum::<f64>()
            + c.norm_squared());

    Ok(Workspace { l, p, g, b, b2, c2, mu, sigma_ii, ell, kl })
}

/// Evidence lower bound in nats.
pub fn elbo(state: &SvgpState, data: &SvgpData) -> Result<f64> {
    Ok(forward(state, data)?.elbo())
}

/// Replace (m, S) by their closed-form optimum for the current
/// hyperparameters; returns the resulting ELBO (the collapsed bound).
pub fn optimize_ms_closed_form(state: &mut SvgpState, data: &SvgpData) -> Result<f64> {
    let k_uu = build_kuu(state)?;
    let chol = cholesky_with_jitter(&k_uu, state.jitter)
        .map_err(|_| Error::IllConditioned("ill-conditioned K_uu".into()))?;
    let l = chol.l();
    let k_uf = build_kuf(state, data)?;
    let d = k_uu.nrows();
    let n = data.pts.len();

    let a = solve_lower(&l, &k_uf)?;
    // C = I + A Sigma^-1 A'
    let mut c_mat = DMatrix::identity(d, d);
    let mut asy = DVector::zeros(d);
    for i in 0..n {
        let s2 = state.task_noise(data.pts[i].out);
        let col = a.column(i);
        for r in 0..d {
            asy[r] += col[r] * data.y[i] / s2;
            for q in 0..d {
                c_mat[(r, q)] += col[r] * col[q] / s2;
            }
        }
    }
    let lc = nalgebra::Cholesky::new(c_mat)
        .ok_or_else(|| Error::IllConditioned("inner system not positive definite".into()))?;
    // m = L C^-1 A Sigma^-1 y
    let m_new = &l * lc.solve(&DMatrix::from_column_slice(d, 1, asy.as_slice()));
    // S = L C^-1 L'
    let s_new = &l * lc.solve(&l.transpose());
    // symmetrize before factoring
    let s_sym = 0.5 * (&s_new + s_new.transpose());
    let s_chol = cholesky_with_jitter(&s_sym, 1e-12)
        .map_err(|_| Error::IllConditioned("optimal S not positive definite".into()))?;
    state.m = DVector::from_column_slice(m_new.as_slice());
    state.s_factor = s_chol.l();
    elbo(state, data)
}

/// Latent predictive distribution at physical-coordinate query points:
/// per point the mean vector and full covariance over the latent outputs,
/// in standardized space.
pub fn predict_latent(
    state: &SvgpState,
    query: &[(f64, f64)],
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let n_out = state.n_outputs();
    let mut qpts = Vec::with_capacity(query.len() * n_out);
    for &(x, t) in query {
        let (xs, ts) = state.coord_map.to_std(x, t);
        for out in 0..n_out {
            qpts.push(Pt { x: xs, t: ts, out });
        }
    }
    let k_uu = build_kuu(state)?;
    let chol = cholesky_with_jitter(&k_uu, state.jitter)
        .map_err(|_| Error::IllConditioned("ill-conditioned K_uu".into()))?;
    let l = chol.l();
    let k_uq = crate::kernel::cross_gram(&state.kernel, &state.inducing_pts(), &qpts)?;
    let d = k_uu.nrows();

    let w = solve_lower(&l, &k_uq)?;
    let m_col = DMatrix::from_column_slice(d, 1, state.m.as_slice());
    let cvec = solve_lower(&l, &m_col)?;
    let mu_all = w.transpose() * &cvec; // (n_out*Q) x 1
    let v = solve_lower_t(&l, &w)?;
    let gq = state.s_factor.transpose() * &v;

    let zero_lag = state.kernel.total_block(0.0, 0.0);
    let mut means = Vec::with_capacity(query.len());
    let mut covs = Vec::with_capacity(query.len());
    for (qi, _) in query.iter().enumerate() {
        let mut mean = DVector::zeros(n_out);
        let mut cov = DMatrix::zeros(n_out, n_out);
        for o1 in 0..n_out {
            let col1 = qi * n_out + o1;
            mean[o1] = mu_all[(col1, 0)];
            for o2 in 0..n_out {
                let col2 = qi * n_out + o2;
                let prior = zero_lag[o1][o2];
                let nystrom = w.column(col1).dot(&w.column(col2));
                let svar = gq.column(col1).dot(&gq.column(col2));
                cov[(o1, o2)] = prior - nystrom + svar;
            }
        }
        // clamp tiny negative diagonal from roundoff
        for o in 0..n_out {
            if cov[(o, o)] < 0.0 {
                cov[(o, o)] = 0.0;
            }
        }
        means.push(mean);
        covs.push(cov);
    }
    Ok((means, covs))
}
