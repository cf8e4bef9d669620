//! Non-physics comparison methods: the adaptive smoothing interpolation
//! (ASM) and a dense GP with an anisotropic SE kernel in rotated
//! coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, SpaceTimeGrid};
use crate::observe::{ObservationSet, Output};
use crate::rng::{sample_indices, seeded_rng};
use crate::standardize::TaskScaler;

const KMH: f64 = 1.0 / 3.6;

/// Two-branch directional smoothing parameters (SI units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsmConfig {
    pub dx: f64,
    pub dt: f64,
    /// characteristic spatial smoothing distance
    pub sigma_x: f64,
    /// characteristic temporal smoothing time
    pub tau_t: f64,
    pub c_free: f64,
    pub c_cong: f64,
    pub v_thresh: f64,
    pub dv: f64,
}

impl Default for AsmConfig {
    fn default() -> Self {
        AsmConfig {
            dx: 10.0,
            dt: 5.0,
            sigma_x: 200.0,
            tau_t: 10.0,
            c_free: 80.0 * KMH,
            c_cong: -15.0 * KMH,
            v_thresh: 60.0 * KMH,
            dv: 20.0 * KMH,
        }
    }
}

impl AsmConfig {
    fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0 && self.tau_t > 0.0) {
            return Err(Error::InvalidArgument("smoothing widths must be positive".into()));
        }
        if !(self.c_cong < 0.0 && 0.0 < self.c_free) {
            return Err(Error::InvalidArgument("need c_cong < 0 < c_free".into()));
        }
        Ok(())
    }
}

/// Two-branch adaptive smoothing reconstruction.
///
/// Each branch averages observations with the kernel
/// `exp(-|dx - c dt|/sigma_x - |dt|/tau_t)`, which smooths along lines of
/// slope c. The congested-branch speed estimate picks the branch weight
/// through a tanh transition centered at `v_thresh` with width `dv`, and
/// the same weights blend both speed and density.
pub fn asm_reconstruct(obs: &ObservationSet, grid: &SpaceTimeGrid, cfg: &AsmConfig) -> Result<Field> {
    cfg.validate()?;
    if obs.is_empty() {
        return Err(Error::NoData("adaptive smoothing needs at least one observation".into()));
    }
    let speed: Vec<&crate::observe::Observation> =
        obs.entries.iter().filter(|e| e.output == Output::Speed).collect();
    let dens: Vec<&crate::observe::Observation> =
        obs.entries.iter().filter(|e| e.output == Output::Density).collect();

    let branch = |xs: f64, ts: f64, c: f64, pts: &[&crate::observe::Observation]| -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for e in pts {
            let (dx, dt) = (e.x - xs, e.t - ts);
            let w = (-(dx - c * dt).abs() / cfg.sigma_x - dt.abs() / cfg.tau_t).exp();
            num += w * e.value;
            den += w;
        }
        (den > 0.0).then(|| num / den)
    };

    let mut field = Field::empty(grid.clone());
    for i in 0..grid.nx {
        for j in 0..grid.nt {
            let (xs, ts) = (grid.x_center(i), grid.t_center(j));
            let v_free = branch(xs, ts, cfg.c_free, &speed);
            let v_cong = branch(xs, ts, cfg.c_cong, &speed);
            let w = match v_cong {
                Some(vc) => 0.5 * (1.0 + ((cfg.v_thresh - vc) / cfg.dv).tanh()),
                None => 0.0,
            };
            let blend = |free: Option<f64>, cong: Option<f64>| match (free, cong) {
                (Some(f), Some(c)) => w * c + (1.0 - w) * f,
                (Some(f), None) => f,
                (None, Some(c)) => c,
                (None, None) => 0.0,
            };
            if v_free.is_some() || v_cong.is_some() {
                field.v[(i, j)] = blend(v_free, v_cong);
                field.mask[(i, j)] = true;
            }
            let r_free = branch(xs, ts, cfg.c_free, &dens);
            let r_cong = branch(xs, ts, cfg.c_cong, &dens);
            if r_free.is_some() || r_cong.is_some() {
                field.rho[(i, j)] = blend(r_free, r_cong);
                field.mask[(i, j)] = true;
            }
        }
    }
    Ok(field)
}

/// Rotated anisotropic SE GP configuration. Lengthscales are physical
/// (meters, seconds); the kernel operates on centered raw coordinates so
/// the rotation acts in the same plane the lengthscales live in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotatedGpConfig {
    pub signal_var: f64,
    pub noise_var: f64,
    pub ell_rot_x: f64,
    pub ell_rot_t: f64,
    /// rotation angle; the congested wave direction when absent
    pub theta: Option<f64>,
    /// wave speed used for the default angle
    pub c_cong: f64,
    /// marginal-likelihood ascent steps
    pub refine_iters: usize,
    pub learning_rate: f64,
    /// dense-GP budget; observations are subsampled past this
    pub max_points: usize,
    pub seed: u64,
}

impl Default for RotatedGpConfig {
    fn default() -> Self {
        RotatedGpConfig {
            signal_var: 0.2,
            noise_var: 0.3,
            ell_rot_x: 150.0,
            ell_rot_t: 13.0,
            theta: None,
            c_cong: -15.0 * KMH,
            refine_iters: 40,
            learning_rate: 0.05,
            max_points: 800,
            seed: 0,
        }
    }
}

pub struct RotatedGpResult {
    pub field: Field,
    pub var_rho: DMatrix<f64>,
    pub var_v: DMatrix<f64>,
    /// best-so-far log marginal likelihood per refinement step, per output
    pub lml_traces: Vec<Vec<f64>>,
}

struct RotKernel {
    log_sv: f64,
    log_nv: f64,
    log_l1: f64,
    log_l2: f64,
    theta: f64,
}

impl RotKernel {
    fn k(&self, dx: f64, dt: f64) -> f64 {
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u1 = c * dx + s * dt;
        let u2 = -s * dx + c * dt;
        let (l1, l2) = (self.log_l1.exp(), self.log_l2.exp());
        self.log_sv.exp() * (-0.5 * (u1 * u1 / (l1 * l1) + u2 * u2 / (l2 * l2))).exp()
    }

    /// kernel value and partials w.r.t. (log sv, log l1, log l2, theta)
    fn k_grad(&self, dx: f64, dt: f64) -> (f64, [f64; 4]) {
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u1 = c * dx + s * dt;
        let u2 = -s * dx + c * dt;
        let (l1, l2) = (self.log_l1.exp(), self.log_l2.exp());
        let k = self.log_sv.exp() * (-0.5 * (u1 * u1 / (l1 * l1) + u2 * u2 / (l2 * l2))).exp();
        let dtheta = k * u1 * u2 * (1.0 / (l2 * l2) - 1.0 / (l1 * l1));
        (k, [k, k * u1 * u1 / (l1 * l1), k * u2 * u2 / (l2 * l2), dtheta])
    }
}

fn fit_one_output(
    pts: &[(f64, f64)],
    values: &[f64],
    grid: &SpaceTimeGrid,
    cfg: &RotatedGpConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    if pts.len() < 2 {
        return Err(Error::NoData("rotated GP needs >= 2 observations per output".into()));
    }
    let scaler = TaskScaler::fit(values)?;
    let n = pts.len();
    let (cx, ct) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (cx, ct) = (cx / n as f64, ct / n as f64);
    let x: Vec<(f64, f64)> = pts.iter().map(|&(px, pt)| (px - cx, pt - ct)).collect();
    let y = DVector::from_iterator(n, values.iter().map(|&v| scaler.standardize(v)));

    let mut kern = RotKernel {
        log_sv: cfg.signal_var.ln(),
        log_nv: cfg.noise_var.ln(),
        log_l1: cfg.ell_rot_x.ln(),
        log_l2: cfg.ell_rot_t.ln(),
        theta: cfg.theta.unwrap_or_else(|| (1.0f64).atan2(cfg.c_cong)),
    };

    let lml_of = |kern: &RotKernel| -> Result<(f64, [f64; 5])> {
        let nv = kern.log_nv.exp();
        let mut kmat = DMatrix::zeros(n, n);
        let mut dk = vec![DMatrix::zeros(n, n); 4];
        for i in 0..n {
            for j in i..n {
                let (kv, g) = kern.k_grad(x[i].0 - x[j].0, x[i].1 - x[j].1);
                kmat[(i, j)] = kv;
                kmat[(j, i)] = kv;
                for q in 0..4 {
                    dk[q][(i, j)] = g[q];
                    dk[q][(j, i)] = g[q];
                }
            }
            kmat[(i, i)] += nv;
        }
        let chol = crate::kernel::cholesky_with_jitter(&kmat, 1e-10)?;
        let l = chol.l();
        let alpha = chol.solve(&DMatrix::from_column_slice(n, 1, y.as_slice()));
        let alpha = DVector::from_column_slice(alpha.as_slice());
        let log_det: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        let lml =
            -0.5 * (y.dot(&alpha) + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln());
        // dLML/dθ = 1/2 tr((αα' - K^-1) dK/dθ)
        let kinv = chol.inverse();
        let mut grads = [0.0; 5];
        for q in 0..4 {
            let mut tr = 0.0;
            for i in 0..n {
                for j in 0..n {
                    tr += (alpha[i] * alpha[j] - kinv[(i, j)]) * dk[q][(i, j)];
                }
            }
            grads[q] = 0.5 * tr;
        }
        // noise enters only the diagonal
        let mut tr = 0.0;
        for i in 0..n {
            tr += alpha[i] * alpha[i] - kinv[(i, i)];
        }
        grads[4] = 0.5 * tr * nv;
        Ok((lml, grads))
    };

    // Adam ascent on the log marginal likelihood
    let mut trace = Vec::with_capacity(cfg.refine_iters + 1);
    let mut best = f64::NEG_INFINITY;
    let mut best_kern = RotKernel { ..kern };
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut am = [0.0; 5];
    let mut av = [0.0; 5];
    for it in 0..cfg.refine_iters.max(1) {
        let (lml, g) = lml_of(&kern)?;
        if lml > best {
            best = lml;
            best_kern = RotKernel { ..kern };
        }
        trace.push(best);
        if cfg.refine_iters == 0 {
            break;
        }
        let params = [
            &mut kern.log_sv,
            &mut kern.log_l1,
            &mut kern.log_l2,
            &mut kern.theta,
            &mut kern.log_nv,
        ];
        let t = (it + 1) as f64;
        for (q, p) in params.into_iter().enumerate() {
            let gq = -g[q];
            am[q] = b1 * am[q] + (1.0 - b1) * gq;
            av[q] = b2 * av[q] + (1.0 - b2) * gq * gq;
            *p -= cfg.learning_rate * (am[q] / (1.0 - b1.powf(t))) / ((av[q] / (1.0 - b2.powf(t))).sqrt() + eps);
            *p = p.clamp(-12.0, 12.0);
        }
    }
    let kern = best_kern;

    // posterior on the grid
    let nv = kern.log_nv.exp();
    let mut kmat = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let kv = kern.k(x[i].0 - x[j].0, x[i].1 - x[j].1);
            kmat[(i, j)] = kv;
            kmat[(j, i)] = kv;
        }
        kmat[(i, i)] += nv;
    }
    let chol = crate::kernel::cholesky_with_jitter(&kmat, 1e-10)?;
    let alpha = chol.solve(&DMatrix::from_column_slice(n, 1, y.as_slice()));
    let mut mean = DMatrix::zeros(grid.nx, grid.nt);
    let mut var = DMatrix::zeros(grid.nx, grid.nt);
    let k0 = kern.k(0.0, 0.0);
    for gi in 0..grid.nx {
        for gj in 0..grid.nt {
            let (qx, qt) = (grid.x_center(gi) - cx, grid.t_center(gj) - ct);
            let kq = DVector::from_iterator(n, x.iter().map(|&(px, pt)| kern.k(qx - px, qt - pt)));
            let mu = kq.dot(&DVector::from_column_slice(alpha.as_slice()));
            let sol = chol.solve(&DMatrix::from_column_slice(n, 1, kq.as_slice()));
            let v = (k0 - kq.dot(&DVector::from_column_slice(sol.as_slice()))).max(0.0);
            mean[(gi, gj)] = scaler.destandardize(mu);
            var[(gi, gj)] = scaler.scale * scaler.scale * v;
        }
    }
    Ok((mean, var, trace))
}

/// Exact dense GP regression per output with the rotated SE kernel.
pub fn rotated_gp_reconstruct(
    obs: &ObservationSet,
    grid: &SpaceTimeGrid,
    cfg: &RotatedGpConfig,
) -> Result<RotatedGpResult> {
    let mut field = Field::empty(grid.clone());
    field.mask.fill(true);
    let mut var_rho = DMatrix::zeros(grid.nx, grid.nt);
    let mut var_v = DMatrix::zeros(grid.nx, grid.nt);
    let mut traces = Vec::new();
    for output in [Output::Density, Output::Speed] {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        for e in obs.entries.iter().filter(|e| e.output == output) {
            pts.push((e.x, e.t));
            vals.push(e.value);
        }
        if pts.len() > cfg.max_points {
            let mut rng = seeded_rng(crate::rng::child_seed(cfg.seed, output.index() as u64));
            let keep = sample_indices(pts.len(), cfg.max_points, &mut rng);
            pts = keep.iter().map(|&i| pts[i]).collect();
            vals = keep.iter().map(|&i| vals[i]).collect();
        }
        let (mean, var, trace) = fit_one_output(&pts, &vals, grid, cfg)?;
        match output {
            Output::Density => {
                field.rho = mean;
                var_rho = var;
            }
            Output::Speed => {
                field.v = mean;
                var_v = var;
            }
        }
        traces.push(trace);
    }
    Ok(RotatedGpResult { field, var_rho, var_v, lml_traces: traces })
}
