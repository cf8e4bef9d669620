//! Joint optimization of kernel hyperparameters, noise, variational
//! parameters, and (optionally) inducing inputs by Adam on the negative
//! ELBO, with analytic gradients assembled through the adjoints of the
//! inducing-point linear algebra.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ArzExpansion, KernelMode, KernelSpec, Pt, ResidualHyper, SeHyper};
use crate::observe::{median_density, to_task_data, ObservationSet, TaskMapping};
use crate::physics::{
    auto_density_scale, equilibrium_constants_scaled, EquilibriumConstants, FundamentalDiagram,
    PressureLaw, ScaledPressure,
};
use crate::rng::seeded_rng;
use crate::standardize::{CoordMap, Standardizer};
use crate::svgp::physical::PhysicalMap;
use crate::svgp::{forward, optimize_ms_closed_form, SvgpData, SvgpState, TrainMeta, Workspace};

/// Which physics structure the model embeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelMode {
    Arz { expansion: ArzExpansion },
    LwrScalar,
    LwrBidirectional,
    PlainSe,
}

impl ModelMode {
    pub fn name(&self) -> &'static str {
        match self {
            ModelMode::Arz { .. } => "arz",
            ModelMode::LwrScalar => "lwr_scalar",
            ModelMode::LwrBidirectional => "lwr_bidirectional",
            ModelMode::PlainSe => "plain_se",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub ell0: f64,
    pub sigma0: f64,
    pub b_res0: f64,
    pub sigma_res0: f64,
    pub ell_res0: f64,
    pub noise0: f64,
    /// rescale sigma so the zero-lag physics variance starts near sigma0^2
    pub normalize_signal: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            ell0: 0.3,
            sigma0: 1.0,
            b_res0: 0.1,
            sigma_res0: 1.0,
            ell_res0: 0.3,
            noise0: 0.1,
            normalize_signal: true,
        }
    }
}

/// Density normalization for the ARZ invariant pipeline. In SI units the
/// bare pressure laws leave P'(rho0) orders of magnitude below |V'(rho0)|,
/// so `Auto` calibrates the scale to a target alpha = V'/P' instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityScale {
    Auto { alpha_target: f64 },
    Fixed { scale: f64 },
}

impl Default for DensityScale {
    fn default() -> Self {
        // the balanced regime of the linearization's worked constants
        DensityScale::Auto { alpha_target: -2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub fd: FundamentalDiagram,
    pub pressure: PressureLaw,
    pub density_scale: DensityScale,
    pub tau: f64,
    /// relaxation-time initialization for training; the coordinate time
    /// scale when absent (a sub-grid scenario tau would collapse the
    /// kernel onto its source terms)
    pub tau_init: Option<f64>,
    /// equilibrium density; median of observed density when absent
    pub rho0: Option<f64>,
    pub m_inducing: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// keep (m, S) at their closed-form optimum each iteration
    pub closed_form_ms: bool,
    pub train_z: bool,
    pub train_lambdas: bool,
    pub train_noise: bool,
    /// alpha, tau (ARZ) / wave speeds and branch weight (bidirectional)
    pub train_physics: bool,
    pub arz_map: PhysicalMap,
    /// bidirectional task coupling [1, v'] on/off
    pub coupling: bool,
    pub init: InitConfig,
    pub noise_floor: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ModelMode::Arz { expansion: ArzExpansion::AsPrinted },
            fd: FundamentalDiagram::Greenshields { v_f: 30.0, rho_jam: 0.12 },
            pressure: PressureLaw::HalfSquare,
            density_scale: DensityScale::default(),
            tau: 5.0,
            tau_init: None,
            rho0: None,
            m_inducing: 64,
            iterations: 2000,
            learning_rate: 1e-2,
            closed_form_ms: true,
            train_z: false,
            train_lambdas: false,
            train_noise: true,
            train_physics: true,
            arz_map: PhysicalMap::Delta,
            coupling: true,
            init: InitConfig::default(),
            noise_floor: 1e-6,
            jitter: crate::kernel::DEFAULT_JITTER,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: SvgpState,
    /// best-so-far ELBO per iteration
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// parameter packing

struct Layout {
    mode: ModelMode,
    n_out: usize,
    n_tasks: usize,
    m_ind: usize,
    /// kernel mode parameter count in the kernel layout (a,b,l1,l2 / l0 / cf,cb,wf)
    nk_mode: usize,
    base: usize,      // 3 entries
    mode_off: usize,  // train-side mode params, same count as nk_mode
    res_off: usize,   // 4 per output
    noise_off: usize, // n_tasks
    m_off: usize,     // d
    s_off: usize,     // d(d+1)/2
    z_off: usize,     // 2 m_ind
    total: usize,
}

impl Layout {
    fn new(mode: ModelMode, n_out: usize, n_tasks: usize, m_ind: usize) -> Self {
        let nk_mode = match mode {
            ModelMode::Arz { .. } => 4,
            ModelMode::LwrScalar => 1,
            ModelMode::LwrBidirectional => 3,
            ModelMode::PlainSe => 0,
        };
        let d = n_out * m_ind;
        let base = 0;
        let mode_off = 3;
        let res_off = mode_off + nk_mode;
        let noise_off = res_off + 4 * n_out;
        let m_off = noise_off + n_tasks;
        let s_off = m_off + d;
        let z_off = s_off + d * (d + 1) / 2;
        let total = z_off + 2 * m_ind;
        Layout { mode, n_out, n_tasks, m_ind, nk_mode, base, mode_off, res_off, noise_off, m_off, s_off, z_off, total }
    }

    fn d(&self) -> usize {
        self.n_out * self.m_ind
    }
}

struct Unpacked {
    spec: KernelSpec,
    noise: Vec<f64>,
    m: DVector<f64>,
    s_factor: DMatrix<f64>,
    z: Vec<(f64, f64)>,
    /// chain factors from kernel-native mode params to train params
    arz_ab: Option<(f64, f64, f64)>, // (a, b, st_over_tau)
    wf: Option<f64>,
}

struct Ctx {
    layout: Layout,
    coord_map: CoordMap,
    coupling: [f64; 2],
    expansion: ArzExpansion,
    noise_floor: f64,
}

fn clampv(v: f64, lo: f64, hi: f64) -> f64 {
    v.clamp(lo, hi)
}

fn unpack(p: &[f64], ctx: &Ctx) -> Unpacked {
    let l = &ctx.layout;
    let st = ctx.coord_map.t_scale;
    let base = SeHyper {
        sigma: clampv(p[l.base], -12.0, 12.0).exp(),
        ell_x: clampv(p[l.base + 1], -8.0, 8.0).exp(),
        ell_t: clampv(p[l.base + 2], -8.0, 8.0).exp(),
    };
    let mut arz_ab = None;
    let mut wf = None;
    let mode = match l.mode {
        ModelMode::Arz { .. } => {
            let alpha = p[l.mode_off];
            let tau = clampv(p[l.mode_off + 1], -8.0, 8.0).exp();
            let a = alpha * st / tau;
            let b = (1.0 + alpha) * st / tau;
            arz_ab = Some((a, b, st / tau));
            KernelMode::Arz {
                lambda1: p[l.mode_off + 2],
                lambda2: p[l.mode_off + 3],
                a,
                b,
                expansion: ctx.expansion,
            }
        }
        ModelMode::LwrScalar => KernelMode::LwrScalar { lambda0: p[l.mode_off] },
        ModelMode::LwrBidirectional => {
            let w = 1.0 / (1.0 + (-clampv(p[l.mode_off + 2], -16.0, 16.0)).exp());
            wf = Some(w);
            KernelMode::LwrBidirectional {
                c_f: p[l.mode_off],
                c_b: p[l.mode_off + 1],
                w_f: w,
                coupling: ctx.coupling,
            }
        }
        ModelMode::PlainSe => KernelMode::PlainSe,
    };
    let residual: Vec<ResidualHyper> = (0..l.n_out)
        .map(|k| {
            let o = l.res_off + 4 * k;
            ResidualHyper {
                b_res: clampv(p[o], -16.0, 8.0).exp(),
                sigma_res: clampv(p[o + 1], -12.0, 8.0).exp(),
                ell_x: clampv(p[o + 2], -8.0, 8.0).exp(),
                ell_t: clampv(p[o + 3], -8.0, 8.0).exp(),
            }
        })
        .collect();
    let noise: Vec<f64> = (0..l.n_tasks)
        .map(|k| ctx.noise_floor + clampv(p[l.noise_off + k], -24.0, 8.0).exp())
        .collect();
    let d = l.d();
    let m = DVector::from_iterator(d, p[l.m_off..l.m_off + d].iter().copied());
    let mut s_factor = DMatrix::zeros(d, d);
    let mut idx = l.s_off;
    for r in 0..d {
        for c in 0..=r {
            if c == r {
                s_factor[(r, c)] = clampv(p[idx], -16.0, 16.0).exp();
            } else {
                s_factor[(r, c)] = p[idx];
            }
            idx += 1;
        }
    }
    let z: Vec<(f64, f64)> = (0..l.m_ind)
        .map(|i| (p[l.z_off + 2 * i], p[l.z_off + 2 * i + 1]))
        .collect();
    Unpacked { spec: KernelSpec { mode, base, residual }, noise, m, s_factor, z, arz_ab, wf }
}

fn pack_ms_z(p: &mut [f64], ctx: &Ctx, m: &DVector<f64>, s_factor: &DMatrix<f64>, z: &[(f64, f64)]) {
    let l = &ctx.layout;
    let d = l.d();
    for i in 0..d {
        p[l.m_off + i] = m[i];
    }
    let mut idx = l.s_off;
    for r in 0..d {
        for c in 0..=r {
            p[idx] = if c == r { s_factor[(r, c)].max(1e-300).ln() } else { s_factor[(r, c)] };
            idx += 1;
        }
    }
    for (i, &(x, t)) in z.iter().enumerate() {
        p[l.z_off + 2 * i] = x;
        p[l.z_off + 2 * i + 1] = t;
    }
}

// ---------------------------------------------------------------------------
// analytic gradient of the ELBO

struct EvalResult {
    elbo: f64,
    grad: Vec<f64>,
}

fn state_from(un: &Unpacked, proto: &SvgpState) -> SvgpState {
    SvgpState {
        kernel: un.spec.clone(),
        z: un.z.clone(),
        m: un.m.clone(),
        s_factor: un.s_factor.clone(),
        noise: un.noise.clone(),
        standardizer: proto.standardizer.clone(),
        coord_map: proto.coord_map,
        constants: proto.constants,
        pressure: proto.pressure,
        rho_scale: proto.rho_scale,
        jitter: proto.jitter,
        meta: proto.meta.clone(),
    }
}

fn eval_with_grad(
    params: &[f64],
    ctx: &Ctx,
    proto: &SvgpState,
    data: &SvgpData,
    want_z: bool,
) -> Result<EvalResult> {
    let l = &ctx.layout;
    let un = unpack(params, ctx);
    let state = state_from(&un, proto);
    let ws: Workspace = forward(&state, data)?;
    let elbo = ws.elbo();
    let d = l.d();
    let n = data.pts.len();
    let m_ind = l.m_ind;
    let n_out = l.n_out;

    // adjoint weights
    let mut w = DVector::zeros(n);
    let mut u = DVector::zeros(n);
    for i in 0..n {
        let s2 = state.task_noise(data.pts[i].out);
        w[i] = (data.y[i] - ws.mu[i]) / s2;
        u[i] = -0.5 / s2;
    }

    // G_uf = c2 w' + 2 (R - P) U
    let bg = &ws.b * &ws.g;
    let r_mat = ws
        .l
        .tr_solve_lower_triangular(&bg)
        .ok_or_else(|| Error::IllConditioned("triangular solve".into()))?;
    let mut g_uf = DMatrix::zeros(d, n);
    for i in 0..n {
        for r in 0..d {
            g_uf[(r, i)] = ws.c2[r] * w[i] + 2.0 * (r_mat[(r, i)] - ws.p[(r, i)]) * u[i];
        }
    }

    // G_uu = dell/dKuu - dKL/dKuu
    let pw = &ws.p * &w;
    let mut pu = ws.p.clone();
    let mut gu = ws.g.clone();
    for i in 0..n {
        for r in 0..d {
            pu[(r, i)] *= u[i];
            gu[(r, i)] *= u[i];
        }
    }
    let dell = -(&pw * ws.c2.transpose() - &pu * ws.p.transpose()
        + &ws.b2 * (&gu * ws.p.transpose())
        + &pu * (ws.g.transpose() * ws.b2.transpose()));
    let eye = DMatrix::identity(d, d);
    let t_inv = ws
        .l
        .tr_solve_lower_triangular(
            &ws.l
                .solve_lower_triangular(&eye)
                .ok_or_else(|| Error::IllConditioned("triangular solve".into()))?,
        )
        .ok_or_else(|| Error::IllConditioned("triangular solve".into()))?;
    let dkl = 0.5 * (&t_inv - &ws.b2 * ws.b2.transpose() - &ws.c2 * ws.c2.transpose());
    let g_uu = dell - dkl;

    let nk = un.spec.n_params();
    let mut gk = vec![0.0; nk]; // kernel-native parameter grads

    // K_uu pairs
    {
        let mut grads = vec![[[0.0; 2]; 2]; nk];
        for i in 0..m_ind {
            for j in i..m_ind {
                let rx = un.z[i].0 - un.z[j].0;
                let rt = un.z[i].1 - un.z[j].1;
                un.spec.total_block_with_grads(rx, rt, &mut grads);
                for oi in 0..n_out {
                    for oj in 0..n_out {
                        let wgt = if i == j {
                            g_uu[(oi * m_ind + i, oj * m_ind + j)]
                        } else {
                            g_uu[(oi * m_ind + i, oj * m_ind + j)]
                                + g_uu[(oj * m_ind + j, oi * m_ind + i)]
                        };
                        if wgt != 0.0 {
                            for (p, gblk) in grads.iter().enumerate() {
                                gk[p] += wgt * gblk[oi][oj];
                            }
                        }
                    }
                }
            }
        }
    }

    // K_uf pairs, chunked deterministically
    {
        let chunk = 512;
        let partials: Vec<Vec<f64>> = (0..n.div_ceil(chunk))
            .into_par_iter()
            .map(|ci| {
                let lo = ci * chunk;
                let hi = ((ci + 1) * chunk).min(n);
                let mut acc = vec![0.0; nk];
                let mut grads = vec![[[0.0; 2]; 2]; nk];
                for nn in lo..hi {
                    let pt = data.pts[nn];
                    for i in 0..m_ind {
                        let rx = un.z[i].0 - pt.x;
                        let rt = un.z[i].1 - pt.t;
                        un.spec.total_block_with_grads(rx, rt, &mut grads);
                        for oi in 0..n_out {
                            let wgt = g_uf[(oi * m_ind + i, nn)];
                            if wgt != 0.0 {
                                for (p, gblk) in grads.iter().enumerate() {
                                    acc[p] += wgt * gblk[oi][pt.out];
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        for part in partials {
            for (p, v) in part.iter().enumerate() {
                gk[p] += v;
            }
        }
    }

    // kff diagonal: one zero-lag block serves every observation of a task
    {
        let mut grads = vec![[[0.0; 2]; 2]; nk];
        un.spec.total_block_with_grads(0.0, 0.0, &mut grads);
        let mut u_task = vec![0.0; n_out];
        for i in 0..n {
            u_task[data.pts[i].out] += u[i];
        }
        for (p, gblk) in grads.iter().enumerate() {
            for (o, ut) in u_task.iter().enumerate() {
                gk[p] += ut * gblk[o][o];
            }
        }
    }

    // map kernel-native grads onto train parameters
    let mut grad = vec![0.0; l.total];
    grad[l.base] = gk[0];
    grad[l.base + 1] = gk[1];
    grad[l.base + 2] = gk[2];
    match l.mode {
        ModelMode::Arz { .. } => {
            let (a, b, st_tau) = un.arz_ab.unwrap();
            let (ga, gb) = (gk[3], gk[4]);
            grad[l.mode_off] = (ga + gb) * st_tau; // alpha
            grad[l.mode_off + 1] = -(a * ga + b * gb); // log tau
            grad[l.mode_off + 2] = gk[5]; // lambda1
            grad[l.mode_off + 3] = gk[6]; // lambda2
        }
        ModelMode::LwrScalar => {
            grad[l.mode_off] = gk[3];
        }
        ModelMode::LwrBidirectional => {
            let wfv = un.wf.unwrap();
            grad[l.mode_off] = gk[3];
            grad[l.mode_off + 1] = gk[4];
            grad[l.mode_off + 2] = gk[5] * wfv * (1.0 - wfv); // logit chain
        }
        ModelMode::PlainSe => {}
    }
    for k in 0..n_out {
        for q in 0..4 {
            grad[l.res_off + 4 * k + q] = gk[3 + l.nk_mode + 4 * k + q];
        }
    }

    // noise gradients (log parameterization over the floor offset)
    for task in 0..l.n_tasks {
        let s2 = un.noise[task];
        let mut gnoise = 0.0;
        for i in 0..n {
            if data.pts[i].out == task {
                let r = data.y[i] - ws.mu[i];
                gnoise += -0.5 / s2 + (r * r + ws.sigma_ii[i]) / (2.0 * s2 * s2);
            }
        }
        grad[l.noise_off + task] = gnoise * (s2 - ctx.noise_floor);
    }

    // m and S_factor
    let gm = &pw - &ws.c2;
    for i in 0..d {
        grad[l.m_off + i] = gm[i];
    }
    {
        let gsf = 2.0 * (&pu * ws.g.transpose());
        let mut idx = l.s_off;
        for r in 0..d {
            for c in 0..=r {
                let mut g = gsf[(r, c)] - ws.b2[(r, c)];
                if r == c {
                    g += 1.0 / un.s_factor[(r, r)];
                    g *= un.s_factor[(r, r)]; // log-diagonal chain
                }
                grad[idx] = g;
                idx += 1;
            }
        }
    }

    // inducing inputs
    if want_z {
        let mut gz = vec![(0.0, 0.0); m_ind];
        for i in 0..m_ind {
            for j in (i + 1)..m_ind {
                let rx = un.z[i].0 - un.z[j].0;
                let rt = un.z[i].1 - un.z[j].1;
                let (_, dkx, dkt) = un.spec.total_block_with_lag_grads(rx, rt);
                for oi in 0..n_out {
                    for oj in 0..n_out {
                        let wgt = g_uu[(oi * m_ind + i, oj * m_ind + j)]
                            + g_uu[(oj * m_ind + j, oi * m_ind + i)];
                        gz[i].0 += wgt * dkx[oi][oj];
                        gz[i].1 += wgt * dkt[oi][oj];
                        gz[j].0 -= wgt * dkx[oi][oj];
                        gz[j].1 -= wgt * dkt[oi][oj];
                    }
                }
            }
        }
        for nn in 0..n {
            let pt = data.pts[nn];
            for i in 0..m_ind {
                let rx = un.z[i].0 - pt.x;
                let rt = un.z[i].1 - pt.t;
                let (_, dkx, dkt) = un.spec.total_block_with_lag_grads(rx, rt);
                for oi in 0..n_out {
                    let wgt = g_uf[(oi * m_ind + i, nn)];
                    gz[i].0 += wgt * dkx[oi][pt.out];
                    gz[i].1 += wgt * dkt[oi][pt.out];
                }
            }
        }
        for (i, (gx, gt)) in gz.into_iter().enumerate() {
            grad[l.z_off + 2 * i] = gx;
            grad[l.z_off + 2 * i + 1] = gt;
        }
    }

    Ok(EvalResult { elbo, grad })
}

// ---------------------------------------------------------------------------
// initialization

/// Greedy farthest-point selection over the observed coordinates; the
/// sequence is prefix-stable, so growing M extends the previous set.
pub fn farthest_point_inducing(coords: &[(f64, f64)], m: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut unique: Vec<(f64, f64)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for &(x, t) in coords {
        if seen.insert((x.to_bits(), t.to_bits())) {
            unique.push((x, t));
        }
    }
    let m = m.min(unique.len());
    if m == 0 {
        return Vec::new();
    }
    let mut rng = seeded_rng(seed);
    let start = (crate::rng::uniform01(&mut rng) * unique.len() as f64) as usize % unique.len();
    let mut chosen = vec![unique[start]];
    let mut dist: Vec<f64> = unique
        .iter()
        .map(|&(x, t)| {
            let (dx, dt) = (x - unique[start].0, t - unique[start].1);
            dx * dx + dt * dt
        })
        .collect();
    while chosen.len() < m {
        let (best, _) = dist
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        chosen.push(unique[best]);
        for (i, &(x, t)) in unique.iter().enumerate() {
            let (dx, dt) = (x - unique[best].0, t - unique[best].1);
            dist[i] = dist[i].min(dx * dx + dt * dt);
        }
    }
    chosen
}

pub(crate) struct Prepared {
    pub data: SvgpData,
    pub standardizer: Standardizer,
    pub coord_map: CoordMap,
    pub constants: EquilibriumConstants,
    pub coupling: [f64; 2],
    pub n_tasks: usize,
    pub rho_scale: f64,
}

pub(crate) fn prepare(obs: &ObservationSet, cfg: &ModelConfig) -> Result<Prepared> {
    let rho0 = match cfg.rho0 {
        Some(r) => r,
        None => median_density(obs)?,
    };
    let rho_scale = match cfg.density_scale {
        DensityScale::Fixed { scale } => scale,
        DensityScale::Auto { alpha_target } => {
            auto_density_scale(rho0, &cfg.fd, &cfg.pressure, alpha_target)?
        }
    };
    let pressure = ScaledPressure { law: cfg.pressure, rho_scale };
    let constants = equilibrium_constants_scaled(rho0, &cfg.fd, &pressure, cfg.tau)?;
    let mapping = match cfg.mode {
        ModelMode::Arz { .. } => TaskMapping::ArzInvariants { pressure },
        ModelMode::LwrScalar => TaskMapping::LwrScalarDelta { constants },
        ModelMode::LwrBidirectional | ModelMode::PlainSe => TaskMapping::PerOutput,
    };
    let td = to_task_data(obs, &mapping)?;
    let coord_map = CoordMap::fit(&td.coords)?;
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); td.n_tasks];
    for (&t, &v) in td.task.iter().zip(td.values.iter()) {
        groups[t].push(v);
    }
    let standardizer = Standardizer::fit(&groups)?;
    let mut pts = Vec::with_capacity(td.values.len());
    let mut y = DVector::zeros(td.values.len());
    for i in 0..td.values.len() {
        let (xs, ts) = coord_map.to_std(td.coords[i].0, td.coords[i].1);
        pts.push(Pt { x: xs, t: ts, out: td.task[i] });
        y[i] = standardizer.tasks[td.task[i]].standardize(td.values[i]);
    }
    let v_prime = (constants.lambda0_lwr - constants.v0) / constants.rho0;
    let coupling = if cfg.coupling {
        [1.0, v_prime * standardizer.tasks[0].scale / standardizer.tasks[1.min(td.n_tasks - 1)].scale]
    } else {
        [1.0, 0.0]
    };
    Ok(Prepared {
        data: SvgpData { pts, y },
        standardizer,
        coord_map,
        constants,
        coupling,
        n_tasks: td.n_tasks,
        rho_scale,
    })
}

fn initial_params(cfg: &ModelConfig, prep: &Prepared, z: &[(f64, f64)], ctx: &Ctx) -> Vec<f64> {
    let l = &ctx.layout;
    let cm = &prep.coord_map;
    let c = &prep.constants;
    let mut p = vec![0.0; l.total];
    p[l.base] = cfg.init.sigma0.ln();
    p[l.base + 1] = cfg.init.ell0.ln();
    p[l.base + 2] = cfg.init.ell0.ln();
    match l.mode {
        ModelMode::Arz { .. } => {
            p[l.mode_off] = c.alpha;
            // default tau init at the coordinate time scale: a sub-grid
            // scenario tau makes a = alpha s_t / tau dwarf the advection
            // terms and no desk-scale iteration budget recovers from that
            p[l.mode_off + 1] = cfg.tau_init.unwrap_or(cm.t_scale).ln();
            p[l.mode_off + 2] = cm.speed_to_std(c.lambda1_0);
            p[l.mode_off + 3] = cm.speed_to_std(c.lambda2_0);
        }
        ModelMode::LwrScalar => {
            p[l.mode_off] = cm.speed_to_std(c.lambda0_lwr);
        }
        ModelMode::LwrBidirectional => {
            p[l.mode_off] = cm.speed_to_std(crate::physics::FundamentalDiagram::v_free(&cfg.fd));
            p[l.mode_off + 1] = cm.speed_to_std(-crate::physics::FundamentalDiagram::v_free(&cfg.fd));
            p[l.mode_off + 2] = 0.0; // w_f = 1/2
        }
        ModelMode::PlainSe => {}
    }
    for k in 0..l.n_out {
        let o = l.res_off + 4 * k;
        p[o] = cfg.init.b_res0.ln();
        p[o + 1] = cfg.init.sigma_res0.ln();
        p[o + 2] = cfg.init.ell_res0.ln();
        p[o + 3] = cfg.init.ell_res0.ln();
    }
    for k in 0..l.n_tasks {
        p[l.noise_off + k] = (cfg.init.noise0 - cfg.noise_floor).max(1e-12).ln();
    }

    // signal normalization: scale sigma so the zero-lag physics variance
    // lands at sigma0^2
    if cfg.init.normalize_signal {
        let un = unpack(&p, ctx);
        let blk = un.spec.physics_block(0.0, 0.0);
        let vmax = (0..l.n_out).map(|o| blk[o][o]).fold(f64::MIN, f64::max);
        if vmax > 0.0 {
            p[l.base] = (cfg.init.sigma0 / vmax.sqrt() * cfg.init.sigma0).ln();
        }
    }

    // variational start: m = 0, S = I
    let d = l.d();
    pack_ms_z(
        &mut p,
        ctx,
        &DVector::zeros(d),
        &DMatrix::identity(d, d),
        z,
    );
    p
}

/// Per-parameter learning-rate multipliers: standardized wave speeds are
/// O(5..15) while Adam steps are O(lr), so speed-like raw parameters get a
/// larger step to converge within desk-scale iteration budgets.
fn lr_multipliers(ctx: &Ctx) -> Vec<f64> {
    let l = &ctx.layout;
    let mut mult = vec![1.0; l.total];
    match l.mode {
        ModelMode::Arz { .. } => {
            mult[l.mode_off + 2] = 10.0;
            mult[l.mode_off + 3] = 10.0;
        }
        ModelMode::LwrScalar => {
            mult[l.mode_off] = 10.0;
        }
        ModelMode::LwrBidirectional => {
            mult[l.mode_off] = 10.0;
            mult[l.mode_off + 1] = 10.0;
        }
        ModelMode::PlainSe => {}
    }
    mult
}

fn trainable_mask(cfg: &ModelConfig, ctx: &Ctx) -> Vec<bool> {
    let l = &ctx.layout;
    let mut mask = vec![false; l.total];
    for i in 0..3 {
        mask[l.base + i] = true;
    }
    match l.mode {
        ModelMode::Arz { .. } => {
            mask[l.mode_off] = cfg.train_physics;
            mask[l.mode_off + 1] = cfg.train_physics;
            mask[l.mode_off + 2] = cfg.train_lambdas;
            mask[l.mode_off + 3] = cfg.train_lambdas;
        }
        ModelMode::LwrScalar => {
            mask[l.mode_off] = cfg.train_lambdas;
        }
        ModelMode::LwrBidirectional => {
            mask[l.mode_off] = cfg.train_physics;
            mask[l.mode_off + 1] = cfg.train_physics;
            mask[l.mode_off + 2] = cfg.train_physics;
        }
        ModelMode::PlainSe => {}
    }
    for i in l.res_off..l.res_off + 4 * l.n_out {
        mask[i] = true;
    }
    for i in 0..l.n_tasks {
        mask[l.noise_off + i] = cfg.train_noise;
    }
    let d = l.d();
    let var_trainable = !cfg.closed_form_ms;
    for i in l.m_off..l.m_off + d + d * (d + 1) / 2 {
        mask[i] = var_trainable;
    }
    for i in l.z_off..l.total {
        mask[i] = cfg.train_z;
    }
    mask
}

/// Fit a sparse variational GP to the observations.
pub fn train(obs: &ObservationSet, cfg: &ModelConfig) -> Result<TrainOutcome> {
    let prep = prepare(obs, cfg)?;
    let n_out = match cfg.mode {
        ModelMode::LwrScalar => 1,
        _ => 2,
    };
    let mut warnings = Vec::new();
    let m_req = cfg.m_inducing.max(1);
    let z = farthest_point_inducing(
        &prep.data.pts.iter().map(|p| (p.x, p.t)).collect::<Vec<_>>(),
        m_req,
        cfg.seed,
    );
    if z.len() < m_req {
        warnings.push(format!(
            "only {} unique locations available for {} inducing points",
            z.len(),
            m_req
        ));
    }
    let m_ind = z.len();
    if prep.data.pts.len() < 2 * n_out * m_ind {
        warnings.push(format!(
            "fewer than 2M observations (N = {}, 2M = {})",
            prep.data.pts.len(),
            2 * n_out * m_ind
        ));
    }
    let layout = Layout::new(cfg.mode, n_out, prep.n_tasks, m_ind);
    let expansion = match cfg.mode {
        ModelMode::Arz { expansion } => expansion,
        _ => ArzExpansion::AsPrinted,
    };
    let ctx = Ctx {
        layout,
        coord_map: prep.coord_map,
        coupling: prep.coupling,
        expansion,
        noise_floor: cfg.noise_floor,
    };
    let mut params = initial_params(cfg, &prep, &z, &ctx);

    let proto = SvgpState {
        kernel: unpack(&params, &ctx).spec,
        z: z.clone(),
        m: DVector::zeros(ctx.layout.d()),
        s_factor: DMatrix::identity(ctx.layout.d(), ctx.layout.d()),
        noise: vec![cfg.init.noise0; prep.n_tasks],
        standardizer: prep.standardizer.clone(),
        coord_map: prep.coord_map,
        constants: prep.constants,
        pressure: cfg.pressure,
        rho_scale: prep.rho_scale,
        jitter: cfg.jitter,
        meta: TrainMeta { seed: cfg.seed, iterations: 0, final_elbo: f64::NAN },
    };

    // closed-form variational start (or plain ELBO check)
    {
        let un = unpack(&params, &ctx);
        let mut st = state_from(&un, &proto);
        let e0 = if cfg.closed_form_ms {
            let e = optimize_ms_closed_form(&mut st, &prep.data)?;
            pack_ms_z(&mut params, &ctx, &st.m, &st.s_factor, &st.z);
            e
        } else {
            crate::svgp::elbo(&st, &prep.data)?
        };
        if !e0.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite ELBO at initialization; kernel = {:?}, noise = {:?}",
                st.kernel, st.noise
            )));
        }
    }

    let mask = trainable_mask(cfg, &ctx);
    let lr_mult = lr_multipliers(&ctx);
    let mut adam_m = vec![0.0; params.len()];
    let mut adam_v = vec![0.0; params.len()];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut best_params = params.clone();
    let mut best_elbo = f64::NEG_INFINITY;
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        if cfg.closed_form_ms {
            let un = unpack(&params, &ctx);
            let mut st = state_from(&un, &proto);
            match optimize_ms_closed_form(&mut st, &prep.data) {
                Ok(_) => pack_ms_z(&mut params, &ctx, &st.m, &st.s_factor, &st.z),
                Err(_) => {
                    warnings.push(format!("closed-form update failed at iteration {it}"));
                }
            }
        }
        let res = match eval_with_grad(&params, &ctx, &proto, &prep.data, cfg.train_z) {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("gradient evaluation failed at iteration {it}: {e}"));
                break;
            }
        };
        if !res.elbo.is_finite() {
            warnings.push(format!("non-finite ELBO at iteration {it}; reverting to best state"));
            break;
        }
        if res.elbo > best_elbo {
            best_elbo = res.elbo;
            best_params.copy_from_slice(&params);
        }
        trace.push(best_elbo);

        let tstep = (it + 1) as f64;
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let g = -res.grad[i]; // minimize negative ELBO
            adam_m[i] = b1 * adam_m[i] + (1.0 - b1) * g;
            adam_v[i] = b2 * adam_v[i] + (1.0 - b2) * g * g;
            let mhat = adam_m[i] / (1.0 - b1.powf(tstep));
            let vhat = adam_v[i] / (1.0 - b2.powf(tstep));
            params[i] -= cfg.learning_rate * lr_mult[i] * mhat / (vhat.sqrt() + eps);
        }
    }

    // final state from the best parameters seen
    let un = unpack(&best_params, &ctx);
    let mut state = state_from(&un, &proto);
    let final_elbo = if cfg.closed_form_ms {
        optimize_ms_closed_form(&mut state, &prep.data)?
    } else {
        crate::svgp::elbo(&state, &prep.data)?
    };
    if final_elbo > best_elbo {
        best_elbo = final_elbo;
    }
    if trace.is_empty() {
        trace.push(best_elbo);
    }
    state.meta = TrainMeta { seed: cfg.seed, iterations: trace.len(), final_elbo: best_elbo };
    Ok(TrainOutcome { state, trace, warnings })
}
