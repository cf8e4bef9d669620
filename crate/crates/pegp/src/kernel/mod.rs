//! Operator-embedded covariance kernels.
//!
//! The physics block applies the linearized traffic operators to a shared
//! SE base kernel in both arguments. Four modes are provided:
//!
//! * `Arz` — 2x2 block over the Riemann invariants (w1, w2), with two
//!   selectable expansions of the operator product (see [`ArzExpansion`]);
//! * `LwrScalar` — scalar advection operator kernel over the density
//!   perturbation;
//! * `LwrBidirectional` — a weighted pair of advection operators on a
//!   shared base, expanded to (rho, u) through a rank-one task coupling;
//! * `PlainSe` — no operator, SE on the output diagonal (baseline).
//!
//! A small-scale SE residual is added per output on the diagonal. All
//! kernels evaluate on standardized coordinates and are stationary: only
//! the lag (rx, rt) enters.

pub mod se;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use se::{residual_value, ResidualHyper, SeFamily, SeHyper};

use crate::error::{Error, Result};

/// Which expansion of the ARZ operator product to use.
///
/// `AsPrinted` keeps only the diagonal differential entries of the operator
/// matrix when forming each block, so the relaxation coupling enters each
/// block through a single (-a, +b) pair. `Full` expands the complete matrix
/// product including the off-diagonal multiplication entries, which adds
/// the b^2 K / a^2 K terms the diagonal form drops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArzExpansion {
    AsPrinted,
    Full,
}

/// Physics-block parameters; wave speeds and relaxation rates are in
/// standardized units (a speed lambda in m/s enters as lambda * s_t / s_x,
/// a rate in 1/s as rate * s_t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KernelMode {
    Arz {
        lambda1: f64,
        lambda2: f64,
        /// alpha / tau, standardized
        a: f64,
        /// beta / tau, standardized
        b: f64,
        expansion: ArzExpansion,
    },
    LwrScalar {
        lambda0: f64,
    },
    LwrBidirectional {
        c_f: f64,
        c_b: f64,
        w_f: f64,
        /// task coupling vector [1, v'] (or [1, 0] with coupling off)
        coupling: [f64; 2],
    },
    PlainSe,
}

impl KernelMode {
    pub fn n_outputs(&self) -> usize {
        match self {
            KernelMode::LwrScalar { .. } => 1,
            _ => 2,
        }
    }

    /// Number of mode-specific kernel parameters (for gradient layout).
    pub fn n_params(&self) -> usize {
        match self {
            KernelMode::Arz { .. } => 4,       // a, b, lambda1, lambda2
            KernelMode::LwrScalar { .. } => 1, // lambda0
            KernelMode::LwrBidirectional { .. } => 3, // c_f, c_b, w_f
            KernelMode::PlainSe => 0,
        }
    }
}

pub type Block = [[f64; 2]; 2];

/// Sum-of-components covariance: physics block plus per-output residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub mode: KernelMode,
    pub base: SeHyper,
    /// one per output
    pub residual: Vec<ResidualHyper>,
}

/// A kernel input: standardized coordinates plus output index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pt {
    pub x: f64,
    pub t: f64,
    pub out: usize,
}

fn zero_block() -> Block {
    [[0.0; 2]; 2]
}

/// Linear combination of family members defined by the mode coefficients.
/// Linear in `f`, so the same routine maps derivative families to block
/// derivatives.
fn combine_physics(mode: &KernelMode, f: &SeFamily) -> Block {
    let mut k = zero_block();
    match *mode {
        KernelMode::Arz { lambda1: l1, lambda2: l2, a, b, expansion } => {
            let d11 = f.ktt + l1 * l1 * f.kxx + l1 * (f.ktx + f.kxt);
            let d22 = f.ktt + l2 * l2 * f.kxx + l2 * (f.ktx + f.kxt);
            let k11 = d11 - a * (f.kt + f.ktp + l1 * (f.kx + f.kxp)) + a * a * f.k;
            let k22 = d22 + b * (f.kt + f.ktp + l2 * (f.kx + f.kxp)) + b * b * f.k;
            match expansion {
                ArzExpansion::AsPrinted => {
                    k[0][0] = k11;
                    k[1][1] = k22;
                    k[0][1] = f.ktt + l1 * l2 * f.kxx + l1 * f.kxt + l2 * f.ktx
                        - a * (f.ktp + l2 * f.kxp)
                        + b * (f.kt + l1 * f.kx)
                        - a * b * f.k;
                    k[1][0] = f.ktt + l1 * l2 * f.kxx + l1 * f.ktx + l2 * f.kxt
                        + b * (f.ktp + l1 * f.kxp)
                        - a * (f.kt + l2 * f.kx)
                        - a * b * f.k;
                }
                ArzExpansion::Full => {
                    k[0][0] = k11 + b * b * f.k;
                    k[1][1] = k22 + a * a * f.k;
                    k[0][1] = -a * (f.kt + l1 * f.kx)
                        + a * a * f.k
                        + b * (f.ktp + l2 * f.kxp)
                        + b * b * f.k;
                    k[1][0] = -a * (f.ktp + l1 * f.kxp)
                        + a * a * f.k
                        + b * (f.kt + l2 * f.kx)
                        + b * b * f.k;
                }
            }
        }
        KernelMode::LwrScalar { lambda0: l0 } => {
            k[0][0] = f.ktt + l0 * (f.ktx + f.kxt) + l0 * l0 * f.kxx;
        }
        KernelMode::LwrBidirectional { c_f, c_b, w_f, coupling } => {
            let kf = f.ktt + c_f * (f.ktx + f.kxt) + c_f * c_f * f.kxx;
            let kb = f.ktt + c_b * (f.ktx + f.kxt) + c_b * c_b * f.kxx;
            let kp = w_f * kf + (1.0 - w_f) * kb;
            for i in 0..2 {
                for j in 0..2 {
                    k[i][j] = kp * coupling[i] * coupling[j];
                }
            }
        }
        KernelMode::PlainSe => {
            k[0][0] = f.k;
            k[1][1] = f.k;
        }
    }
    k
}

/// Partials of the physics block with respect to the mode parameters,
/// written into `out` in the mode's parameter order.
fn physics_mode_grads(mode: &KernelMode, f: &SeFamily, out: &mut [Block]) {
    match *mode {
        KernelMode::Arz { lambda1: l1, lambda2: l2, a, b, expansion } => {
            let (da, db, dl1, dl2) = match expansion {
                ArzExpansion::AsPrinted => {
                    let da = [
                        [
                            -(f.kt + f.ktp + l1 * (f.kx + f.kxp)) + 2.0 * a * f.k,
                            -(f.ktp + l2 * f.kxp) - b * f.k,
                        ],
                        [-(f.kt + l2 * f.kx) - b * f.k, 0.0],
                    ];
                    let db = [
                        [0.0, (f.kt + l1 * f.kx) - a * f.k],
                        [
                            (f.ktp + l1 * f.kxp) - a * f.k,
                            (f.kt + f.ktp + l2 * (f.kx + f.kxp)) + 2.0 * b * f.k,
                        ],
                    ];
                    let dl1 = [
                        [
                            2.0 * l1 * f.kxx + f.ktx + f.kxt - a * (f.kx + f.kxp),
                            l2 * f.kxx + f.kxt + b * f.kx,
                        ],
                        [l2 * f.kxx + f.ktx + b * f.kxp, 0.0],
                    ];
                    let dl2 = [
                        [0.0, l1 * f.kxx + f.ktx - a * f.kxp],
                        [
                            l1 * f.kxx + f.kxt - a * f.kx,
                            2.0 * l2 * f.kxx + f.ktx + f.kxt + b * (f.kx + f.kxp),
                        ],
                    ];
                    (da, db, dl1, dl2)
                }
                ArzExpansion::Full => {
                    let da = [
                        [
                            -(f.kt + f.ktp + l1 * (f.kx + f.kxp)) + 2.0 * a * f.k,
                            -(f.kt + l1 * f.kx) + 2.0 * a * f.k,
                        ],
                        [
                            -(f.ktp + l1 * f.kxp) + 2.0 * a * f.k,
                            2.0 * a * f.k,
                        ],
                    ];
                    let db = [
                        [2.0 * b * f.k, (f.ktp + l2 * f.kxp) + 2.0 * b * f.k],
                        [
                            (f.kt + l2 * f.kx) + 2.0 * b * f.k,
                            (f.kt + f.ktp + l2 * (f.kx + f.kxp)) + 2.0 * b * f.k,
                        ],
                    ];
                    let dl1 = [
                        [
                            2.0 * l1 * f.kxx + f.ktx + f.kxt - a * (f.kx + f.kxp),
                            -a * f.kx,
                        ],
                        [-a * f.kxp, 0.0],
                    ];
                    let dl2 = [
                        [0.0, b * f.kxp],
                        [
                            b * f.kx,
                            2.0 * l2 * f.kxx + f.ktx + f.kxt + b * (f.kx + f.kxp),
                        ],
                    ];
                    (da, db, dl1, dl2)
                }
            };
            out[0] = da;
            out[1] = db;
            out[2] = dl1;
            out[3] = dl2;
        }
        KernelMode::LwrScalar { lambda0: l0 } => {
            let mut g = zero_block();
            g[0][0] = f.ktx + f.kxt + 2.0 * l0 * f.kxx;
            out[0] = g;
        }
        KernelMode::LwrBidirectional { c_f, c_b, w_f, coupling } => {
            let kf = f.ktt + c_f * (f.ktx + f.kxt) + c_f * c_f * f.kxx;
            let kb = f.ktt + c_b * (f.ktx + f.kxt) + c_b * c_b * f.kxx;
            let dkf = f.ktx + f.kxt + 2.0 * c_f * f.kxx;
            let dkb = f.ktx + f.kxt + 2.0 * c_b * f.kxx;
            let mut gf = zero_block();
            let mut gb = zero_block();
            let mut gw = zero_block();
            for i in 0..2 {
                for j in 0..2 {
                    let cc = coupling[i] * coupling[j];
                    gf[i][j] = w_f * dkf * cc;
                    gb[i][j] = (1.0 - w_f) * dkb * cc;
                    gw[i][j] = (kf - kb) * cc;
                }
            }
            out[0] = gf;
            out[1] = gb;
            out[2] = gw;
        }
        KernelMode::PlainSe => {}
    }
}

impl KernelSpec {
    pub fn n_outputs(&self) -> usize {
        self.mode.n_outputs()
    }

    /// Number of kernel parameters: 3 base + mode + 4 per residual.
    pub fn n_params(&self) -> usize {
        3 + self.mode.n_params() + 4 * self.residual.len()
    }

    pub fn validate(&self) -> Result<()> {
        let hypers = {
            let mut v = vec![self.base.sigma, self.base.ell_x, self.base.ell_t];
            for r in &self.residual {
                v.extend_from_slice(&[r.b_res, r.sigma_res, r.ell_x, r.ell_t]);
            }
            v
        };
        if hypers.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidArgument("NaN or infinite hyperparameter".into()));
        }
        if self.residual.len() != self.n_outputs() {
            return Err(Error::InvalidArgument(format!(
                "need one residual per output: {} != {}",
                self.residual.len(),
                self.n_outputs()
            )));
        }
        if let KernelMode::LwrBidirectional { w_f, .. } = self.mode {
            if !(0.0..=1.0).contains(&w_f) {
                return Err(Error::InvalidArgument(format!("w_f = {w_f} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Physics block only at lag (rx, rt).
    pub fn physics_block(&self, rx: f64, rt: f64) -> Block {
        let f = SeFamily::eval(&self.base, rx, rt);
        combine_physics(&self.mode, &f)
    }

    /// Residual contribution (diagonal in the outputs).
    pub fn residual_block(&self, rx: f64, rt: f64) -> Block {
        let mut k = zero_block();
        for (i, r) in self.residual.iter().enumerate() {
            k[i][i] = residual_value(r, rx, rt);
        }
        k
    }

    /// Total kernel block at lag (rx, rt).
    pub fn total_block(&self, rx: f64, rt: f64) -> Block {
        let mut k = self.physics_block(rx, rt);
        for (i, r) in self.residual.iter().enumerate() {
            k[i][i] += residual_value(r, rx, rt);
        }
        k
    }

    /// Total block together with partials w.r.t. all kernel parameters in
    /// the layout [log_sigma, log_ell_x, log_ell_t, mode..., residual...].
    pub fn total_block_with_grads(&self, rx: f64, rt: f64, grads: &mut [Block]) -> Block {
        debug_assert_eq!(grads.len(), self.n_params());
        let (f, dlog) = SeFamily::eval_with_log_grads(&self.base, rx, rt);
        let mut k = combine_physics(&self.mode, &f);
        for (g, df) in grads.iter_mut().zip(dlog.iter()) {
            *g = combine_physics(&self.mode, df);
        }
        let nm = self.mode.n_params();
        physics_mode_grads(&self.mode, &f, &mut grads[3..3 + nm]);
        for (i, r) in self.residual.iter().enumerate() {
            let (v, dres) = se::residual_with_log_grads(r, rx, rt);
            k[i][i] += v;
            for (j, d) in dres.iter().enumerate() {
                let mut g = zero_block();
                g[i][i] = *d;
                grads[3 + nm + 4 * i + j] = g;
            }
        }
        k
    }

    /// Total block together with partials w.r.t. the lag (rx, rt); used for
    /// inducing-input gradients.
    pub fn total_block_with_lag_grads(&self, rx: f64, rt: f64) -> (Block, Block, Block) {
        let (f, dr) = SeFamily::eval_with_lag_grads(&self.base, rx, rt);
        let mut k = combine_physics(&self.mode, &f);
        let mut dkx = combine_physics(&self.mode, &dr[0]);
        let mut dkt = combine_physics(&self.mode, &dr[1]);
        for (i, r) in self.residual.iter().enumerate() {
            let (v, d) = se::residual_with_lag_grads(r, rx, rt);
            k[i][i] += v;
            dkx[i][i] += d[0];
            dkt[i][i] += d[1];
        }
        (k, dkx, dkt)
    }
}

/// Gram matrix of the total kernel over (point, output) pairs.
pub fn gram(spec: &KernelSpec, items: &[Pt]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = items.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let blk = spec.total_block(items[i].x - items[j].x, items[i].t - items[j].t);
            let v = blk[items[i].out][items[j].out];
            g[(i, j)] = v;
            if i != j {
                // stationary kernel: K(si, sj)[oi][oj] = K(sj, si)[oj][oi]
                g[(j, i)] = v;
            }
        }
    }
    Ok(g)
}

/// Cross-Gram between two (point, output) lists.
pub fn cross_gram(spec: &KernelSpec, rows: &[Pt], cols: &[Pt]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let mut g = DMatrix::zeros(rows.len(), cols.len());
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            let blk = spec.total_block(r.x - c.x, r.t - c.t);
            g[(i, j)] = blk[r.out][c.out];
        }
    }
    Ok(g)
}

/// Default relative jitter.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Add jitter * mean(diag) to the diagonal.
pub fn add_jitter(g: &mut DMatrix<f64>, jitter: f64) {
    let n = g.nrows();
    if n == 0 {
        return;
    }
    let mean_diag = (0..n).map(|i| g[(i, i)]).sum::<f64>() / n as f64;
    let eps = jitter * mean_diag;
    for i in 0..n {
        g[(i, i)] += eps;
    }
}

/// Cholesky with escalating jitter: the base jitter is doubled up to three
/// times before giving up.
pub fn cholesky_with_jitter(
    g: &DMatrix<f64>,
    base_jitter: f64,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let mut jitter = base_jitter;
    for _ in 0..4 {
        let mut gj = g.clone();
        add_jitter(&mut gj, jitter);
        if let Some(chol) = nalgebra::Cholesky::new(gj) {
            return Ok(chol);
        }
        jitter *= 2.0;
    }
    Err(Error::IllConditioned(format!(
        "Cholesky failed after jitter escalation to {jitter:.3e}"
    )))
}
