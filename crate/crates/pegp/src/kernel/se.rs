//! Squared-exponential base kernel and its analytic derivative family.
//!
//! The operator-embedded kernels consume exactly nine quantities: the SE
//! value, its first partials with respect to each argument's coordinates,
//! and the mixed second partials. Unprimed subscripts differentiate the
//! first argument, primed subscripts the second; with rx = x - x' and
//! rt = t - t' every member is a polynomial prefactor times the SE itself.

use serde::{Deserialize, Serialize};

/// Base kernel hyperparameters; all strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeHyper {
    pub sigma: f64,
    pub ell_x: f64,
    pub ell_t: f64,
}

/// Small-scale residual kernel hyperparameters; all strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualHyper {
    pub b_res: f64,
    pub sigma_res: f64,
    pub ell_x: f64,
    pub ell_t: f64,
}

/// The nine SE derivative quantities at lag (rx, rt).
#[derive(Debug, Clone, Copy, Default)]
pub struct SeFamily {
    /// k0
    pub k: f64,
    /// d k0 / dt
    pub kt: f64,
    /// d k0 / dt'
    pub ktp: f64,
    /// d k0 / dx
    pub kx: f64,
    /// d k0 / dx'
    pub kxp: f64,
    /// d^2 k0 / dt dt'
    pub ktt: f64,
    /// d^2 k0 / dx dx'
    pub kxx: f64,
    /// d^2 k0 / dt dx'
    pub ktx: f64,
    /// d^2 k0 / dx dt'
    pub kxt: f64,
}

impl SeFamily {
    pub fn eval(h: &SeHyper, rx: f64, rt: f64) -> SeFamily {
        let ix = 1.0 / (h.ell_x * h.ell_x);
        let it = 1.0 / (h.ell_t * h.ell_t);
        let q = h.sigma * h.sigma * (-0.5 * (rx * rx * ix + rt * rt * it)).exp();
        SeFamily {
            k: q,
            kt: -rt * it * q,
            ktp: rt * it * q,
            kx: -rx * ix * q,
            kxp: rx * ix * q,
            ktt: (it - rt * rt * it * it) * q,
            kxx: (ix - rx * rx * ix * ix) * q,
            ktx: -rt * rx * it * ix * q,
            kxt: -rt * rx * it * ix * q,
        }
    }

    /// Partials of every family member with respect to
    /// (log sigma, log ell_x, log ell_t).
    pub fn eval_with_log_grads(h: &SeHyper, rx: f64, rt: f64) -> (SeFamily, [SeFamily; 3]) {
        let ix = 1.0 / (h.ell_x * h.ell_x);
        let it = 1.0 / (h.ell_t * h.ell_t);
        let ax = rx * rx * ix; // (rx/ell_x)^2
        let at = rt * rt * it;
        let f = Self::eval(h, rx, rt);
        let q = f.k;

        let d_sigma = f.scaled(2.0);

        // d/d log ell_x: product rule on the polynomial prefactor and the exponential
        let d_lx = SeFamily {
            k: ax * f.k,
            kt: ax * f.kt,
            ktp: ax * f.ktp,
            kx: (ax - 2.0) * f.kx,
            kxp: (ax - 2.0) * f.kxp,
            ktt: ax * f.ktt,
            kxx: (-2.0 * ix + 4.0 * rx * rx * ix * ix) * q + ax * f.kxx,
            ktx: (ax - 2.0) * f.ktx,
            kxt: (ax - 2.0) * f.kxt,
        };
        let d_lt = SeFamily {
            k: at * f.k,
            kt: (at - 2.0) * f.kt,
            ktp: (at - 2.0) * f.ktp,
            kx: at * f.kx,
            kxp: at * f.kxp,
            ktt: (-2.0 * it + 4.0 * rt * rt * it * it) * q + at * f.ktt,
            kxx: at * f.kxx,
            ktx: (at - 2.0) * f.ktx,
            kxt: (at - 2.0) * f.kxt,
        };
        (f, [d_sigma, d_lx, d_lt])
    }

    /// Partials of every family member with respect to (rx, rt).
    pub fn eval_with_lag_grads(h: &SeHyper, rx: f64, rt: f64) -> (SeFamily, [SeFamily; 2]) {
        let ix = 1.0 / (h.ell_x * h.ell_x);
        let it = 1.0 / (h.ell_t * h.ell_t);
        let f = Self::eval(h, rx, rt);
        let q = f.k;

        let d_rx = SeFamily {
            k: -rx * ix * q,
            kt: -f.ktx,
            ktp: f.ktx,
            kx: -f.kxx,
            kxp: f.kxx,
            ktt: (it - rt * rt * it * it) * (-rx * ix) * q,
            kxx: -2.0 * rx * ix * ix * q + (ix - rx * rx * ix * ix) * (-rx * ix) * q,
            ktx: -rt * it * ix * (1.0 - rx * rx * ix) * q,
            kxt: -rt * it * ix * (1.0 - rx * rx * ix) * q,
        };
        let d_rt = SeFamily {
            k: -rt * it * q,
            kt: -f.ktt,
            ktp: f.ktt,
            kx: -f.kxt,
            kxp: f.kxt,
            ktt: -2.0 * rt * it * it * q + (it - rt * rt * it * it) * (-rt * it) * q,
            kxx: (ix - rx * rx * ix * ix) * (-rt * it) * q,
            ktx: -rx * ix * it * (1.0 - rt * rt * it) * q,
            kxt: -rx * ix * it * (1.0 - rt * rt * it) * q,
        };
        (f, [d_rx, d_rt])
    }

    pub fn scaled(&self, c: f64) -> SeFamily {
        SeFamily {
            k: c * self.k,
            kt: c * self.kt,
            ktp: c * self.ktp,
            kx: c * self.kx,
            kxp: c * self.kxp,
            ktt: c * self.ktt,
            kxx: c * self.kxx,
            ktx: c * self.ktx,
            kxt: c * self.kxt,
        }
    }
}

/// Residual SE value at lag (rx, rt): B sigma^2 exp(-rx^2/2lx^2 - rt^2/2lt^2).
pub fn residual_value(h: &ResidualHyper, rx: f64, rt: f64) -> f64 {
    let ex = rx / h.ell_x;
    let et = rt / h.ell_t;
    h.b_res * h.sigma_res * h.sigma_res * (-0.5 * (ex * ex + et * et)).exp()
}

/// Residual value plus partials w.r.t. (log b, log sigma_res, log ell_x, log ell_t).
pub fn residual_with_log_grads(h: &ResidualHyper, rx: f64, rt: f64) -> (f64, [f64; 4]) {
    let v = residual_value(h, rx, rt);
    let ax = rx * rx / (h.ell_x * h.ell_x);
    let at = rt * rt / (h.ell_t * h.ell_t);
    (v, [v, 2.0 * v, ax * v, at * v])
}

/// Residual value plus partials w.r.t. (rx, rt).
pub fn residual_with_lag_grads(h: &ResidualHyper, rx: f64, rt: f64) -> (f64, [f64; 2]) {
    let v = residual_value(h, rx, rt);
    (v, [-rx / (h.ell_x * h.ell_x) * v, -rt / (h.ell_t * h.ell_t) * v])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_rng, uniform01};

    fn fd_scale(h: &SeHyper) -> f64 {
        let s2 = h.sigma * h.sigma;
        s2 * (1.0 + 1.0 / (h.ell_x * h.ell_x) + 1.0 / (h.ell_t * h.ell_t))
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6 * scale)
    }

    #[test]
    fn zero_lag_values() {
        let h = SeHyper { sigma: 1.3, ell_x: 0.7, ell_t: 0.4 };
        let f = SeFamily::eval(&h, 0.0, 0.0);
        let s2 = 1.3 * 1.3;
        assert_eq!(f.k, s2);
        assert_eq!(f.kt, 0.0);
        assert_eq!(f.ktp, 0.0);
        assert_eq!(f.kx, 0.0);
        assert_eq!(f.kxp, 0.0);
        assert!((f.ktt - s2 / (0.4 * 0.4)).abs() < 1e-12);
        assert!((f.kxx - s2 / (0.7 * 0.7)).abs() < 1e-12);
        assert_eq!(f.ktx, 0.0);
        assert_eq!(f.kxt, 0.0);
    }

    #[test]
    fn family_matches_finite_differences() {
        let mut rng = seeded_rng(101);
        let hstep = 1e-4;
        for _ in 0..100 {
            let h = SeHyper {
                sigma: 0.5 + 1.5 * uniform01(&mut rng),
                ell_x: 0.3 + 1.2 * uniform01(&mut rng),
                ell_t: 0.3 + 1.2 * uniform01(&mut rng),
            };
            let (x, t) = (3.0 * uniform01(&mut rng) - 1.5, 3.0 * uniform01(&mut rng) - 1.5);
            let (xp, tp) = (3.0 * uniform01(&mut rng) - 1.5, 3.0 * uniform01(&mut rng) - 1.5);
            let k0 = |x: f64, t: f64, xp: f64, tp: f64| SeFamily::eval(&h, x - xp, t - tp).k;
            let f = SeFamily::eval(&h, x - xp, t - tp);
            let scale = fd_scale(&h);

            let fd_t = (k0(x, t + hstep, xp, tp) - k0(x, t - hstep, xp, tp)) / (2.0 * hstep);
            let fd_tp = (k0(x, t, xp, tp + hstep) - k0(x, t, xp, tp - hstep)) / (2.0 * hstep);
            let fd_x = (k0(x + hstep, t, xp, tp) - k0(x - hstep, t, xp, tp)) / (2.0 * hstep);
            let fd_xp = (k0(x, t, xp + hstep, tp) - k0(x, t, xp - hstep, tp)) / (2.0 * hstep);
            let fd_tt = (k0(x, t + hstep, xp, tp + hstep) - k0(x, t + hstep, xp, tp - hstep)
                - k0(x, t - hstep, xp, tp + hstep)
                + k0(x, t - hstep, xp, tp - hstep))
                / (4.0 * hstep * hstep);
            let fd_xx = (k0(x + hstep, t, xp + hstep, tp) - k0(x + hstep, t, xp - hstep, tp)
                - k0(x - hstep, t, xp + hstep, tp)
                + k0(x - hstep, t, xp - hstep, tp))
                / (4.0 * hstep * hstep);
            let fd_tx = (k0(x, t + hstep, xp + hstep, tp) - k0(x, t + hstep, xp - hstep, tp)
                - k0(x, t - hstep, xp + hstep, tp)
                + k0(x, t - hstep, xp - hstep, tp))
                / (4.0 * hstep * hstep);
            let fd_xt = (k0(x + hstep, t, xp, tp + hstep) - k0(x + hstep, t, xp, tp - hstep)
                - k0(x - hstep, t, xp, tp + hstep)
                + k0(x - hstep, t, xp, tp - hstep))
                / (4.0 * hstep * hstep);

            for (an, fd) in [
                (f.kt, fd_t),
                (f.ktp, fd_tp),
                (f.kx, fd_x),
                (f.kxp, fd_xp),
                (f.ktt, fd_tt),
                (f.kxx, fd_xx),
                (f.ktx, fd_tx),
                (f.kxt, fd_xt),
            ] {
                assert!(
                    rel_err(an, fd, scale) <= 1e-5,
                    "analytic {an} vs fd {fd} (scale {scale})"
                );
            }
        }
    }

    #[test]
    fn log_grads_match_finite_differences() {
        let mut rng = seeded_rng(77);
        let eps = 1e-6;
        for _ in 0..50 {
            let h = SeHyper {
                sigma: 0.5 + uniform01(&mut rng),
                ell_x: 0.4 + uniform01(&mut rng),
                ell_t: 0.4 + uniform01(&mut rng),
            };
            let rx = 2.0 * uniform01(&mut rng) - 1.0;
            let rt = 2.0 * uniform01(&mut rng) - 1.0;
            let (_, grads) = SeFamily::eval_with_log_grads(&h, rx, rt);
            let bump = |i: usize, s: f64| -> SeHyper {
                let mut hh = h;
                match i {
                    0 => hh.sigma *= s.exp(),
                    1 => hh.ell_x *= s.exp(),
                    _ => hh.ell_t *= s.exp(),
                }
                hh
            };
            for i in 0..3 {
                let fp = SeFamily::eval(&bump(i, eps), rx, rt);
                let fm = SeFamily::eval(&bump(i, -eps), rx, rt);
                let num = |p: f64, m: f64| (p - m) / (2.0 * eps);
                let pairs = [
                    (grads[i].k, num(fp.k, fm.k)),
                    (grads[i].kt, num(fp.kt, fm.kt)),
                    (grads[i].ktt, num(fp.ktt, fm.ktt)),
                    (grads[i].kxx, num(fp.kxx, fm.kxx)),
                    (grads[i].ktx, num(fp.ktx, fm.ktx)),
                    (grads[i].kxp, num(fp.kxp, fm.kxp)),
                ];
                for (an, fd) in pairs {
                    assert!(rel_err(an, fd, fd_scale(&h)) < 1e-4, "param {i}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn lag_grads_match_finite_differences() {
        let mut rng = seeded_rng(78);
        let hstep = 1e-5;
        for _ in 0..50 {
            let h = SeHyper {
                sigma: 0.5 + uniform01(&mut rng),
                ell_x: 0.4 + uniform01(&mut rng),
                ell_t: 0.4 + uniform01(&mut rng),
            };
            let rx = 2.0 * uniform01(&mut rng) - 1.0;
            let rt = 2.0 * uniform01(&mut rng) - 1.0;
            let (_, dr) = SeFamily::eval_with_lag_grads(&h, rx, rt);
            let fpx = SeFamily::eval(&h, rx + hstep, rt);
            let fmx = SeFamily::eval(&h, rx - hstep, rt);
            let fpt = SeFamily::eval(&h, rx, rt + hstep);
            let fmt = SeFamily::eval(&h, rx, rt - hstep);
            let num = |p: f64, m: f64| (p - m) / (2.0 * hstep);
            let checks = [
                (dr[0].k, num(fpx.k, fmx.k)),
                (dr[0].kt, num(fpx.kt, fmx.kt)),
                (dr[0].kxx, num(fpx.kxx, fmx.kxx)),
                (dr[0].ktx, num(fpx.ktx, fmx.ktx)),
                (dr[1].k, num(fpt.k, fmt.k)),
                (dr[1].ktt, num(fpt.ktt, fmt.ktt)),
                (dr[1].kxt, num(fpt.kxt, fmt.kxt)),
                (dr[1].kxp, num(fpt.kxp, fmt.kxp)),
            ];
            for (an, fd) in checks {
                assert!(rel_err(an, fd, fd_scale(&h)) < 1e-4, "{an} vs {fd}");
            }
        }
    }
}
