//! Physics/residual attribution and subspace-similarity diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{Field, SpaceTimeGrid};
use crate::kernel::cholesky_with_jitter;
use crate::rng::{sample_indices, seeded_rng};
use crate::svgp::{predict_field, PhysicalMap, PredictiveField, SvgpState};

/// Aligned and energy shares of the physics/residual mean split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShareReport {
    pub s_phys: f64,
    pub s_res: f64,
    pub e_phys: f64,
    pub e_res: f64,
    pub n: usize,
}

/// CKA and principal angles between the physics- and residual-induced
/// feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub cka: f64,
    /// top-k principal angles in degrees, non-decreasing
    pub angles_deg: Vec<f64>,
    pub n: usize,
}

impl SimilarityReport {
    pub fn min_deg(&self) -> f64 {
        self.angles_deg.first().copied().unwrap_or(f64::NAN)
    }

    pub fn max_deg(&self) -> f64 {
        self.angles_deg.last().copied().unwrap_or(f64::NAN)
    }
}

/// Posterior-mean split into physics and residual kernel contributions,
/// per latent task. Components carry the task scale (no mean offset), so
/// total = physics + residual holds exactly.
#[derive(Debug, Clone)]
pub struct MeanDecomposition {
    pub total: Vec<DVector<f64>>,
    pub physics: Vec<DVector<f64>>,
    pub residual: Vec<DVector<f64>>,
}

/// Split the posterior mean additively through the kernel components:
/// alpha = K_ZZ^-1 m, then mu_phys = K^phys_XZ alpha and
/// mu_res = K^res_XZ alpha.
pub fn decompose_mean(state: &SvgpState, points: &[(f64, f64)]) -> Result<MeanDecomposition> {
    let n_out = state.n_outputs();
    let inducing = state.inducing_pts();
    let k_zz = crate::kernel::gram(&state.kernel, &inducing)?;
    let chol = cholesky_with_jitter(&k_zz, state.jitter)?;
    let alpha = chol.solve(&DMatrix::from_column_slice(state.m.len(), 1, state.m.as_slice()));
    let alpha = DVector::from_column_slice(alpha.as_slice());

    let mut total = vec![DVector::zeros(points.len()); n_out];
    let mut physics = vec![DVector::zeros(points.len()); n_out];
    let mut residual = vec![DVector::zeros(points.len()); n_out];
    for (pi, &(x, t)) in points.iter().enumerate() {
        let (xs, ts) = state.coord_map.to_std(x, t);
        for out in 0..n_out {
            let scale = state.standardizer.tasks[out].scale;
            let mut acc_p = 0.0;
            let mut acc_r = 0.0;
            for (zi, zpt) in inducing.iter().enumerate() {
                let pb = state.kernel.physics_block(xs - zpt.x, ts - zpt.t);
                let rb = state.kernel.residual_block(xs - zpt.x, ts - zpt.t);
                acc_p += pb[out][zpt.out] * alpha[zi];
                acc_r += rb[out][zpt.out] * alpha[zi];
            }
            physics[out][pi] = scale * acc_p;
            residual[out][pi] = scale * acc_r;
            total[out][pi] = scale * (acc_p + acc_r);
        }
    }
    Ok(MeanDecomposition { total, physics, residual })
}

/// Aligned shares S = mu' mu_c / |mu|^2 and energy shares E = |mu_c|^2 / |mu|^2.
pub fn shares(total: &DVector<f64>, physics: &DVector<f64>, residual: &DVector<f64>) -> Result<ShareReport> {
    let norm2 = total.norm_squared();
    if norm2 <= 0.0 {
        return Err(Error::InvalidArgument("degenerate mean: |mu| = 0".into()));
    }
    Ok(ShareReport {
        s_phys: total.dot(physics) / norm2,
        s_res: total.dot(residual) / norm2,
        e_phys: physics.norm_squared() / norm2,
        e_res: residual.norm_squared() / norm2,
        n: total.len(),
    })
}

/// Residual-to-physics aligned-share ratio on the task-stacked vectors.
pub fn joint_ratio(
    totals: &[DVector<f64>],
    physics: &[DVector<f64>],
    residuals: &[DVector<f64>],
) -> Result<f64> {
    let stack = |vs: &[DVector<f64>]| -> DVector<f64> {
        let len: usize = vs.iter().map(|v| v.len()).sum();
        let mut out = DVector::zeros(len);
        let mut o = 0;
        for v in vs {
            out.rows_mut(o, v.len()).copy_from(v);
            o += v.len();
        }
        out
    };
    let rep = shares(&stack(totals), &stack(physics), &stack(residuals))?;
    if rep.s_phys == 0.0 {
        return Err(Error::Numerical("joint ratio undefined: S_phys = 0".into()));
    }
    Ok(rep.s_res / rep.s_phys)
}

/// Linear-kernel centered kernel alignment between feature matrices.
pub fn cka(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() < 2 || x.nrows() != y.nrows() {
        return Err(Error::InvalidArgument(format!(
            "CKA needs matching sample counts >= 2, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let center = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut c = m.clone();
        for j in 0..c.ncols() {
            let mean = c.column(j).sum() / c.nrows() as f64;
            for i in 0..c.nrows() {
                c[(i, j)] -= mean;
            }
        }
        c
    };
    let xc = center(x);
    let yc = center(y);
    let cross = (xc.transpose() * &yc).norm_squared();
    let nx = (xc.transpose() * &xc).norm();
    let ny = (yc.transpose() * &yc).norm();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::InvalidArgument("zero-variance input to CKA".into()));
    }
    Ok(cross / (nx * ny))
}

/// Principal angles (degrees, non-decreasing) between the column spaces of
/// the centered matrices, from the SVD of Qx' Qy. Rank deficiency truncates
/// the requested count.
pub fn principal_angles(x: &DMatrix<f64>, y: &DMatrix<f64>, k: usize) -> Result<Vec<f64>> {
    if x.nrows() < 2 || x.nrows() != y.nrows() {
        return Err(Error::InvalidArgument("need matching sample counts >= 2".into()));
    }
    let center = |m: &DMatrix<f64>| -> DMatrix<f64> {
        let mut c = m.clone();
        for j in 0..c.ncols() {
            let mean = c.column(j).sum() / c.nrows() as f64;
            for i in 0..c.nrows() {
                c[(i, j)] -= mean;
            }
        }
        c
    };
    let basis = |m: DMatrix<f64>| -> DMatrix<f64> {
        // orthonormal basis of the column space with rank truncation
        let svd = m.svd(true, false);
        let u = svd.u.unwrap();
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * smax.max(1e-300)).count();
        u.columns(0, rank.max(1)).into_owned()
    };
    let qx = basis(center(x));
    let qy = basis(center(y));
    let overlap = qx.transpose() * qy;
    let svd = overlap.svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let kk = k.min(sv.len());
    let angles: Vec<f64> = sv[..kk]
        .iter()
        .map(|s| s.clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    Ok(angles)
}

/// Free/congested membership masks from a speed threshold.
pub fn regime_mask(field: &Field, v_threshold: f64) -> (DMatrix<bool>, DMatrix<bool>) {
    let (nx, nt) = (field.grid.nx, field.grid.nt);
    let mut free = DMatrix::from_element(nx, nt, false);
    let mut congested = DMatrix::from_element(nx, nt, false);
    for i in 0..nx {
        for j in 0..nt {
            if field.mask[(i, j)] {
                if field.v[(i, j)] >= v_threshold {
                    free[(i, j)] = true;
                } else {
                    congested[(i, j)] = true;
                }
            }
        }
    }
    (free, congested)
}

/// Uniform sample without replacement of cells from a mask; all cells with
/// a warning flag when the mask is smaller than n.
pub fn sample_points(
    mask: &DMatrix<bool>,
    n: usize,
    seed: u64,
) -> (Vec<(usize, usize)>, bool) {
    let cells: Vec<(usize, usize)> = (0..mask.ncols())
        .flat_map(|j| (0..mask.nrows()).map(move |i| (i, j)))
        .filter(|&(i, j)| mask[(i, j)])
        .collect();
    if cells.len() <= n {
        return (cells, true);
    }
    let mut rng = seeded_rng(seed);
    let idx = sample_indices(cells.len(), n, &mut rng);
    (idx.into_iter().map(|i| cells[i]).collect(), false)
}

/// Latent and observation-space variance maps plus the noise-floor map.
pub fn uq_fields(state: &SvgpState, grid: &SpaceTimeGrid, map: PhysicalMap) -> Result<PredictiveField> {
    predict_field(state, grid, map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{ArzExpansion, KernelSpec, ResidualHyper, SeHyper};
    use crate::rng::{seeded_rng, uniform01};
    use crate::standardize::{CoordMap, Standardizer, TaskScaler};
    use crate::svgp::{SvgpState, TrainMeta};

    fn toy_state(b_res: f64, sigma: f64) -> SvgpState {
        let kernel = KernelSpec {
            mode: crate::kernel::KernelMode::Arz {
                lambda1: 1.0,
                lambda2: 0.4,
                a: -0.3,
                b: 0.2,
                expansion: ArzExpansion::Full,
            },
            base: SeHyper { sigma, ell_x: 0.6, ell_t: 0.6 },
            residual: vec![
                ResidualHyper { b_res, sigma_res: 1.0, ell_x: 0.25, ell_t: 0.25 },
                ResidualHyper { b_res, sigma_res: 1.0, ell_x: 0.25, ell_t: 0.25 },
            ],
        };
        let mut rng = seeded_rng(21);
        let z: Vec<(f64, f64)> = (0..6)
            .map(|_| (2.0 * uniform01(&mut rng) - 1.0, 2.0 * uniform01(&mut rng) - 1.0))
            .collect();
        let d = 2 * z.len();
        let m = nalgebra::DVector::from_iterator(d, (0..d).map(|i| ((i as f64) * 0.9).sin()));
        SvgpState {
            kernel,
            z,
            m,
            s_factor: nalgebra::DMatrix::identity(d, d),
            noise: vec![0.01, 0.01],
            standardizer: Standardizer {
                tasks: vec![
                    TaskScaler { mean: 0.0, scale: 2.0, clamped: false },
                    TaskScaler { mean: 0.0, scale: 3.0, clamped: false },
                ],
            },
            coord_map: CoordMap { x_mean: 0.0, x_scale: 1.0, t_mean: 0.0, t_scale: 1.0 },
            constants: crate::physics::equilibrium_constants(
                0.04,
                &crate::physics::FundamentalDiagram::Greenshields { v_f: 30.0, rho_jam: 0.12 },
                &crate::physics::PressureLaw::HalfSquare,
                5.0,
            )
            .unwrap(),
            pressure: crate::physics::PressureLaw::HalfSquare,
            rho_scale: 1.0,
            jitter: 1e-10,
            meta: TrainMeta { seed: 0, iterations: 0, final_elbo: 0.0 },
        }
    }

    fn query_points(n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| (2.0 * uniform01(&mut rng) - 1.0, 2.0 * uniform01(&mut rng) - 1.0))
            .collect()
    }

    #[test]
    fn decomposition_is_additive_and_shares_sum_to_one() {
        let state = toy_state(0.3, 1.0);
        let pts = query_points(40, 2);
        let dec = decompose_mean(&state, &pts).unwrap();
        for out in 0..2 {
            let err = (&dec.total[out] - &dec.physics[out] - &dec.residual[out]).amax();
            let scale = dec.total[out].amax().max(1e-300);
            assert!(err <= 1e-10 * scale, "additivity violated: {err}");
            let rep = shares(&dec.total[out], &dec.physics[out], &dec.residual[out]).unwrap();
            assert!((rep.s_phys + rep.s_res - 1.0).abs() <= 1e-10);
            // energy cross-term identity
            let cross = 2.0 * dec.physics[out].dot(&dec.residual[out]);
            let lhs = dec.total[out].norm_squared();
            let rhs = dec.physics[out].norm_squared() + dec.residual[out].norm_squared() + cross;
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1e-300));
        }
    }

    #[test]
    fn no_residual_means_pure_physics() {
        let state = toy_state(0.0, 1.0);
        let pts = query_points(25, 3);
        let dec = decompose_mean(&state, &pts).unwrap();
        for out in 0..2 {
            assert!(dec.residual[out].amax() == 0.0);
            let rep = shares(&dec.total[out], &dec.physics[out], &dec.residual[out]).unwrap();
            assert!((rep.s_phys - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_share_matches_independent_dot_product() {
        let state = toy_state(0.4, 0.8);
        let pts = query_points(30, 5);
        let dec = decompose_mean(&state, &pts).unwrap();
        let rep = shares(&dec.total[0], &dec.physics[0], &dec.residual[0]).unwrap();
        // plain-loop recomputation
        let mut dot = 0.0;
        let mut norm2 = 0.0;
        for i in 0..pts.len() {
            dot += dec.total[0][i] * dec.physics[0][i];
            norm2 += dec.total[0][i] * dec.total[0][i];
        }
        assert!((rep.s_phys - dot / norm2).abs() < 1e-12);
    }

    #[test]
    fn share_edge_cases() {
        let mu = nalgebra::DVector::from_vec(vec![1.0, 2.0, -1.0]);
        // mu_phys = mu
        let rep = shares(&mu, &mu, &nalgebra::DVector::zeros(3)).unwrap();
        assert_eq!(rep.s_phys, 1.0);
        assert_eq!(rep.s_res, 0.0);
        assert_eq!(rep.e_phys, 1.0);
        // orthogonal physics
        let perp = nalgebra::DVector::from_vec(vec![2.0, -1.0, 0.0]);
        let res = &mu - &perp;
        let rep = shares(&mu, &perp, &res).unwrap();
        assert!(rep.s_phys.abs() < 1e-12);
        // degenerate mean
        let zero = nalgebra::DVector::zeros(3);
        assert!(shares(&zero, &zero, &zero).is_err());
    }

    #[test]
    fn joint_ratio_orders_physics_vs_residual_dominance() {
        let pts = query_points(50, 7);
        // physics-dominant: almost no residual
        let phys_model = toy_state(1e-4, 1.0);
        let d1 = decompose_mean(&phys_model, &pts).unwrap();
        let r1 = joint_ratio(&d1.total, &d1.physics, &d1.residual).unwrap();
        // residual-dominant: tiny physics signal, large residual
        let res_model = toy_state(5.0, 0.05);
        let d2 = decompose_mean(&res_model, &pts).unwrap();
        let r2 = joint_ratio(&d2.total, &d2.physics, &d2.residual).unwrap();
        assert!(r1 < 1.0, "physics-dominant ratio {r1} >= 1");
        assert!(r2 > 1.0, "residual-dominant ratio {r2} <= 1");
    }

    #[test]
    fn cka_examples_and_invariance() {
        let mut rng = seeded_rng(13);
        let x = DMatrix::from_fn(40, 2, |_, _| uniform01(&mut rng) - 0.5);
        assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);

        // exactly orthogonal centered columns
        let a = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let b = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, -1.0, -1.0]);
        assert!(cka(&a, &b).unwrap().abs() < 1e-15);

        // scale and rotation invariance
        let y = DMatrix::from_fn(40, 2, |_, _| uniform01(&mut rng) - 0.5);
        let base = cka(&x, &y).unwrap();
        let raw = DMatrix::from_fn(2, 2, |_, _| uniform01(&mut rng) - 0.5);
        let q = raw.qr().q();
        let xr = 3.7 * &x * q;
        assert!((cka(&xr, &y).unwrap() - base).abs() < 1e-10);

        // zero variance errors
        let z = DMatrix::from_element(40, 1, 2.0);
        assert!(cka(&z, &y).is_err());
    }

    #[test]
    fn principal_angle_examples() {
        // identical subspaces
        let x = DMatrix::from_column_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 1.0, 1.0, -1.0]);
        let a = principal_angles(&x, &x, 5).unwrap();
        for ang in &a {
            assert!(ang.abs() < 1e-5, "angle {ang}");
        }

        // {e1, e2} vs {e1, e3} in 3-space (after centering stays exact with
        // sign-balanced columns)
        let e = |k: usize| -> DVector<f64> {
            let mut v = DVector::zeros(6);
            v[2 * k] = 1.0;
            v[2 * k + 1] = -1.0;
            v
        };
        let mut x = DMatrix::zeros(6, 2);
        x.set_column(0, &e(0));
        x.set_column(1, &e(1));
        let mut y = DMatrix::zeros(6, 2);
        y.set_column(0, &e(0));
        y.set_column(1, &e(2));
        let angles = principal_angles(&x, &y, 5).unwrap();
        assert_eq!(angles.len(), 2);
        assert!(angles[0].abs() < 1e-7);
        assert!((angles[1] - 90.0).abs() < 1e-7);

        // orthogonal one-dimensional subspaces
        let angles = principal_angles(
            &DMatrix::from_column_slice(6, 1, e(0).as_slice()),
            &DMatrix::from_column_slice(6, 1, e(1).as_slice()),
            5,
        )
        .unwrap();
        assert!((angles[0] - 90.0).abs() < 1e-7);

        // symmetry in the arguments
        let mut rng = seeded_rng(17);
        let xm = DMatrix::from_fn(20, 3, |_, _| uniform01(&mut rng) - 0.5);
        let ym = DMatrix::from_fn(20, 3, |_, _| uniform01(&mut rng) - 0.5);
        let axy = principal_angles(&xm, &ym, 5).unwrap();
        let ayx = principal_angles(&ym, &xm, 5).unwrap();
        for (p, q) in axy.iter().zip(ayx.iter()) {
            assert!((p - q).abs() < 1e-9);
        }
        // sorted, in range
        for w in axy.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        for a in &axy {
            assert!((0.0..=90.0 + 1e-9).contains(a));
        }
    }

    #[test]
    fn regimes_and_sampling() {
        let grid = crate::grid::SpaceTimeGrid::new(0.0, 100.0, 0.0, 50.0, 10.0, 5.0).unwrap();
        let mut field = crate::grid::Field::empty(grid);
        field.mask.fill(true);
        for i in 0..field.grid.nx {
            for j in 0..field.grid.nt {
                field.v[(i, j)] = i as f64 * 2.0; // 0..18 m/s
            }
        }
        let (free, cong) = regime_mask(&field, 10.0);
        assert!(free.iter().filter(|&&b| b).count() > 0);
        assert!(cong.iter().filter(|&&b| b).count() > 0);
        // threshold below min speed: congested empty
        let (_, cong0) = regime_mask(&field, -1.0);
        assert_eq!(cong0.iter().filter(|&&b| b).count(), 0);

        // sampling determinism and the take-all path
        let (s1, _) = sample_points(&free, 10, 3);
        let (s2, _) = sample_points(&free, 10, 3);
        assert_eq!(s1, s2);
        let count = free.iter().filter(|&&b| b).count();
        let (all, exhausted) = sample_points(&free, count, 0);
        assert_eq!(all.len(), count);
        assert!(exhausted);
    }
}
