//! Dense-GP reference computations.
//!
//! Direct evaluation of the exact GP marginal likelihood and posterior,
//! kept deliberately independent of the sparse variational path so tests
//! can compare the two routes.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::kernel::{cholesky_with_jitter, cross_gram, gram, KernelSpec, Pt};

/// log N(y; 0, K_ff + diag(noise)).
pub fn dense_lml(spec: &KernelSpec, pts: &[Pt], y: &DVector<f64>, noise: &[f64]) -> Result<f64> {
    let n = pts.len();
    let mut k = gram(spec, pts)?;
    for i in 0..n {
        k[(i, i)] += noise[pts[i].out.min(noise.len() - 1)];
    }
    let chol = cholesky_with_jitter(&k, 1e-12)?;
    let l = chol.l();
    let alpha = chol.solve(&DMatrix::from_column_slice(n, 1, y.as_slice()));
    let log_det: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    let quad: f64 = y.dot(&DVector::from_column_slice(alpha.as_slice()));
    Ok(-0.5 * (quad + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Exact posterior mean and variance at query (point, output) pairs.
pub fn dense_posterior(
    spec: &KernelSpec,
    pts: &[Pt],
    y: &DVector<f64>,
    noise: &[f64],
    query: &[Pt],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = pts.len();
    let mut k = gram(spec, pts)?;
    for i in 0..n {
        k[(i, i)] += noise[pts[i].out.min(noise.len() - 1)];
    }
    let chol = cholesky_with_jitter(&k, 1e-12)?;
    let k_fq = cross_gram(spec, pts, query)?;
    let alpha = chol.solve(&DMatrix::from_column_slice(n, 1, y.as_slice()));
    let mean = k_fq.transpose() * DVector::from_column_slice(alpha.as_slice());
    let sol = chol.solve(&k_fq);
    let zero_lag = spec.total_block(0.0, 0.0);
    let mut var = DVector::zeros(query.len());
    for (j, q) in query.iter().enumerate() {
        var[j] = zero_lag[q.out][q.out] - k_fq.column(j).dot(&sol.column(j));
    }
    Ok((mean, var))
}
