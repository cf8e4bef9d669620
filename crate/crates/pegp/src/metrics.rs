//! Error metrics over the valid set and the penetration-sweep harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{asm_reconstruct, rotated_gp_reconstruct, AsmConfig, RotatedGpConfig};
use crate::error::{Error, Result};
use crate::grid::Field;
use crate::observe::sample_probe;
use crate::svgp::{predict_field, train, ModelConfig};
use crate::traj::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae_v: f64,
    pub rmse_v: f64,
    pub mae_rho: f64,
    pub rmse_rho: f64,
    pub n: usize,
}

/// MAE and RMSE per variable over the intersection of the two masks.
pub fn mae_rmse(truth: &Field, estimate: &Field) -> Result<Metrics> {
    if truth.grid != estimate.grid {
        return Err(Error::InvalidArgument("grids differ".into()));
    }
    let mut n = 0usize;
    let (mut abs_v, mut sq_v, mut abs_r, mut sq_r) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..truth.grid.nx {
        for j in 0..truth.grid.nt {
            if truth.mask[(i, j)] && estimate.mask[(i, j)] {
                let dv = estimate.v[(i, j)] - truth.v[(i, j)];
                let dr = estimate.rho[(i, j)] - truth.rho[(i, j)];
                abs_v += dv.abs();
                sq_v += dv * dv;
                abs_r += dr.abs();
                sq_r += dr * dr;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoData("empty valid set".into()));
    }
    let nf = n as f64;
    Ok(Metrics {
        mae_v: abs_v / nf,
        rmse_v: (sq_v / nf).sqrt(),
        mae_rho: abs_r / nf,
        rmse_rho: (sq_r / nf).sqrt(),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Asm,
    RotatedGp,
    PegpLwr,
    PegpArz,
    PlainSe,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Asm => "asm",
            Method::RotatedGp => "rotated_gp",
            Method::PegpLwr => "pegp_lwr",
            Method::PegpArz => "pegp_arz",
            Method::PlainSe => "plain_se",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: &'static str,
    pub p: f64,
    pub seed: u64,
    pub mae_v: f64,
    pub rmse_v: f64,
    pub mae_rho: f64,
    pub rmse_rho: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub penetrations: Vec<f64>,
    pub seeds: Vec<u64>,
    /// worker threads for the sweep cells; 1 runs serially
    pub jobs: usize,
    pub lwr_model: ModelConfig,
    pub arz_model: ModelConfig,
    pub plain_model: ModelConfig,
    pub asm: AsmConfig,
    pub rotated: RotatedGpConfig,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<MetricRow>,
    pub errors: Vec<String>,
}

fn run_cell(
    truth: &Field,
    trajectories: &[Trajectory],
    cfg: &SweepConfig,
    method: Method,
    p: f64,
    seed: u64,
) -> Result<Metrics> {
    let obs = sample_probe(truth, trajectories, p, seed)?;
    let estimate = match method {
        Method::Asm => asm_reconstruct(&obs, &truth.grid, &cfg.asm)?,
        Method::RotatedGp => {
            let rcfg = RotatedGpConfig { seed, ..cfg.rotated };
            rotated_gp_reconstruct(&obs, &truth.grid, &rcfg)?.field
        }
        Method::PegpLwr | Method::PegpArz | Method::PlainSe => {
            let base = match method {
                Method::PegpLwr => &cfg.lwr_model,
                Method::PegpArz => &cfg.arz_model,
                _ => &cfg.plain_model,
            };
            let mcfg = ModelConfig { seed, ..base.clone() };
            let out = train(&obs, &mcfg)?;
            predict_field(&out.state, &truth.grid, mcfg.arz_map)?.to_field()
        }
    };
    mae_rmse(truth, &estimate)
}

/// For each (method, penetration, seed): sample probes, fit, predict on the
/// truth grid, and score. Any failing cell is reported and scored as NaN;
/// the sweep continues. Cell order and results are deterministic; `jobs`
/// only changes the wall time.
pub fn penetration_sweep(
    truth: &Field,
    trajectories: &[Trajectory],
    cfg: &SweepConfig,
) -> SweepOutcome {
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        for &p in &cfg.penetrations {
            for &seed in &cfg.seeds {
                cells.push((method, p, seed));
            }
        }
    }
    let run = |&(method, p, seed): &(Method, f64, u64)| -> (MetricRow, Option<String>) {
        match run_cell(truth, trajectories, cfg, method, p, seed) {
            Ok(m) => (
                MetricRow {
                    method: method.name(),
                    p,
                    seed,
                    mae_v: m.mae_v,
                    rmse_v: m.rmse_v,
                    mae_rho: m.mae_rho,
                    rmse_rho: m.rmse_rho,
                    n: m.n,
                },
                None,
            ),
            Err(e) => (
                MetricRow {
                    method: method.name(),
                    p,
                    seed,
                    mae_v: f64::NAN,
                    rmse_v: f64::NAN,
                    mae_rho: f64::NAN,
                    rmse_rho: f64::NAN,
                    n: 0,
                },
                Some(format!("{} p={p} seed={seed}: {e}", method.name())),
            ),
        }
    };
    let results: Vec<(MetricRow, Option<String>)> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .expect("thread pool");
        pool.install(|| cells.par_iter().map(run).collect())
    } else {
        cells.iter().map(run).collect()
    };
    let mut rows = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for (row, err) in results {
        rows.push(row);
        if let Some(e) = err {
            errors.push(e);
        }
    }
    SweepOutcome { rows, errors }
}

/// Mean metrics per (method, penetration) over seeds.
pub fn summarize(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut keys: Vec<(&'static str, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|k| k.0 == r.method && k.1 == r.p) {
            keys.push((r.method, r.p));
        }
    }
    keys.iter()
        .map(|&(method, p)| {
            let group: Vec<&MetricRow> =
                rows.iter().filter(|r| r.method == method && r.p == p).collect();
            let nf = group.len() as f64;
            let avg = |f: &dyn Fn(&MetricRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / nf;
            MetricRow {
                method,
                p,
                seed: u64::MAX,
                mae_v: avg(&|r| r.mae_v),
                rmse_v: avg(&|r| r.rmse_v),
                mae_rho: avg(&|r| r.mae_rho),
                rmse_rho: avg(&|r| r.rmse_rho),
                n: group.iter().map(|r| r.n).sum::<usize>() / group.len(),
            }
        })
        .collect()
}

pub const MPS_TO_KMH: f64 = 3.6;
pub const VPM_TO_VPKM: f64 = 1000.0;

/// Convert a row's speed metrics to km/h and density metrics to veh/km.
pub fn to_traffic_units(row: &MetricRow) -> MetricRow {
    MetricRow {
        mae_v: row.mae_v * MPS_TO_KMH,
        rmse_v: row.rmse_v * MPS_TO_KMH,
        mae_rho: row.mae_rho * VPM_TO_VPKM,
        rmse_rho: row.rmse_rho * VPM_TO_VPKM,
        ..row.clone()
    }
}
