//! Cross-module pipeline checks: trajectory aggregation against the
//! simulator, model-file round trips, dense-coverage fits, and the
//! training-cost scaling of the sparse inference.

use pegp::grid::SpaceTimeGrid;
use pegp::io;
use pegp::kernel::ArzExpansion;
use pegp::metrics::mae_rmse;
use pegp::observe::{sample_probe, Observation, ObservationSet, Output};
use pegp::sim::{emit_trajectories, godunov_lwr, linear_advection_field, InitialProfile, SimScenario};
use pegp::svgp::{predict_field, train, ModelConfig, ModelMode, PhysicalMap};
use pegp::traj::aggregate_trajectories;

fn stop_and_go() -> SimScenario {
    SimScenario::default()
}

/// Observation set covering every masked cell of a field.
fn observe_all(field: &pegp::grid::Field) -> ObservationSet {
    let mut entries = Vec::new();
    for i in 0..field.grid.nx {
        for j in 0..field.grid.nt {
            if field.mask[(i, j)] {
                let (x, t) = (field.grid.x_center(i), field.grid.t_center(j));
                entries.push(Observation { x, t, output: Output::Density, value: field.rho[(i, j)] });
                entries.push(Observation { x, t, output: Output::Speed, value: field.v[(i, j)] });
            }
        }
    }
    ObservationSet::new(entries, 0)
}

#[test]
fn aggregated_swarm_density_matches_simulator() {
    // a dense trajectory swarm advected through the Godunov field must
    // reproduce the cell-average density up to the ensemble normalization
    let truth = godunov_lwr(&stop_and_go()).unwrap();
    let trajectories = emit_trajectories(&truth, 3000, 7, true);
    let agg = aggregate_trajectories(&trajectories, &truth.grid).unwrap();

    // normalize the swarm's total vehicle-time to the field's total mass
    let total_truth: f64 = truth.rho.iter().sum();
    let total_agg: f64 = agg.field.rho.iter().sum();
    let scale = total_truth / total_agg;

    let mut ok = 0usize;
    let mut occupied = 0usize;
    for i in 0..truth.grid.nx {
        for j in 0..truth.grid.nt {
            if agg.field.mask[(i, j)] {
                occupied += 1;
                let est = agg.field.rho[(i, j)] * scale;
                if (est - truth.rho[(i, j)]).abs() <= 0.10 * truth.rho[(i, j)] {
                    ok += 1;
                }
            }
        }
    }
    assert!(occupied > 3000, "swarm covered only {occupied} cells");
    let frac = ok as f64 / occupied as f64;
    assert!(frac >= 0.90, "only {:.1}% of occupied cells within 10%", 100.0 * frac);
}

#[test]
fn model_json_round_trip_preserves_predictions() {
    let truth = godunov_lwr(&stop_and_go()).unwrap();
    let trajectories = emit_trajectories(&truth, 120, 3, true);
    let obs = sample_probe(&truth, &trajectories, 0.2, 5).unwrap();
    let cfg = ModelConfig {
        mode: ModelMode::Arz { expansion: ArzExpansion::AsPrinted },
        m_inducing: 12,
        iterations: 25,
        ..ModelConfig::default()
    };
    let out = train(&obs, &cfg).unwrap();
    let json = io::model_to_json(&out.state).unwrap();
    let loaded = io::model_from_json(&json).unwrap();

    let grid = SpaceTimeGrid::new(0.0, 600.0, 0.0, 300.0, 60.0, 30.0).unwrap();
    let pf1 = predict_field(&out.state, &grid, PhysicalMap::Delta).unwrap();
    let pf2 = predict_field(&loaded, &grid, PhysicalMap::Delta).unwrap();
    for i in 0..grid.nx {
        for j in 0..grid.nt {
            assert!((pf1.mu_rho[(i, j)] - pf2.mu_rho[(i, j)]).abs() < 1e-6);
            assert!((pf1.mu_v[(i, j)] - pf2.mu_v[(i, j)]).abs() < 1e-5);
            assert!((pf1.var_v_obs[(i, j)] - pf2.var_v_obs[(i, j)]).abs() < 1e-5);
        }
    }
    // saving the loaded model reproduces the bytes
    assert_eq!(io::model_to_json(&loaded).unwrap(), json);
}

#[test]
fn dense_noise_free_coverage_interpolates_to_one_percent() {
    // exact advection field, every cell observed: each GP method must reach
    // MAE below 1% of the field scale (max - min per variable)
    let scenario = SimScenario {
        initial: InitialProfile::SineWave { rho0: 0.04, amplitude: 0.01, wavelength: 600.0 },
        ..SimScenario::default()
    };
    let lambda0 = scenario.fd.flux_prime(0.04);
    let truth = linear_advection_field(&scenario, lambda0).unwrap();
    let obs = observe_all(&truth);

    let v_vals: Vec<f64> = truth.v.iter().copied().collect();
    let r_vals: Vec<f64> = truth.rho.iter().copied().collect();
    let range = |v: &[f64]| {
        v.iter().fold(f64::MIN, |a, &b| a.max(b)) - v.iter().fold(f64::MAX, |a, &b| a.min(b))
    };
    let (v_scale, r_scale) = (range(&v_vals), range(&r_vals));

    // sparse GP methods
    for mode in [
        ModelMode::LwrBidirectional,
        ModelMode::Arz { expansion: ArzExpansion::AsPrinted },
    ] {
        let cfg = ModelConfig {
            mode,
            m_inducing: 48,
            iterations: 120,
            rho0: Some(0.04),
            ..ModelConfig::default()
        };
        let out = train(&obs, &cfg).unwrap();
        let est = predict_field(&out.state, &truth.grid, cfg.arz_map).unwrap().to_field();
        let m = mae_rmse(&truth, &est).unwrap();
        assert!(
            m.mae_v <= 0.01 * v_scale,
            "{:?}: speed MAE {} above 1% of scale {v_scale}",
            cfg.mode.name(),
            m.mae_v
        );
        assert!(
            m.mae_rho <= 0.01 * r_scale,
            "{:?}: density MAE {} above 1% of scale {r_scale}",
            cfg.mode.name(),
            m.mae_rho
        );
    }

    // dense rotated GP baseline
    let rcfg = pegp::baselines::RotatedGpConfig {
        refine_iters: 30,
        ..pegp::baselines::RotatedGpConfig::default()
    };
    let est = pegp::baselines::rotated_gp_reconstruct(&obs, &truth.grid, &rcfg).unwrap().field;
    let m = mae_rmse(&truth, &est).unwrap();
    assert!(m.mae_v <= 0.01 * v_scale, "rotated GP speed MAE {}", m.mae_v);
    assert!(m.mae_rho <= 0.01 * r_scale, "rotated GP density MAE {}", m.mae_rho);
}

#[test]
fn training_cost_scales_linearly_in_n() {
    // per-iteration wall time at fixed M over N in {250, 500, 1000, 2000};
    // log-log slope within [0.8, 1.3]
    use std::time::Instant;

    let make_obs = |n_cells: usize| -> ObservationSet {
        let mut rng = pegp::rng::seeded_rng(0);
        let mut entries = Vec::new();
        for _ in 0..n_cells {
            let x = 600.0 * pegp::rng::uniform01(&mut rng);
            let t = 300.0 * pegp::rng::uniform01(&mut rng);
            let rho = 0.02 + 0.06 * pegp::rng::uniform01(&mut rng);
            entries.push(Observation { x, t, output: Output::Density, value: rho });
            entries.push(Observation {
                x,
                t,
                output: Output::Speed,
                value: 30.0 * (1.0 - rho / 0.12),
            });
        }
        ObservationSet::new(entries, 0)
    };

    let sizes = [250usize, 500, 1000, 2000];
    let iters = 6;
    let mut times = Vec::new();
    for &n in &sizes {
        let obs = make_obs(n / 2);
        let cfg = ModelConfig {
            mode: ModelMode::LwrBidirectional,
            m_inducing: 16,
            iterations: iters,
            ..ModelConfig::default()
        };
        // best of three runs to shrug off scheduler noise
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let start = Instant::now();
            train(&obs, &cfg).unwrap();
            best = best.min(start.elapsed().as_secs_f64() / iters as f64);
        }
        times.push(best);
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|&t| t.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = num / den;
    assert!(
        (0.8..=1.3).contains(&slope),
        "per-iteration time slope {slope:.3} outside [0.8, 1.3]; times {times:?}"
    );
}
