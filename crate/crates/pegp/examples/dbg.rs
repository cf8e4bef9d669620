use pegp::observe::{Observation, ObservationSet, Output};
use pegp::sim::{linear_advection_field, InitialProfile, SimScenario};
use pegp::svgp::{predict_field, train, ModelConfig, ModelMode};
use pegp::metrics::mae_rmse;

fn main() {
    let scenario = SimScenario {
        initial: InitialProfile::SineWave { rho0: 0.04, amplitude: 0.01, wavelength: 600.0 },
        ..SimScenario::default()
    };
    let lambda0 = scenario.fd.flux_prime(0.04);
    println!("lambda0 = {lambda0}");
    let truth = linear_advection_field(&scenario, lambda0).unwrap();
    let mut entries = Vec::new();
    for i in 0..truth.grid.nx {
        for j in 0..truth.grid.nt {
            let (x, t) = (truth.grid.x_center(i), truth.grid.t_center(j));
            entries.push(Observation { x, t, output: Output::Density, value: truth.rho[(i, j)] });
            entries.push(Observation { x, t, output: Output::Speed, value: truth.v[(i, j)] });
        }
    }
    let obs = ObservationSet::new(entries, 0);
    for iters in [150usize, 300] {
        let mut init = pegp::svgp::InitConfig::default();
        init.noise0 = 0.01;
        init.b_res0 = 0.5;
        let cfg = ModelConfig {
            mode: ModelMode::LwrBidirectional,
            m_inducing: 48,
            iterations: iters,
            rho0: Some(0.04),
            init,
            ..ModelConfig::default()
        };
        let out = train(&obs, &cfg).unwrap();
        let est = predict_field(&out.state, &truth.grid, cfg.arz_map).unwrap().to_field();
        let m = mae_rmse(&truth, &est).unwrap();
        println!("iters {iters}: elbo {:.1} mae_v {:.4} mae_rho {:.6}", out.state.meta.final_elbo, m.mae_v, m.mae_rho);
        println!("  kernel: {:?}", out.state.kernel.mode);
        println!("  base: {:?} noise: {:?}", out.state.kernel.base, out.state.noise);
        println!("  residual: {:?}", out.state.kernel.residual);
        println!("  coord scale: x {:.1} t {:.1}", out.state.coord_map.x_scale, out.state.coord_map.t_scale);
    }
}
