mod config;
mod manifest;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use config::{ExperimentConfig, SamplingMode, Simulator};
use manifest::Manifest;
use pegp::diagnostics;
use pegp::grid::Field;
use pegp::io;
use pegp::kernel::KernelMode;
use pegp::metrics::{mae_rmse, penetration_sweep, to_traffic_units, MetricRow, SweepConfig};
use pegp::observe::{sample_loops, sample_probe};
use pegp::sim::{arz_relax, emit_trajectories, godunov_lwr, linear_advection_field, Boundary, InitialProfile};
use pegp::svgp::{predict_field, train, ModelConfig, ModelMode, SvgpState};

#[derive(Parser)]
#[command(name = "pegp", version, about = "Traffic state estimation with physics-embedded Gaussian processes")]
struct Cli {
    /// Experiment configuration JSON; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the sampling / model / diagnostics seeds
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweep cells
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic ground-truth field and probe trajectories
    Simulate,
    /// Draw probe or loop-detector observations from a field
    Sample {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Train the configured model on observations
    Fit {
        #[arg(long)]
        observations: PathBuf,
    },
    /// Predict fields and variances on the configured grid
    Predict {
        #[arg(long)]
        model: PathBuf,
    },
    /// Score an estimate against ground truth
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        /// report km/h and veh/km instead of SI
        #[arg(long)]
        traffic_units: bool,
    },
    /// Run the full penetration sweep
    Sweep,
    /// Physics/residual share and similarity diagnostics for a model
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        /// ground-truth field for the regime masks; the model's own
        /// prediction is used when omitted
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Render PNG heatmaps from field (and optional variance) CSV
    Plot {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        variance: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliErrorKind {
    Usage,
    Validation,
    Numerical,
}

struct CliError {
    kind: CliErrorKind,
    message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError { kind: CliErrorKind::Usage, message: msg.into() }
    }

    fn validation(msg: impl Into<String>) -> Self {
        CliError { kind: CliErrorKind::Validation, message: msg.into() }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            CliErrorKind::Usage => 1,
            CliErrorKind::Validation => 2,
            CliErrorKind::Numerical => 3,
        }
    }
}

impl From<pegp::Error> for CliError {
    fn from(e: pegp::Error) -> Self {
        let kind = match &e {
            pegp::Error::IllConditioned(_)
            | pegp::Error::Numerical(_)
            | pegp::Error::CflViolation { .. } => CliErrorKind::Numerical,
            pegp::Error::Io(_) => CliErrorKind::Usage,
            _ => CliErrorKind::Validation,
        };
        CliError { kind, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PEGP_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are not errors
            if e.kind() == clap::error::ErrorKind::DisplayHelp
                || e.kind() == clap::error::ErrorKind::DisplayVersion
            {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::usage(e.to_string());
            report(&err);
            return ExitCode::from(err.exit_code());
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code())
        }
    }
}

fn report(e: &CliError) {
    let kind = match e.kind {
        CliErrorKind::Usage => "usage",
        CliErrorKind::Validation => "validation",
        CliErrorKind::Numerical => "numerical",
    };
    eprintln!(
        "{}",
        serde_json::json!({ "error": { "kind": kind, "message": e.message } })
    );
}

struct Ctx {
    cfg: ExperimentConfig,
    cfg_bytes: Option<Vec<u8>>,
    out: PathBuf,
    jobs: usize,
}

fn load_ctx(cli: &Cli) -> Result<Ctx, CliError> {
    let (cfg, cfg_bytes) = match &cli.config {
        Some(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            let text = String::from_utf8_lossy(&bytes);
            let cfg = ExperimentConfig::from_json(&text)
                .map_err(|e| CliError::validation(format!("config: {e}")))?;
            (cfg, Some(bytes))
        }
        None => (ExperimentConfig::default(), None),
    };
    let mut cfg = cfg;
    if let Some(seed) = cli.seed {
        cfg.sampling.seed = seed;
        cfg.model.seed = seed;
        cfg.diagnostics.seed = seed;
    }
    let out = cfg.output_dir.clone().map(PathBuf::from).unwrap_or_else(|| cli.out.clone());
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::usage(format!("cannot create output dir: {e}")))?;
    Ok(Ctx { cfg, cfg_bytes, out, jobs: cli.jobs.max(1) })
}

fn read_input(path: &Path, man: &mut Manifest) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    man.add_input(path, &bytes);
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn write_output(dir: &Path, name: &str, text: &str, man: &mut Manifest) -> Result<(), CliError> {
    std::fs::write(dir.join(name), text)
        .map_err(|e| CliError::validation(format!("cannot write {name}: {e}")))?;
    man.add_output(name);
    Ok(())
}

fn simulate_field(cfg: &ExperimentConfig) -> Result<Field, CliError> {
    let field = match cfg.simulator {
        Simulator::GodunovLwr => godunov_lwr(&cfg.scenario)?,
        Simulator::ArzRelax => arz_relax(&cfg.scenario)?,
        Simulator::LinearAdvection => {
            let rho0 = match cfg.scenario.initial {
                InitialProfile::SineWave { rho0, .. } => rho0,
                _ => {
                    return Err(CliError::validation(
                        "linear advection needs a sine_wave initial profile".to_string(),
                    ))
                }
            };
            let lambda0 = cfg.scenario.fd.flux_prime(rho0);
            linear_advection_field(&cfg.scenario, lambda0)?
        }
    };
    Ok(field)
}

fn finish(man: &Manifest, out: &Path) -> Result<(), CliError> {
    man.write(out).map_err(|e| CliError::validation(format!("cannot write manifest: {e}")))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let ctx = load_ctx(cli)?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&ctx),
        Command::Sample { field, trajectories } => cmd_sample(&ctx, field, trajectories.as_deref()),
        Command::Fit { observations } => cmd_fit(&ctx, observations),
        Command::Predict { model } => cmd_predict(&ctx, model),
        Command::Evaluate { truth, estimate, traffic_units } => {
            cmd_evaluate(&ctx, truth, estimate, *traffic_units)
        }
        Command::Sweep => cmd_sweep(&ctx),
        Command::Diagnose { model, truth } => cmd_diagnose(&ctx, model, truth.as_deref()),
        Command::Plot { field, variance } => cmd_plot(&ctx, field, variance.as_deref()),
    }
}

fn new_manifest(ctx: &Ctx, command: &str, seed: Option<u64>) -> Manifest {
    let mut man = Manifest::new(command, seed);
    if let Some(bytes) = &ctx.cfg_bytes {
        man.set_config(bytes);
    }
    man
}

fn cmd_simulate(ctx: &Ctx) -> Result<(), CliError> {
    let mut man = new_manifest(ctx, "simulate", Some(ctx.cfg.sampling.seed));
    let field = simulate_field(&ctx.cfg)?;
    let periodic = ctx.cfg.scenario.boundary == Boundary::Periodic;
    let trajectories = emit_trajectories(&field, ctx.cfg.n_vehicles, ctx.cfg.sampling.seed, periodic);
    info!("simulated {} cells, {} trajectories", field.grid.n_cells(), trajectories.len());
    write_output(&ctx.out, "field.csv", &io::write_field_csv(&field), &mut man)?;
    write_output(
        &ctx.out,
        "trajectories.csv",
        &io::write_trajectories_csv(&trajectories),
        &mut man,
    )?;
    finish(&man, &ctx.out)
}

fn cmd_sample(ctx: &Ctx, field_path: &Path, traj_path: Option<&Path>) -> Result<(), CliError> {
    let mut man = new_manifest(ctx, "sample", Some(ctx.cfg.sampling.seed));
    let field = io::read_field_csv(&read_input(field_path, &mut man)?)?;
    let obs = match ctx.cfg.sampling.mode {
        SamplingMode::Probe => {
            let tp = traj_path.ok_or_else(|| {
                CliError::usage("probe sampling needs --trajectories".to_string())
            })?;
            let trajectories = io::read_trajectories_csv(&read_input(tp, &mut man)?)?;
            sample_probe(&field, &trajectories, ctx.cfg.sampling.penetration, ctx.cfg.sampling.seed)?
        }
        SamplingMode::Loops => sample_loops(&field, &ctx.cfg.sampling.positions_m)?,
    };
    info!("sampled {} observations", obs.len());
    write_output(&ctx.out, "observations.csv", &io::write_observations_csv(&obs), &mut man)?;
    finish(&man, &ctx.out)
}

fn cmd_fit(ctx: &Ctx, obs_path: &Path) -> Result<(), CliError> {
    let mut man = new_manifest(ctx, "fit", Some(ctx.cfg.model.seed));
    let obs = io::read_observations_csv(&read_input(obs_path, &mut man)?)?;
    let outcome = train(&obs, &ctx.cfg.model)?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    info!(
        "trained {} model: final ELBO {:.4}",
        ctx.cfg.model.mode.name(),
        outcome.state.meta.final_elbo
    );
    let model_json = io::model_to_json(&outcome.state)?;
    write_output(&ctx.out, "model.json", &model_json, &mut man)?;
    let mut log = String::from("iteration,best_elbo\n");
    for (i, e) in outcome.trace.iter().enumerate() {
        log.push_str(&format!("{i},{}\n", io::fmt_g9(*e)));
    }
    write_output(&ctx.out, "training_log.csv", &log, &mut man)?;
    finish(&man, &ctx.out)
}

fn variance_csv(pf: &pegp::svgp::PredictiveField, latent: bool) -> String {
    // variance maps reuse the field layout: rho_vpm carries the density
    // variance and v_mps the speed variance
    let mut carrier = Field::empty(pf.grid.clone());
    carrier.mask.fill(true);
    carrier.rho = if latent { pf.var_rho_latent.clone() } else { pf.var_rho_obs.clone() };
    carrier.v = if latent { pf.var_v_latent.clone() } else { pf.var_v_obs.clone() };
    io::write_field_csv(&carrier)
}

fn cmd_predict(ctx: &Ctx, model_path: &Path) -> Result<(), CliError> {
    let mut man = new_manifest(ctx, "predict", None);
    let state = io::model_from_json(&read_input(model_path, &mut man)?)?;
    let grid = ctx.cfg.scenario.grid()?;
    let pf = predict_field(&state, &grid, ctx.cfg.model.arz_map)?;
    write_output(&ctx.out, "prediction.csv", &io::write_field_csv(&pf.to_field()), &mut man)?;
    write_output(&ctx.out, "variance.csv", &variance_csv(&pf, false), &mut man)?;
    write_output(&ctx.out, "variance_latent.csv", &variance_csv(&pf, true), &mut man)?;
    finish(&man, &ctx.out)
}

fn cmd_evaluate(
    ctx: &Ctx,
    truth_path: &Path,
    est_path: &Path,
    traffic_units: bool,
) -> Result<(), CliError> {
    let mut man = new_manifest(ctx, "evaluate", None);
    let truth = io::read_field_csv(&read_input(truth_path, &mut man)?)?;
    let estimate = io::read_field_csv(&read_input(est_path, &mut man)?)?;
    let m = mae_rmse(&truth, &estimate)?;
    let mut row = MetricRow {
        method: "estimate",
        p: f64::NAN,
        seed: 0,
        mae_v: m.mae_v,
        rmse_v: m.rmse_v,
        mae_rho: m.mae_rho,
        rmse_rho: m.rmse_rho,
        n: m.n,
    };
    if traffic_units {
        row = to_traffic_units(&row);
    }
    write_output(&ctx.out, "metrics.csv", &io::write_results_csv(&[row]), &mut man)?;
    finish(&man, &ctx.out)
}

/// Per-method model configs for the sweep, derived from the configured
/// model's optimizer settings.
fn sweep_models(base: &ModelConfig) -> (ModelConfig, ModelConfig, ModelConfig) {
    let expansion = match base.mode {
        ModelMode::Arz { expansion } => expansion,
        _ => pegp::kernel::ArzExpansion::AsPrinted,
    };
    let lwr = ModelConfig { mode: ModelMode::LwrBidirectional, ..base.clone() };
    let arz = ModelConfig { mode: ModelMode::Arz { expansion }, ..base.clone() };
    let plain = ModelConfig { mode: ModelMode::PlainSe, ..base.clone() };
    (lwr, arz, plain)
}

fn cmd_sweep(ctx: &Ctx) -> Result<(), CliError> {
    let mut man = new_manifest(ctx, "sweep", None);
    let truth = simulate_field(&ctx.cfg)?;
    let periodic = ctx.cfg.scenario.boundary == Boundary::Periodic;
    let trajectories = emit_trajectories(&truth, ctx.cfg.n_vehicles, ctx.cfg.sampling.seed, periodic);
    let (lwr_model, arz_model, plain_model) = sweep_models(&ctx.cfg.model);
    let sweep_cfg = SweepConfig {
        methods: ctx.cfg.sweep.methods.clone(),
        penetrations: ctx.cfg.sweep.penetrations.clone(),
        seeds: ctx.cfg.sweep.seeds.clone(),
        jobs: ctx.jobs,
        lwr_model,
        arz_model,
        plain_model,
        asm: ctx.cfg.baselines.asm,
        rotated: ctx.cfg.baselines.rotated_gp,
    };
    let outcome = penetration_sweep(&truth, &trajectories, &sweep_cfg);
    for e in &outcome.errors {
        warn!("sweep cell failed: {e}");
    }
    write_output(&ctx.out, "results.csv", &io::write_results_csv(&outcome.rows), &mut man)?;
    finish(&man, &ctx.out)
}

fn task_names(state: &SvgpState) -> Vec<&'static str> {
    match state.kernel.mode {
        KernelMode::Arz { .. } => vec!["w1", "w2"],
        KernelMode::LwrScalar { .. } => vec!["delta_rho"],
        _ => vec!["rho", "v"],
    }
}

fn cmd_diagnose(ctx: &Ctx, model_path: &Path, truth_path: Option<&Path>) -> Result<(), CliError> {
    let mut man = new_manifest(ctx, "diagnose", Some(ctx.cfg.diagnostics.seed));
    let state = io::model_from_json(&read_input(model_path, &mut man)?)?;
    let grid = ctx.cfg.scenario.grid()?;
    let reference = match truth_path {
        Some(p) => io::read_field_csv(&read_input(p, &mut man)?)?,
        None => predict_field(&state, &grid, ctx.cfg.model.arz_map)?.to_field(),
    };
    let diag = &ctx.cfg.diagnostics;
    let names = task_names(&state);

    // share decomposition on a single draw over the valid set
    let (cells, _) = diagnostics::sample_points(&reference.mask, diag.n_samples, diag.seed);
    let points: Vec<(f64, f64)> = cells
        .iter()
        .map(|&(i, j)| (reference.grid.x_center(i), reference.grid.t_center(j)))
        .collect();
    let dec = diagnostics::decompose_mean(&state, &points)?;
    let joint = diagnostics::joint_ratio(&dec.total, &dec.physics, &dec.residual)?;
    let mut shares_csv = String::from("p,task,s_phys,s_res,e_phys,e_res,joint_ratio,n\n");
    for (task, name) in names.iter().enumerate() {
        let rep = diagnostics::shares(&dec.total[task], &dec.physics[task], &dec.residual[task])?;
        shares_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            io::fmt_g9(diag.penetration_label),
            name,
            io::fmt_g9(rep.s_phys),
            io::fmt_g9(rep.s_res),
            io::fmt_g9(rep.e_phys),
            io::fmt_g9(rep.e_res),
            io::fmt_g9(joint),
            rep.n
        ));
    }
    write_output(&ctx.out, "shares.csv", &shares_csv, &mut man)?;

    // similarity per regime
    let (free, congested) = diagnostics::regime_mask(&reference, diag.v_threshold_mps);
    let mut sim_csv = String::from("p,regime,task,cka,min_deg,max_deg,n\n");
    for (regime, mask) in [("free", &free), ("congested", &congested)] {
        let (cells, _) = diagnostics::sample_points(mask, diag.n_samples, diag.seed);
        if cells.len() < 2 {
            continue;
        }
        let points: Vec<(f64, f64)> = cells
            .iter()
            .map(|&(i, j)| (reference.grid.x_center(i), reference.grid.t_center(j)))
            .collect();
        let dec = diagnostics::decompose_mean(&state, &points)?;
        for (task, name) in names.iter().enumerate() {
            let x = pegp::nalgebra::DMatrix::from_column_slice(
                points.len(),
                1,
                dec.physics[task].as_slice(),
            );
            let y = pegp::nalgebra::DMatrix::from_column_slice(
                points.len(),
                1,
                dec.residual[task].as_slice(),
            );
            let cka = diagnostics::cka(&x, &y)?;
            let angles = diagnostics::principal_angles(&x, &y, 5)?;
            sim_csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                io::fmt_g9(diag.penetration_label),
                regime,
                name,
                io::fmt_g9(cka),
                io::fmt_g9(angles.first().copied().unwrap_or(f64::NAN)),
                io::fmt_g9(angles.last().copied().unwrap_or(f64::NAN)),
                points.len()
            ));
        }
    }
    write_output(&ctx.out, "similarity.csv", &sim_csv, &mut man)?;
    finish(&man, &ctx.out)
}

fn cmd_plot(ctx: &Ctx, field_path: &Path, var_path: Option<&Path>) -> Result<(), CliError> {
    let mut man = new_manifest(ctx, "plot", None);
    let field = io::read_field_csv(&read_input(field_path, &mut man)?)?;
    let variance = match var_path {
        Some(p) => Some(io::read_field_csv(&read_input(p, &mut man)?)?),
        None => None,
    };
    for (name, values, var) in [
        ("plot_rho.png", &field.rho, variance.as_ref().map(|v| &v.rho)),
        ("plot_v.png", &field.v, variance.as_ref().map(|v| &v.v)),
    ] {
        let img = plot::heatmap_png(&field, values, var);
        img.save(ctx.out.join(name))
            .map_err(|e| CliError::validation(format!("cannot write {name}: {e}")))?;
        man.add_output(name);
    }
    finish(&man, &ctx.out)
}
