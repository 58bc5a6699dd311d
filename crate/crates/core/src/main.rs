//! Command-line entry point: terrain fitting, pose queries, planning, and
//! method comparison.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use terraplan::cem::{plan_cem, CemConfig};
use terraplan::kinematics::{
    implicit_jacobian_with, solve_pose, ImplicitMode, VehicleGeometry, YawState,
};
use terraplan::planner::{plan, PlanResult, PlannerConfig};
use terraplan::stability::StabilityConfig;
use terraplan::terrain::{fit_terrain_with, ElevationCloud, FitOptions, SynthKind, TerrainModel};
use terraplan::trajectory::{assemble_constraints, build_basis, BoxBounds, CostConfig};
use terraplan::Error;

/// Residual norm above which a pose is flagged as lacking clean four-wheel
/// contact.
const CONTACT_WARN_RESIDUAL: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "terraplan", version, about = "Terrain-aware trajectory optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a Fourier terrain model to an elevation cloud CSV.
    Fit(FitArgs),
    /// Predict the full pose at one yaw-plane state.
    Pose(PoseArgs),
    /// Plan a trajectory between two endpoint states.
    Plan(PlanArgs),
    /// Run gradient, CEM-100, and CEM-20 on a seeded instance set.
    Compare(CompareArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Input elevation cloud CSV with header `x,y,z`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Number of Fourier frequencies.
    #[arg(long = "n-freq", default_value_t = 100)]
    n_freq: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frequency refinement gradient steps.
    #[arg(long = "refine-steps", default_value_t = 0)]
    refine_steps: usize,
    /// Override the frequency range upper bound, rad/m.
    #[arg(long = "omega-max")]
    omega_max: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PoseArgs {
    /// Terrain model JSON.
    #[arg(long)]
    terrain: PathBuf,
    /// Vehicle geometry JSON; defaults to the built-in chassis.
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Yaw-plane state "x,y,alpha".
    #[arg(long)]
    state: String,
    /// Also print the 15x3 implicit Jacobian.
    #[arg(long)]
    jacobian: bool,
    /// Use the exact Hessian for the implicit Jacobian.
    #[arg(long = "exact-hessian")]
    exact_hessian: bool,
}

#[derive(Args, Clone)]
struct PlanArgs {
    /// Terrain model JSON.
    #[arg(long)]
    terrain: PathBuf,
    /// Vehicle geometry JSON; defaults to the built-in chassis.
    #[arg(long)]
    geometry: Option<PathBuf>,
    /// Start state "x,y,vx,vy,ax,ay".
    #[arg(long)]
    start: String,
    /// Goal state "x,y,vx,vy,ax,ay".
    #[arg(long)]
    goal: String,
    #[arg(long, default_value = "gradient")]
    method: String,
    /// CEM batch size.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "w-theta")]
    w_theta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, default_value_t = 10)]
    order: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    /// Radius of the circular patch that bounds the plan, meters.
    #[arg(long, default_value_t = 8.0)]
    radius: f64,
    #[arg(long)]
    mass: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the stability term (smoothness-only ablation).
    #[arg(long = "no-stability")]
    no_stability: bool,
    /// JSON config overlay; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path prefix.
    #[arg(long)]
    out: PathBuf,
    /// Also write long-format plot data (series,t,value).
    #[arg(long = "emit-plot-data")]
    emit_plot_data: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Number of seeded instances.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    order: usize,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 10.0)]
    horizon: f64,
    #[arg(long = "n-freq", default_value_t = 40)]
    n_freq: usize,
    #[arg(long = "cem-iters", default_value_t = 30)]
    cem_iters: usize,
    #[arg(long)]
    iters: Option<usize>,
    /// Optional JSON output path for the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    terrain: Option<serde_json::Value>,
    vehicle: Option<VehicleGeometry>,
    stability: Option<StabilitySection>,
    planner: Option<PlannerSection>,
    cem: Option<CemSection>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct StabilitySection {
    epsilon: Option<f64>,
    w_theta: Option<f64>,
    mass: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct PlannerSection {
    eta: Option<f64>,
    max_iters: Option<usize>,
    momentum: Option<f64>,
    tol: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct CemSection {
    batch_size: Option<usize>,
    elite_fraction: Option<f64>,
    n_iterations: Option<usize>,
    initial_std: Option<f64>,
    seed: Option<u64>,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Parse { .. } => 2,
        Error::DegenerateCloud(_)
        | Error::DegenerateSupportPolygon { .. }
        | Error::ZeroProjectedForce { .. } => 3,
        Error::SolverDiverged { .. }
        | Error::SingularJacobian
        | Error::SingularHessian { .. }
        | Error::NonFinite(_)
        | Error::InnerSolverFailure { .. } => 4,
        Error::ProjectionInfeasible(_) | Error::InfeasibleBox { .. } => 5,
        Error::InsufficientOrder { .. } | Error::InvalidParameter(_) => 64,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Pose(args) => cmd_pose(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn cmd_fit(args: FitArgs) -> terraplan::Result<()> {
    if args.n_freq == 0 {
        return Err(Error::InvalidParameter(
            "--n-freq must be positive".to_string(),
        ));
    }
    let start = std::time::Instant::now();
    let cloud = ElevationCloud::from_csv_path(&args.input)?;
    let model = fit_terrain_with(
        &cloud,
        &FitOptions {
            n_frequencies: args.n_freq,
            seed: args.seed,
            refine_steps: args.refine_steps,
            omega_max: args.omega_max,
            ..FitOptions::default()
        },
    )?;
    std::fs::write(&args.out, model.to_json()).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    println!(
        "fit_rmse {:.6e} points {} frequencies {} elapsed_s {:.3}",
        model.fit_rmse,
        cloud.points.len(),
        args.n_freq,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_terrain(path: &PathBuf) -> terraplan::Result<TerrainModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    TerrainModel::from_json(&text)
}

fn load_geometry(path: &Option<PathBuf>) -> terraplan::Result<VehicleGeometry> {
    match path {
        None => Ok(VehicleGeometry::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            let geom: VehicleGeometry =
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
            geom.validate()?;
            Ok(geom)
        }
    }
}

fn parse_floats(text: &str, n: usize, what: &str) -> terraplan::Result<Vec<f64>> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidParameter(format!("{what}: {e}")))?;
    if parts.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{what}: expected {n} comma-separated values, got {}",
            parts.len()
        )));
    }
    Ok(parts)
}

fn cmd_pose(args: PoseArgs) -> terraplan::Result<()> {
    let terrain = load_terrain(&args.terrain)?;
    let geom = load_geometry(&args.geometry)?;
    let s = parse_floats(&args.state, 3, "--state")?;
    let state = YawState::new(s[0], s[1], s[2]);
    let pose = solve_pose(&state, &geom, &terrain, None)?;

    let mut doc = serde_json::to_value(&pose).expect("pose serializes");
    if pose.residual_norm > CONTACT_WARN_RESIDUAL {
        doc["warning"] = json!("residual above contact threshold; four-wheel contact may be infeasible");
    }
    if args.jacobian {
        let mode = if args.exact_hessian {
            ImplicitMode::ExactHessian
        } else {
            ImplicitMode::GaussNewton
        };
        let jac = implicit_jacobian_with(&state, &pose, &geom, &terrain, mode)?;
        let rows: Vec<Vec<f64>> = (0..15)
            .map(|r| (0..3).map(|c| jac.matrix[(r, c)]).collect())
            .collect();
        doc["implicit_jacobian"] = json!(rows);
        doc["hessian_conditioning"] = json!(jac.conditioning);
    }
    println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    Ok(())
}

struct PlanSetup {
    terrain: TerrainModel,
    geom: VehicleGeometry,
    planner: PlannerConfig,
    cem: CemConfig,
}

fn resolve_setup(args: &PlanArgs) -> terraplan::Result<PlanSetup> {
    let file: FileConfig = match &args.config {
        None => FileConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                message: e.to_string(),
            })?
        }
    };

    let terrain = load_terrain(&args.terrain)?;
    let geom = match (&args.geometry, file.vehicle) {
        (Some(_), _) => load_geometry(&args.geometry)?,
        (None, Some(v)) => {
            v.validate()?;
            v
        }
        (None, None) => VehicleGeometry::default(),
    };

    let stab_file = file.stability.unwrap_or_default();
    let mass = args.mass.or(stab_file.mass).unwrap_or(geom.mass);
    let mut stability = StabilityConfig::gravity_only(mass);
    if let Some(e) = args.epsilon.or(stab_file.epsilon) {
        stability.epsilon = e;
    }
    if let Some(w) = args.w_theta.or(stab_file.w_theta) {
        stability.w_theta = w;
    }

    let planner_file = file.planner.unwrap_or_default();
    let mut planner = PlannerConfig {
        stability,
        use_stability: !args.no_stability,
        cost: CostConfig::default(),
        ..PlannerConfig::default()
    };
    if let Some(eta) = args.eta.or(planner_file.eta) {
        planner.eta = eta;
    }
    if let Some(iters) = args.iters.or(planner_file.max_iters) {
        planner.max_iters = iters;
    }
    if let Some(m) = args.momentum.or(planner_file.momentum) {
        planner.momentum = m;
    }
    if let Some(t) = planner_file.tol {
        planner.tol = t;
    }

    let cem_file = file.cem.unwrap_or_default();
    let mut cem = CemConfig {
        stability,
        use_stability: !args.no_stability,
        cost: CostConfig::default(),
        ..CemConfig::default()
    };
    if let Some(b) = args.batch.or(cem_file.batch_size) {
        cem.batch_size = b;
    }
    if let Some(f) = cem_file.elite_fraction {
        cem.elite_fraction = f;
    }
    if let Some(n) = args.iters.or(cem_file.n_iterations) {
        cem.n_iterations = n;
    }
    if let Some(s) = cem_file.initial_std {
        cem.initial_std = s;
    }
    if let Some(s) = args.seed.or(cem_file.seed) {
        cem.seed = s;
    }
    Ok(PlanSetup {
        terrain,
        geom,
        planner,
        cem,
    })
}

fn write_file(path: &PathBuf, contents: &str) -> terraplan::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_outputs(
    prefix: &PathBuf,
    result: &PlanResult,
    basis: &terraplan::trajectory::BasisMatrices,
    emit_plot: bool,
) -> terraplan::Result<()> {
    let out = terraplan::trajectory::flat_outputs(basis, &result.params);
    let mut csv = String::from("t,x,y,z,alpha,beta,gamma,c_s,theta_min\n");
    for k in 0..basis.n_steps() {
        let pose = &result.poses[k];
        let report = &result.reports[k];
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            basis.times[k],
            out.x[k],
            out.y[k],
            pose.z,
            out.alpha[k],
            pose.beta,
            pose.gamma,
            report.cost,
            report.min_angle
        ));
    }
    let traj_path = prefix.with_extension("trajectory.csv");
    write_file(&traj_path, &csv)?;

    let summary = json!({
        "cost_r": result.cost_r,
        "cost_s_total": result.cost_s,
        "min_tipover_angle": result.min_tipover_angle(),
        "mean_min_tipover_angle": result.mean_min_tipover_angle(),
        "converged": result.converged,
        "nls_calls": result.nls_calls,
        "wall_time_s": result.wall_time_s,
        "iterations": result.cost_trace.len(),
    });
    write_file(
        &prefix.with_extension("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("json"),
    )?;

    let mut trace = String::from("iteration,cost\n");
    for (i, c) in result.cost_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{c}\n"));
    }
    write_file(&prefix.with_extension("trace.csv"), &trace)?;

    if emit_plot {
        let mut plot = String::from("series,t,value\n");
        for k in 0..basis.n_steps() {
            let t = basis.times[k];
            plot.push_str(&format!("x,{t},{}\n", out.x[k]));
            plot.push_str(&format!("y,{t},{}\n", out.y[k]));
            plot.push_str(&format!("z,{t},{}\n", result.poses[k].z));
            plot.push_str(&format!("theta_min,{t},{}\n", result.reports[k].min_angle));
        }
        for (i, c) in result.cost_trace.iter().enumerate() {
            plot.push_str(&format!("cost,{i},{c}\n"));
        }
        write_file(&prefix.with_extension("plot.csv"), &plot)?;
    }
    Ok(())
}

fn cmd_plan(args: PlanArgs) -> terraplan::Result<()> {
    let setup = resolve_setup(&args)?;
    let start = parse_floats(&args.start, 6, "--start")?;
    let goal = parse_floats(&args.goal, 6, "--goal")?;
    let b0 = [start[0], start[1], start[2], start[3], start[4], start[5]];
    let bn = [goal[0], goal[1], goal[2], goal[3], goal[4], goal[5]];

    let basis = build_basis(args.steps, args.horizon, args.order)?;
    let bounds = BoxBounds::inscribed_in_circle(
        [setup.terrain.center[0], setup.terrain.center[1]],
        args.radius,
    );
    let constraints = assemble_constraints(b0, bn, bounds, &basis)?;

    let result = match args.method.as_str() {
        "gradient" => plan(
            &setup.terrain,
            &setup.geom,
            &constraints,
            &basis,
            &setup.planner,
            None,
        )?,
        "cem" => plan_cem(
            &setup.terrain,
            &setup.geom,
            &constraints,
            &basis,
            &setup.cem,
            None,
        )?,
        other => {
            return Err(Error::InvalidParameter(format!(
                "unknown --method '{other}' (expected gradient or cem)"
            )))
        }
    };

    write_outputs(&args.out, &result, &basis, args.emit_plot_data)?;
    println!(
        "method {} cost_r {:.6} cost_s {:.6} min_tipover_angle {:.6} nls_calls {} wall_time_s {:.3}",
        args.method,
        result.cost_r,
        result.cost_s,
        result.min_tipover_angle(),
        result.nls_calls,
        result.wall_time_s
    );
    Ok(())
}

struct MethodStats {
    name: &'static str,
    mean_min_angle: f64,
    mean_cost: f64,
    wall_time_s: f64,
    nls_calls: u64,
}

fn cmd_compare(args: CompareArgs) -> terraplan::Result<()> {
    let basis = build_basis(args.steps, args.horizon, args.order)?;
    let mut totals: Vec<MethodStats> = vec![
        MethodStats {
            name: "gradient",
            mean_min_angle: 0.0,
            mean_cost: 0.0,
            wall_time_s: 0.0,
            nls_calls: 0,
        },
        MethodStats {
            name: "cem-100",
            mean_min_angle: 0.0,
            mean_cost: 0.0,
            wall_time_s: 0.0,
            nls_calls: 0,
        },
        MethodStats {
            name: "cem-20",
            mean_min_angle: 0.0,
            mean_cost: 0.0,
            wall_time_s: 0.0,
            nls_calls: 0,
        },
    ];

    for i in 0..args.instances {
        let seed = args.seed.wrapping_add(i as u64);
        let cloud = terraplan::terrain::synth_terrain(SynthKind::Hills { seed }, 12.0, 0.4)?;
        let terrain = terraplan::terrain::fit_terrain(&cloud, args.n_freq, seed)?;
        let geom = VehicleGeometry::default();
        let bounds = BoxBounds::inscribed_in_circle([0.0, 0.0], 7.0);
        let b0 = [-3.5, -1.5, 0.7, 0.3, 0.0, 0.0];
        let bn = [3.5, 1.5, 0.7, 0.3, 0.0, 0.0];
        let constraints = assemble_constraints(b0, bn, bounds, &basis)?;

        let planner_cfg = PlannerConfig {
            max_iters: args.iters.unwrap_or(100),
            stability: StabilityConfig::gravity_only(geom.mass),
            ..PlannerConfig::default()
        };
        let grad = plan(&terrain, &geom, &constraints, &basis, &planner_cfg, None)?;

        let cem_base = CemConfig {
            n_iterations: args.cem_iters,
            seed,
            stability: StabilityConfig::gravity_only(geom.mass),
            ..CemConfig::default()
        };
        let cem100 = plan_cem(
            &terrain,
            &geom,
            &constraints,
            &basis,
            &CemConfig {
                batch_size: 100,
                ..cem_base
            },
            None,
        )?;
        let cem20 = plan_cem(
            &terrain,
            &geom,
            &constraints,
            &basis,
            &CemConfig {
                batch_size: 20,
                ..cem_base
            },
            None,
        )?;

        for (slot, res) in totals.iter_mut().zip([&grad, &cem100, &cem20]) {
            slot.mean_min_angle += res.min_tipover_angle();
            slot.mean_cost += res.cost_r + res.cost_s;
            slot.wall_time_s += res.wall_time_s;
            slot.nls_calls += res.nls_calls;
        }
    }

    let n = args.instances.max(1) as f64;
    println!(
        "{:<10} {:>16} {:>12} {:>12} {:>12}",
        "method", "mean_min_angle", "mean_cost", "wall_time_s", "nls_calls"
    );
    let mut doc = Vec::new();
    for t in &totals {
        println!(
            "{:<10} {:>16.6} {:>12.6} {:>12.3} {:>12}",
            t.name,
            t.mean_min_angle / n,
            t.mean_cost / n,
            t.wall_time_s,
            t.nls_calls
        );
        doc.push(json!({
            "method": t.name,
            "mean_min_angle": t.mean_min_angle / n,
            "mean_cost": t.mean_cost / n,
            "wall_time_s": t.wall_time_s,
            "nls_calls": t.nls_calls,
        }));
    }
    if let Some(path) = &args.out {
        write_file(path, &serde_json::to_string_pretty(&doc).expect("json"))?;
    }
    Ok(())
}
