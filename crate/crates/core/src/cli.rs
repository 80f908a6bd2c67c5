//! Command line front end. Every subcommand resolves its configuration
//! (flags, then `--config` overrides), runs, writes its data files and emits
//! a JSON report holding the resolved configuration and the metrics.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{
    bounding_box, hausdorff, normalize, rescaling_check, shape_bounding_box, shape_points_in,
    symmetric_difference_fraction, verify_mean_value, TestFunction, Window,
};
use crate::continuum::{
    extract_limit_shape, fundamental_solution, least_supercaloric_majorant, mean_value_operator, obstacle_field,
    HeatBallSpec, ObstacleSolverConfig, QuadratureConfig, SpaceTimeGrid,
};
use crate::error::{Error, Result};
use crate::idla::{build_cluster, build_cluster_batched};
use crate::io;
use crate::lattice::{LatticeBox, MassField, ModelParams, Site, Variant};
use crate::sandpile::{extract_cluster, stabilize, SweepOrder, ToppleConfig, DEFAULT_CLUSTER_THRESHOLD};
use crate::walks::{green_dp, green_mc, green_on_box};

#[derive(Debug, Parser)]
#[command(name = "heatball", version, about = "Drifted iDLA, unfair divisible sandpiles and their heat-ball limit shape")]
pub struct Cli {
    /// Worker threads (default: available parallelism). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON object whose keys override the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Grow a drifted iDLA cluster.
    Idla(IdlaArgs),
    /// Stabilize a point mass in the unfair divisible sandpile.
    Sandpile(SandpileArgs),
    /// Solve the continuum obstacle problem and extract the limit shape.
    Obstacle(ObstacleArgs),
    /// Tabulate the Green's function of the drifted walk.
    Green(GreenArgs),
    /// Compare sandpile, iDLA and continuum shapes at one n.
    Compare(CompareArgs),
    /// Check mean value properties of heat balls and of the limit shape.
    Mvp(MvpArgs),
    /// Fit the dilation between limit shapes for two drift values.
    RescaleCheck(RescaleArgs),
    /// Regenerate a reference figure.
    Repro(ReproArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Drift probability in (0, 1).
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, value_enum, default_value_t = Variant::Monotone)]
    pub variant: Variant,
    /// Mass multiplier in the continuum obstacle.
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
    #[arg(long, env = "HEATBALL_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl ModelArgs {
    fn params(&self) -> Result<ModelParams> {
        let p = self.p.ok_or_else(|| Error::InvalidParams("missing required --p".into()))?;
        ModelParams::new(self.d, p, self.variant)?
            .with_k(self.k)
            .map(|m| m.with_seed(self.seed))
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IdlaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub n: u64,
    /// Report cluster statistics after every this many particles.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Cluster site list (CSV); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Occupancy image (d = 2).
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SandpileArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Initial mass at the origin.
    #[arg(long)]
    pub n: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value_t = SweepOrder::FifoQueue)]
    pub order: SweepOrder,
    /// Final mass field (CSV snapshot); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub odometer_out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GridArgs {
    /// Lateral half-width of the grid.
    #[arg(long)]
    pub x_extent: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    /// Lateral spacing; the time step is dx^2.
    #[arg(long)]
    pub dx: Option<f64>,
}

impl GridArgs {
    fn grid(&self, params: &ModelParams) -> Result<SpaceTimeGrid> {
        let default = SpaceTimeGrid::default_for(params)?;
        SpaceTimeGrid::new(
            params.d,
            self.x_extent.unwrap_or(default.x_extent),
            self.t_max.unwrap_or(default.t_max),
            self.dx.unwrap_or(default.dx),
        )
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ObstacleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridArgs,
    /// CSV of x, t, gamma, s, u on every node.
    #[arg(long)]
    pub out_fields: Option<PathBuf>,
    /// CSV node list of the limit shape.
    #[arg(long)]
    pub out_shape: Option<PathBuf>,
    /// u = s - gamma as a grayscale image (d = 2).
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GreenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Lateral half-width of the tabulated block.
    #[arg(long, default_value_t = 3)]
    pub radius: i64,
    /// Tabulate layers 0..=layers.
    #[arg(long, default_value_t = 3)]
    pub layers: i64,
    /// Monte Carlo walks per site.
    #[arg(long, default_value_t = 100_000)]
    pub samples: u64,
    /// Lateral truncation radius of the deterministic solver.
    #[arg(long, default_value_t = 200)]
    pub lateral_radius: usize,
    /// CSV rows (coords, dp_value, mc_value, mc_stderr); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 100_000.0)]
    pub n: f64,
    /// iDLA runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MvpArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridArgs,
    /// Heat-ball radius for the operator checks.
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RescaleArgs {
    #[arg(long, default_value_t = 0.2)]
    pub p1: f64,
    #[arg(long, default_value_t = 0.3)]
    pub p2: f64,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, value_enum, default_value_t = Variant::Monotone)]
    pub variant: Variant,
    /// Lateral spacing of both grids (default: the default grid's).
    #[arg(long)]
    pub dx: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Figure {
    /// Drifted iDLA aggregate, d = 2, p = 0.2.
    Figure1,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReproArgs {
    #[arg(value_enum)]
    pub figure: Figure,
    #[arg(long, default_value_t = 500_000)]
    pub n: u64,
    #[arg(long, env = "HEATBALL_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// Overlays the keys of `overrides` on the serialized flags.
fn resolve<T: Serialize + DeserializeOwned>(args: &T, overrides: Option<&Value>) -> Result<T> {
    let mut value = serde_json::to_value(args)?;
    if let Some(Value::Object(over)) = overrides {
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Parse("configuration is not an object".into()))?;
        for (k, v) in over {
            obj.insert(k.replace('-', "_"), v.clone());
        }
    } else if overrides.is_some() {
        return Err(Error::Parse("--config must hold a JSON object".into()));
    }
    serde_json::from_value(value).map_err(|e| Error::Parse(format!("configuration: {e}")))
}

struct Outcome {
    report: Value,
    /// Primary data that goes to stdout when no output path was given.
    stdout_data: Option<Vec<u8>>,
    report_path: Option<PathBuf>,
}

fn model_json(params: &ModelParams) -> Value {
    serde_json::to_value(params).unwrap_or(Value::Null)
}

fn report(command: &str, config: &impl Serialize, metrics: Value, tolerances: Value, pass: Option<bool>) -> Value {
    let mut r = json!({
        "command": command,
        "config": config,
        "metrics": metrics,
        "tolerances": tolerances,
    });
    if let Some(p) = pass {
        r["pass"] = json!(p);
    }
    r
}

fn write_to(path: &Path, f: impl FnOnce(&mut std::fs::File) -> Result<()>) -> Result<()> {
    let mut file = io::create(path)?;
    f(&mut file)
}

fn hash_of(config: &impl Serialize) -> u64 {
    io::config_hash(serde_json::to_string(config).unwrap_or_default().as_bytes())
}

fn run_idla(args: IdlaArgs) -> Result<Outcome> {
    let params = args.model.params()?;
    let mut checkpoints = Vec::new();
    let run = match args.checkpoint_every {
        Some(every) => {
            let mut last = None;
            for snap in build_cluster_batched(args.n, &params, every)? {
                let snap = snap?;
                let ns = normalize(&snap.cluster, snap.particles() as f64)?;
                checkpoints.push(json!({
                    "particles": snap.particles(),
                    "bounding_box": bounding_box(&ns)?,
                }));
                last = Some(snap);
            }
            last.ok_or(Error::EmptySet)?
        }
        None => build_cluster(args.n, &params)?,
    };
    let ns = normalize(&run.cluster, args.n as f64)?;
    let longest = run.settle_order.iter().map(|s| s.walk_length).max().unwrap_or(0);
    let total: u64 = run.settle_order.iter().map(|s| s.walk_length).sum();
    let mut data = Vec::new();
    match &args.out {
        Some(path) => write_to(path, |f| io::write_sites_csv(f, &run.cluster))?,
        None => io::write_sites_csv(&mut data, &run.cluster)?,
    }
    if let Some(path) = &args.pgm {
        let (img, _) = io::occupancy_image(&run.cluster)?;
        write_to(path, |f| io::write_pgm(f, &img, hash_of(&args)))?;
    }
    let metrics = json!({
        "cluster_size": run.cluster.len(),
        "bounding_box": bounding_box(&ns)?,
        "longest_walk": longest,
        "total_steps": total,
        "checkpoints": checkpoints,
        "params": model_json(&params),
    });
    Ok(Outcome {
        report: report("idla", &args, metrics, json!({}), None),
        stdout_data: args.out.is_none().then_some(data),
        report_path: args.report.clone(),
    })
}

fn run_sandpile(args: SandpileArgs) -> Result<Outcome> {
    let params = args.model.params()?;
    if !(args.n > 0.0) {
        return Err(Error::InvalidParams("--n must be positive".into()));
    }
    let cfg = ToppleConfig {
        excess_tolerance: args.tolerance,
        sweep_order: args.order,
        seed: params.seed,
        ..ToppleConfig::default()
    };
    let result = stabilize(&MassField::point(params.d, args.n), &params, &cfg)?;
    let header = io::FieldHeader {
        d: params.d,
        p: params.p,
        variant: params.variant,
        k: params.k,
        n: args.n,
        seed: params.seed,
    };
    let mut data = Vec::new();
    match &args.out {
        Some(path) => write_to(path, |f| io::write_field_csv(f, &result.final_mass, &header))?,
        None => io::write_field_csv(&mut data, &result.final_mass, &header)?,
    }
    if let Some(path) = &args.odometer_out {
        write_to(path, |f| io::write_field_csv(f, &result.odometer, &header))?;
    }
    let cluster = extract_cluster(&result, DEFAULT_CLUSTER_THRESHOLD);
    let metrics = json!({
        "sweeps": result.sweeps,
        "topplings": result.topplings,
        "max_residual_excess": result.max_residual_excess,
        "mass_relation_residual": result.mass_relation_residual(&params),
        "total_mass": result.final_mass.total(),
        "cluster_size": cluster.len(),
        "odometer_total": result.odometer.total(),
        "params": model_json(&params),
    });
    Ok(Outcome {
        report: report("sandpile", &args, metrics, json!({"excess_tolerance": args.tolerance}), None),
        stdout_data: args.out.is_none().then_some(data),
        report_path: args.report.clone(),
    })
}

fn run_obstacle(args: ObstacleArgs) -> Result<Outcome> {
    let params = args.model.params()?;
    let grid = args.grid.grid(&params)?;
    let gamma = obstacle_field(&grid, &params)?;
    let sol = least_supercaloric_majorant(&gamma, &params, &ObstacleSolverConfig::default())?;
    let shape = extract_limit_shape(&sol.majorant, &sol.gamma, None)?;
    if let Some(path) = &args.out_fields {
        write_to(path, |f| io::write_grid_fields_csv(f, &sol.gamma, &sol.majorant))?;
    }
    if let Some(path) = &args.out_shape {
        write_to(path, |f| io::write_shape_csv(f, &shape))?;
    }
    if let Some(path) = &args.pgm {
        let img = io::field_image(&sol.odometer())?;
        write_to(path, |f| io::write_pgm(f, &img, hash_of(&args)))?;
    }
    let (lo, hi) = shape.bounding_box();
    let metrics = json!({
        "grid": grid,
        "measure": shape.measure,
        "nodes": shape.nodes.len(),
        "shape_threshold": shape.threshold,
        "bounding_box": {"lo": lo, "hi": hi},
        "complementarity_residual": sol.complementarity_residual(&params),
        "iterations": sol.iterations,
        "params": model_json(&params),
    });
    Ok(Outcome {
        report: report("obstacle", &args, metrics, json!({}), None),
        stdout_data: None,
        report_path: args.report.clone(),
    })
}

fn run_green(args: GreenArgs) -> Result<Outcome> {
    let params = args.model.params()?;
    if args.radius < 0 || args.layers < 0 {
        return Err(Error::InvalidParams("--radius and --layers must be nonnegative".into()));
    }
    let d = params.d;
    let mut lo = vec![-args.radius; d];
    let mut hi = vec![args.radius; d];
    lo[d - 1] = 0;
    hi[d - 1] = args.layers;
    let block = LatticeBox::new(Site::from_slice(&lo), Site::from_slice(&hi))?;
    let lazy_table = match params.variant {
        Variant::Monotone => None,
        Variant::NaturalLazy => {
            let margin = args.lateral_radius as i64;
            let mut blo = vec![-margin; d];
            let mut bhi = vec![margin; d];
            blo[d - 1] = -margin;
            bhi[d - 1] = args.layers + margin;
            let bx = LatticeBox::new(Site::from_slice(&blo), Site::from_slice(&bhi))?;
            Some(green_on_box(&params, &bx, 1e-14, 1_000_000)?)
        }
    };
    let mut csv = Vec::new();
    let names: Vec<String> = (1..=d).map(|i| format!("c{i}")).collect();
    writeln!(csv, "{},dp_value,mc_value,mc_stderr", names.join(","))?;
    let mut worst_z: f64 = 0.0;
    for z in block.sites() {
        let exact = match &lazy_table {
            None => green_dp(&z, &params, args.lateral_radius)?,
            Some(table) => table.get(&z),
        };
        let est = green_mc(&z, &params, args.samples)?;
        if est.std_error > 0.0 {
            worst_z = worst_z.max((est.value - exact).abs() / est.std_error);
        }
        let coords: Vec<String> = z.coords().iter().map(|c| c.to_string()).collect();
        writeln!(csv, "{},{},{},{}", coords.join(","), exact, est.value, est.std_error)?;
    }
    if let Some(path) = &args.out {
        write_to(path, |f| Ok(f.write_all(&csv)?))?;
    }
    let metrics = json!({
        "sites": block.len(),
        "max_abs_z_score": worst_z,
        "params": model_json(&params),
    });
    Ok(Outcome {
        report: report("green", &args, metrics, json!({}), None),
        stdout_data: args.out.is_none().then_some(csv),
        report_path: args.report.clone(),
    })
}

/// Tolerances for `compare`.
const HAUSDORFF_BUDGET: f64 = 0.1;
const SYMMETRIC_DIFFERENCE_BUDGET: f64 = 0.1;

fn run_compare(args: CompareArgs) -> Result<Outcome> {
    let params = args.model.params()?;
    if !(args.n >= 1.0) || args.seeds == 0 {
        return Err(Error::InvalidParams("--n must be at least 1 and --seeds positive".into()));
    }
    let grid = args.grid.grid(&params)?;
    let gamma = obstacle_field(&grid, &params)?;
    let sol = least_supercaloric_majorant(&gamma, &params, &ObstacleSolverConfig::default())?;
    let shape = extract_limit_shape(&sol.majorant, &sol.gamma, None)?;
    let cfg = ToppleConfig::default().with_order(SweepOrder::LayerSweep);
    let pile = stabilize(&MassField::point(params.d, args.n), &params, &cfg)?;
    let dn = normalize(&extract_cluster(&pile, DEFAULT_CLUSTER_THRESHOLD), args.n)?;
    let window = Window::default_for(params.d);
    let raw = hausdorff(&dn.centers_in(&window), &shape_points_in(&shape, &window))?;
    let grid_half_diagonal = 0.5 * ((params.d - 1) as f64 * grid.dx * grid.dx + grid.dt * grid.dt).sqrt();
    let corrected = raw + dn.half_diagonal() + grid_half_diagonal;
    let mut fractions = Vec::new();
    let mut boxes = Vec::new();
    for j in 0..args.seeds {
        let run = build_cluster(args.n.round() as u64, &params.with_seed(params.seed + j))?;
        let an = normalize(&run.cluster, args.n)?;
        fractions.push(symmetric_difference_fraction(&an, &dn)?);
        boxes.push(bounding_box(&an)?);
    }
    let mean_fraction = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let pass = corrected <= HAUSDORFF_BUDGET && mean_fraction <= SYMMETRIC_DIFFERENCE_BUDGET;
    let metrics = json!({
        "hausdorff_centers": raw,
        "hausdorff": corrected,
        "symmetric_difference": fractions,
        "symmetric_difference_mean": mean_fraction,
        "idla_bounding_boxes": boxes,
        "sandpile_bounding_box": bounding_box(&dn)?,
        "continuum_bounding_box": shape_bounding_box(&shape),
        "continuum_measure": shape.measure,
        "window": window,
        "params": model_json(&params),
    });
    let tolerances = json!({
        "hausdorff": HAUSDORFF_BUDGET,
        "symmetric_difference": SYMMETRIC_DIFFERENCE_BUDGET,
    });
    Ok(Outcome {
        report: report("compare", &args, metrics, tolerances, Some(pass)),
        stdout_data: None,
        report_path: args.report.clone(),
    })
}

const OPERATOR_TOLERANCE: f64 = 1e-3;
const SHAPE_MEAN_VALUE_BUDGET: f64 = 0.02;

fn run_mvp(args: MvpArgs) -> Result<Outcome> {
    let params = args.model.params()?;
    let m = params.lateral_dims();
    let spec = HeatBallSpec::new(vec![0.0; m], 0.0, args.radius)?;
    let quad = QuadratureConfig::default();
    let mut operator_checks = Vec::new();
    let one = mean_value_operator(&|_, _| 1.0, &spec, &params, &quad)?;
    operator_checks.push(json!({"function": "one", "value": one, "expected": 1.0, "error": (one - 1.0).abs()}));
    let coef = params.lateral_weight() / params.p;
    for a in [0.25, 0.5, 1.0] {
        let f = move |y: &[f64], s: f64| (a * y[0] + coef * a * a * s).exp();
        let v = mean_value_operator(&f, &spec, &params, &quad)?;
        let expected = f(&vec![0.0; m], 0.0);
        operator_checks.push(json!({
            "function": format!("exp(a={a})"),
            "value": v,
            "expected": expected,
            "error": (v - expected).abs() / expected,
        }));
    }
    let pole_x = vec![0.3 * args.radius; m];
    let pole_t = -2.0 * spec_depth(&params, args.radius);
    let f = |y: &[f64], s: f64| {
        let shifted: Vec<f64> = y.iter().zip(&pole_x).map(|(a, b)| a - b).collect();
        -fundamental_solution(&shifted, s - pole_t, &params).unwrap_or(0.0)
    };
    let v = mean_value_operator(&f, &spec, &params, &quad)?;
    let centre = f(&vec![0.0; m], 0.0);
    let operator_error = operator_checks
        .iter()
        .map(|c| c["error"].as_f64().unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let grid = args.grid.grid(&params)?;
    let gamma = obstacle_field(&grid, &params)?;
    let sol = least_supercaloric_majorant(&gamma, &params, &ObstacleSolverConfig::default())?;
    let shape = extract_limit_shape(&sol.majorant, &sol.gamma, None)?;
    let shape_report = verify_mean_value(&shape, &params, &TestFunction::family(params.d));
    let pass = operator_error <= OPERATOR_TOLERANCE
        && v <= centre + OPERATOR_TOLERANCE
        && shape_report.max_error() <= SHAPE_MEAN_VALUE_BUDGET;
    let metrics = json!({
        "heat_ball_operator": operator_checks,
        "supercaloric_check": {"value": v, "centre": centre},
        "limit_shape": shape_report,
        "grid": grid,
        "params": model_json(&params),
    });
    let tolerances = json!({
        "heat_ball_operator": OPERATOR_TOLERANCE,
        "limit_shape": SHAPE_MEAN_VALUE_BUDGET,
    });
    Ok(Outcome {
        report: report("mvp", &args, metrics, tolerances, Some(pass)),
        stdout_data: None,
        report_path: args.report.clone(),
    })
}

fn spec_depth(params: &ModelParams, radius: f64) -> f64 {
    params.beta() * radius * radius / std::f64::consts::PI
}

const RATIO_BUDGET: f64 = 0.05;
const RESIDUAL_BUDGET: f64 = 0.05;

fn run_rescale(args: RescaleArgs) -> Result<Outcome> {
    let p1 = ModelParams::new(args.d, args.p1, args.variant)?;
    let p2 = ModelParams::new(args.d, args.p2, args.variant)?;
    let shape_for = |params: &ModelParams| -> Result<_> {
        let default = SpaceTimeGrid::default_for(params)?;
        let grid = SpaceTimeGrid::new(params.d, default.x_extent, default.t_max, args.dx.unwrap_or(default.dx))?;
        let gamma = obstacle_field(&grid, params)?;
        let sol = least_supercaloric_majorant(&gamma, params, &ObstacleSolverConfig::default())?;
        extract_limit_shape(&sol.majorant, &sol.gamma, None)
    };
    let d1 = shape_for(&p1)?;
    let d2 = shape_for(&p2)?;
    let fit = rescaling_check(&d1, &d2)?;
    let predicted = p2.beta() / p1.beta();
    let ratio_error = (fit.ratio - predicted).abs() / predicted;
    let pass = ratio_error <= RATIO_BUDGET && fit.residual <= RESIDUAL_BUDGET;
    let metrics = json!({
        "fit": fit,
        "predicted_ratio": predicted,
        "ratio_error": ratio_error,
        "measure_1": d1.measure,
        "measure_2": d2.measure,
    });
    let tolerances = json!({"ratio": RATIO_BUDGET, "residual": RESIDUAL_BUDGET});
    Ok(Outcome {
        report: report("rescale-check", &args, metrics, tolerances, Some(pass)),
        stdout_data: None,
        report_path: args.report.clone(),
    })
}

fn run_repro(args: ReproArgs) -> Result<Outcome> {
    match args.figure {
        Figure::Figure1 => {
            let params = ModelParams::monotone(2, 0.2)?.with_seed(args.seed);
            let run = build_cluster(args.n, &params)?;
            let (img, corner) = io::occupancy_image(&run.cluster)?;
            let hash = hash_of(&args);
            std::fs::create_dir_all(&args.out_dir)?;
            write_to(&args.out_dir.join("figure1.pgm"), |f| io::write_pgm(f, &img, hash))?;
            write_to(&args.out_dir.join("figure1_sites.csv"), |f| io::write_sites_csv(f, &run.cluster))?;
            let ns = normalize(&run.cluster, args.n as f64)?;
            let metrics = json!({
                "cluster_size": run.cluster.len(),
                "image": {"width": img.width, "height": img.height, "top_left": corner},
                "bounding_box": bounding_box(&ns)?,
                "config_hash": format!("{hash:016x}"),
                "params": model_json(&params),
            });
            let rep = report("repro", &args, metrics, json!({}), None);
            write_to(&args.out_dir.join("figure1.json"), |f| io::write_json(f, &rep))?;
            Ok(Outcome {
                report: rep,
                stdout_data: None,
                report_path: None,
            })
        }
    }
}

fn dispatch(command: Command, overrides: Option<&Value>) -> Result<Outcome> {
    match command {
        Command::Idla(a) => run_idla(resolve(&a, overrides)?),
        Command::Sandpile(a) => run_sandpile(resolve(&a, overrides)?),
        Command::Obstacle(a) => run_obstacle(resolve(&a, overrides)?),
        Command::Green(a) => run_green(resolve(&a, overrides)?),
        Command::Compare(a) => run_compare(resolve(&a, overrides)?),
        Command::Mvp(a) => run_mvp(resolve(&a, overrides)?),
        Command::RescaleCheck(a) => run_rescale(resolve(&a, overrides)?),
        Command::Repro(a) => run_repro(resolve(&a, overrides)?),
    }
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::Idla(_) => "idla",
        Command::Sandpile(_) => "sandpile",
        Command::Obstacle(_) => "obstacle",
        Command::Green(_) => "green",
        Command::Compare(_) => "compare",
        Command::Mvp(_) => "mvp",
        Command::RescaleCheck(_) => "rescale-check",
        Command::Repro(_) => "repro",
    }
}

fn execute(cli: Cli) -> Result<()> {
    let overrides = match &cli.config {
        Some(path) => Some(serde_json::from_reader::<_, Value>(std::fs::File::open(path)?)?),
        None => None,
    };
    let name = subcommand_name(&cli.command);
    let job = move || dispatch(cli.command, overrides.as_ref());
    let outcome = match cli.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?
            .install(job),
        None => job(),
    };
    let outcome = outcome.map_err(|e| {
        if matches!(e, Error::InvalidParams(_)) {
            let mut cmd = Cli::command();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
        }
        e
    })?;
    if let Some(path) = &outcome.report_path {
        write_to(path, |f| io::write_json(f, &outcome.report))?;
    }
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match outcome.stdout_data {
        Some(data) => {
            lock.write_all(&data)?;
            io::write_json(std::io::stderr(), &outcome.report)?;
        }
        None => io::write_json(&mut lock, &outcome.report)?,
    }
    Ok(())
}

/// Parses `argv` (program name first), runs and returns the exit code:
/// 0 on success, 2 for usage and validation errors, 3 for numerical failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn missing_drift_is_a_usage_error() {
        assert_eq!(run(["heatball", "sandpile", "--n", "2"]), 2);
        assert_eq!(run(["heatball", "frobnicate"]), 2);
    }

    #[test]
    fn config_overrides_flags() {
        let args = SandpileArgs {
            model: ModelArgs {
                p: None,
                d: 2,
                variant: Variant::Monotone,
                k: 1.0,
                seed: 0,
            },
            n: 2.0,
            tolerance: 1e-10,
            order: SweepOrder::FifoQueue,
            out: None,
            odometer_out: None,
            report: None,
        };
        let over = json!({"p": 0.3, "order": "layer-sweep", "odometer-out": "u.csv"});
        let resolved = resolve(&args, Some(&over)).unwrap();
        assert_eq!(resolved.model.p, Some(0.3));
        assert_eq!(resolved.order, SweepOrder::LayerSweep);
        assert_eq!(resolved.odometer_out, Some(PathBuf::from("u.csv")));
        assert!(resolve(&args, Some(&json!([1, 2]))).is_err());
    }
}
