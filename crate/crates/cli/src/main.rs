//! `chordflow` command-line runner.
//!
//! Every command reads an optional JSON config, computes all artifacts in
//! memory and only then writes them, together with a manifest of SHA-256
//! hashes, into the output directory.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use chordflow::body::{BodyHandle, BodySpec, EllipsoidSpec};
use chordflow::chord::{chord_integral, dual_quermass, EstimatorReport, McOptions, Method};
use chordflow::ellipsoid_space::{ellipsoid_lattice, initial_sweep, SpaceParams};
use chordflow::flow::{
    default_a0, run_modified_flow, run_modified_flow_field, select_initial_scale, FlowConfig,
    FlowOutcome, ResidualStats,
};
use chordflow::sphere::{Point, ScalarField, SphereGrid};
use chordflow::validation::{run_battery, BatteryOptions, Fault, DEFAULT_LEVEL};
use chordflow::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const THREADS_ENV: &str = "CHORDFLOW_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "chordflow",
    version,
    about = "Chord measures and nonlocal Gauss curvature flow experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Grid resolution (icosphere subdivisions for n = 3, nodes for n = 2).
    #[arg(long, global = true)]
    grid: Option<usize>,

    /// Worker threads, 0 = one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Estimate chord integrals and dual quermassintegrals of a body.
    Measure,
    /// Run the modified flow from the configured body.
    Flow,
    /// Run the modified flow from a lattice of ellipsoids.
    Sweep,
    /// Run the self-check battery.
    Validate {
        /// Deliberately break the reference values to see checks fail.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
        /// Run only the named checks.
        #[arg(long = "check")]
        checks: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum FaultArg {
    Omega,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Measure => "measure",
            Command::Flow => "flow",
            Command::Sweep => "sweep",
            Command::Validate { .. } => "validate",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Must match the subcommand when present.
    command: Option<String>,
    seed: Option<u64>,
    grid: Option<usize>,
    dim: Option<usize>,
    out: Option<PathBuf>,
    body: Option<BodySpec>,
    measure: Option<MeasureBlock>,
    flow: Option<FlowBlock>,
    space: Option<SpaceBlock>,
    sweep: Option<SweepBlock>,
    validate: Option<ValidateBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasureBlock {
    quantities: Vec<Quantity>,
    #[serde(default = "default_samples")]
    samples: u64,
    /// Largest accepted relative error estimate of each Monte Carlo value.
    #[serde(default)]
    tolerance: Option<f64>,
}

fn default_samples() -> u64 {
    200_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "quantity", rename_all = "snake_case", deny_unknown_fields)]
enum Quantity {
    ChordIntegral {
        q: Vec<f64>,
        #[serde(default)]
        methods: Option<Vec<Method>>,
    },
    DualQuermass {
        s: Vec<f64>,
        z: Vec<f64>,
        #[serde(default)]
        methods: Option<Vec<Method>>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FlowBlock {
    config: FlowConfig,
    /// Rescale the initial body so that the mean flow speed vanishes.
    select_scale: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SpaceBlock {
    vol_bar: f64,
    ecc_bar: f64,
}

impl Default for SpaceBlock {
    fn default() -> Self {
        SpaceBlock {
            vol_bar: 0.1,
            ecc_bar: 20.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepBlock {
    eccentricities: Vec<f64>,
    volumes: Vec<f64>,
    #[serde(default)]
    offsets: Vec<f64>,
    t_target: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ValidateBlock {
    samples: Option<u64>,
    checks: Vec<String>,
}

/// Failure with its exit code.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Config(String),
    Estimator(String),
    Flow(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Config(_) => 2,
            Failure::Estimator(_) => 3,
            Failure::Flow(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m)
            | Failure::Config(m)
            | Failure::Estimator(m)
            | Failure::Flow(m) => m,
        }
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::Dimension(_)
            | Error::Resolution { .. }
            | Error::LengthMismatch { .. }
            | Error::Precondition(_)
            | Error::Degenerate(_)
            | Error::OutsideBody { .. }
    )
}

fn estimator_error(e: Error) -> Failure {
    if is_config_error(&e) {
        Failure::Config(e.to_string())
    } else {
        Failure::Estimator(e.to_string())
    }
}

fn flow_error(e: Error) -> Failure {
    if is_config_error(&e) {
        Failure::Config(e.to_string())
    } else {
        Failure::Flow(e.to_string())
    }
}

fn config_error(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

/// Settings after merging flags, config and defaults.
struct Resolved {
    command: Command,
    config: RunConfig,
    seed: u64,
    dim: usize,
    grid: usize,
    out: PathBuf,
    threads: usize,
}

fn resolve(cli: &Cli) -> Result<Resolved, Failure> {
    let config: RunConfig = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(c) = &config.command {
        if c != cli.command.name() {
            return Err(Failure::Config(format!(
                "config is for command {c:?}, not {:?}",
                cli.command.name()
            )));
        }
    }
    let dim = config
        .dim
        .or(config.body.as_ref().map(|b| b.dim()))
        .unwrap_or(3);
    let default_grid = if dim == 3 { DEFAULT_LEVEL } else { 256 };
    let threads = match cli.threads {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                Failure::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))
            })?,
            Err(_) => 0,
        },
    };
    Ok(Resolved {
        command: cli.command.clone(),
        seed: cli.seed.or(config.seed).unwrap_or(1),
        grid: cli.grid.or(config.grid).unwrap_or(default_grid),
        out: cli
            .out
            .clone()
            .or(config.out.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        dim,
        threads,
        config,
    })
}

/// One output file held in memory until the run has succeeded.
struct Artifact {
    name: String,
    bytes: Vec<u8>,
    rows: Option<usize>,
}

fn csv_artifact<T: Serialize>(name: &str, rows: &[T]) -> Result<Artifact, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(config_error)?;
    }
    let bytes = w.into_inner().map_err(config_error)?;
    Ok(Artifact {
        name: name.into(),
        bytes,
        rows: Some(rows.len()),
    })
}

fn json_artifact<T: Serialize>(name: &str, value: &T) -> Result<Artifact, Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(config_error)?;
    bytes.push(b'\n');
    Ok(Artifact {
        name: name.into(),
        bytes,
        rows: None,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
    bytes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    rows: Option<usize>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    dim: usize,
    grid: usize,
    threads: usize,
    config_sha256: String,
    config: &'a RunConfig,
    artifacts: Vec<ManifestEntry>,
}

fn write_artifacts(run: &Resolved, artifacts: Vec<Artifact>) -> Result<(), Failure> {
    let io =
        |e: std::io::Error| Failure::Config(format!("cannot write to {}: {e}", run.out.display()));
    let config_json = serde_json::to_vec(&run.config).map_err(config_error)?;
    let manifest = Manifest {
        command: run.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: run.seed,
        dim: run.dim,
        grid: run.grid,
        threads: run.threads,
        config_sha256: sha256_hex(&config_json),
        config: &run.config,
        artifacts: artifacts
            .iter()
            .map(|a| ManifestEntry {
                file: a.name.clone(),
                sha256: sha256_hex(&a.bytes),
                bytes: a.bytes.len(),
                rows: a.rows,
            })
            .collect(),
    };
    let manifest = json_artifact("manifest.json", &manifest)?;
    fs::create_dir_all(&run.out).map_err(io)?;
    for a in artifacts.iter().chain(std::iter::once(&manifest)) {
        let tmp = run.out.join(format!(".{}.partial", a.name));
        fs::write(&tmp, &a.bytes).map_err(io)?;
        fs::rename(&tmp, run.out.join(&a.name)).map_err(io)?;
    }
    Ok(())
}

fn build_grid(run: &Resolved) -> Result<Arc<SphereGrid>, Failure> {
    SphereGrid::new(run.dim, run.grid)
        .map(Arc::new)
        .map_err(config_error)
}

fn require<'a, T>(block: &'a Option<T>, name: &str) -> Result<&'a T, Failure> {
    block
        .as_ref()
        .ok_or_else(|| Failure::Config(format!("config has no {name:?} block")))
}

fn point(v: &[f64], dim: usize) -> Result<Point, Failure> {
    if v.len() != dim {
        return Err(Failure::Config(format!(
            "point {v:?} is not {dim}-dimensional"
        )));
    }
    Ok(Point::new(v[0], v[1], v.get(2).copied().unwrap_or(0.0)))
}

#[derive(Serialize)]
struct EstimateRow {
    quantity: &'static str,
    order: f64,
    method: Method,
    value: f64,
    error_estimate: f64,
    samples: u64,
    seed: u64,
}

#[derive(Serialize)]
struct AgreementRow {
    quantity: &'static str,
    order: f64,
    method_a: Method,
    method_b: Method,
    value_a: f64,
    value_b: f64,
    difference: f64,
    combined_error: f64,
    z_score: f64,
}

fn chord_methods(q: f64) -> Vec<Method> {
    let mut m = vec![Method::GrassmannProjection];
    if q > 1.0 {
        m.push(Method::RieszDouble);
    }
    if q > 0.0 {
        m.push(Method::DualQuermassVolume);
    }
    m
}

fn dual_methods(body: &BodyHandle, z: &Point, s: f64) -> Vec<Method> {
    let mut m = vec![Method::RadialQuadrature];
    if s > -1.0 && body.gap(z).abs() <= 1e-6 * body.circumradius().max(1.0) {
        m.push(Method::XrayQuadrature);
    }
    if s > 0.0 {
        m.push(Method::RieszPotential);
    }
    m
}

fn cmd_measure(run: &Resolved) -> Result<Vec<Artifact>, Failure> {
    let block = require(&run.config.measure, "measure")?;
    let spec = require(&run.config.body, "body")?.clone();
    if block.samples == 0 {
        return Err(Failure::Config("measure.samples must be positive".into()));
    }
    let grid = build_grid(run)?;
    let body = BodyHandle::new(spec, grid).map_err(config_error)?;
    let mut estimates = Vec::new();
    let mut agreement = Vec::new();
    for (k, quantity) in block.quantities.iter().enumerate() {
        let opts = McOptions {
            samples: block.samples,
            seed: run.seed.wrapping_add(k as u64),
            tolerance: block.tolerance,
        };
        let (label, jobs): (&'static str, Vec<(f64, Vec<Method>)>) = match quantity {
            Quantity::ChordIntegral { q, methods } => (
                "chord_integral",
                q.iter()
                    .map(|&q| (q, methods.clone().unwrap_or_else(|| chord_methods(q))))
                    .collect(),
            ),
            Quantity::DualQuermass { s, z, methods } => {
                let z = point(z, run.dim)?;
                (
                    "dual_quermass",
                    s.iter()
                        .map(|&s| {
                            (
                                s,
                                methods
                                    .clone()
                                    .unwrap_or_else(|| dual_methods(&body, &z, s)),
                            )
                        })
                        .collect(),
                )
            }
        };
        let base = match quantity {
            Quantity::DualQuermass { z, .. } => Some(point(z, run.dim)?),
            Quantity::ChordIntegral { .. } => None,
        };
        for (order, methods) in jobs {
            let reports: Vec<EstimatorReport> = methods
                .iter()
                .map(|&m| match &base {
                    None => chord_integral(&body, order, m, &opts),
                    Some(z) => dual_quermass(&body, z, order, m, &opts),
                })
                .collect::<Result<_, _>>()
                .map_err(estimator_error)?;
            for r in &reports {
                estimates.push(EstimateRow {
                    quantity: label,
                    order,
                    method: r.method,
                    value: r.value,
                    error_estimate: r.error_estimate,
                    samples: r.samples,
                    seed: r.seed,
                });
            }
            for i in 0..reports.len() {
                for j in i + 1..reports.len() {
                    let (a, b) = (&reports[i], &reports[j]);
                    let combined = a.error_estimate.hypot(b.error_estimate);
                    let difference = a.value - b.value;
                    agreement.push(AgreementRow {
                        quantity: label,
                        order,
                        method_a: a.method,
                        method_b: b.method,
                        value_a: a.value,
                        value_b: b.value,
                        difference,
                        combined_error: combined,
                        z_score: if combined > 0.0 {
                            difference.abs() / combined
                        } else {
                            f64::NAN
                        },
                    });
                }
            }
        }
    }
    Ok(vec![
        csv_artifact("estimates.csv", &estimates)?,
        csv_artifact("agreement.csv", &agreement)?,
    ])
}

fn initial_ellipsoid(spec: &BodySpec) -> Result<Option<EllipsoidSpec>, Failure> {
    Ok(match spec {
        BodySpec::Ball { radius, center } => {
            let axes = vec![*radius; center.len()];
            Some(EllipsoidSpec::axis_aligned(&axes, center).map_err(config_error)?)
        }
        BodySpec::Ellipsoid(e) => Some(e.clone()),
        _ => None,
    })
}

#[derive(Serialize)]
struct FieldSummary {
    min: f64,
    max: f64,
    mean: f64,
}

impl FieldSummary {
    fn of(h: &ScalarField) -> Self {
        let v = h.values();
        FieldSummary {
            min: h.min(),
            max: h.max(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Serialize)]
struct OutcomeJson<'a> {
    status: String,
    a0: f64,
    initial_j: f64,
    initial_scale: f64,
    steps: usize,
    final_t: f64,
    #[serde(rename = "final_J")]
    final_j: f64,
    final_support: FieldSummary,
    lambda: Option<f64>,
    /// Range of the lambda-scaled support function; the radius for balls.
    solution: Option<FieldSummary>,
    residual: Option<&'a ResidualStats>,
    residual_xray: Option<&'a ResidualStats>,
}

/// Flow settings with the run's master seed.
fn flow_config(run: &Resolved) -> FlowConfig {
    let mut cfg = run.config.flow.clone().unwrap_or_default().config;
    cfg.seed = run.seed;
    cfg
}

fn cmd_flow(run: &Resolved) -> Result<Vec<Artifact>, Failure> {
    let block = require(&run.config.flow, "flow")?;
    let spec = require(&run.config.body, "body")?;
    let cfg = flow_config(run);
    let grid = build_grid(run)?;
    let ellipsoid = initial_ellipsoid(spec)?;
    let mut scale = 1.0;
    let out: FlowOutcome = match (&ellipsoid, block.select_scale) {
        (Some(e), false) => run_modified_flow(e, &cfg, &grid).map_err(flow_error)?,
        _ => {
            let f = cfg.validate(&grid).map_err(config_error)?;
            let h0 = match &ellipsoid {
                Some(e) => ScalarField::from_fn(grid.clone(), |x| e.support(x)),
                None => BodyHandle::new(spec.clone(), grid.clone())
                    .map_err(config_error)?
                    .support_field()
                    .clone(),
            };
            if block.select_scale {
                scale = select_initial_scale(&h0, &cfg).map_err(flow_error)?;
            }
            let a0 = match cfg.a0_override {
                Some(a) => a,
                None => default_a0(&cfg, &grid).map_err(flow_error)?,
            };
            run_modified_flow_field(h0.scaled(scale), &f, &cfg, a0, None).map_err(flow_error)?
        }
    };
    let last = out.trajectory.last();
    let outcome = OutcomeJson {
        status: out.status.name(),
        a0: out.a0,
        initial_j: out.initial_j,
        initial_scale: scale,
        steps: out.steps.len(),
        final_t: last.map_or(0.0, |r| r.t),
        final_j: last.map_or(out.initial_j, |r| r.j),
        final_support: FieldSummary::of(out.final_field()),
        lambda: out.lambda,
        solution: out.solution.as_ref().map(FieldSummary::of),
        residual: out.residual.as_ref(),
        residual_xray: out.residual_xray.as_ref(),
    };
    let mut artifacts = vec![
        csv_artifact("trajectory.csv", &out.trajectory)?,
        json_artifact("final_snapshot.json", &out.final_field().snapshot())?,
        json_artifact("outcome.json", &outcome)?,
    ];
    if let Some(s) = &out.solution {
        artifacts.push(json_artifact("solution_snapshot.json", &s.snapshot())?);
    }
    Ok(artifacts)
}

#[derive(Serialize)]
struct SweepCsvRow {
    lattice_id: usize,
    semi_axes: String,
    center: String,
    status: String,
    #[serde(rename = "final_J")]
    final_j: f64,
    #[serde(rename = "max_J")]
    max_j: f64,
    min_ellipsoid_distance_to_b1: f64,
    t_reached: f64,
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_sweep(run: &Resolved) -> Result<Vec<Artifact>, Failure> {
    let block = require(&run.config.sweep, "sweep")?;
    let space = run.config.space.clone().unwrap_or_default();
    let cfg = flow_config(run);
    let grid = build_grid(run)?;
    let params = SpaceParams::new(run.dim, space.vol_bar, space.ecc_bar).map_err(config_error)?;
    let offsets = if block.offsets.is_empty() {
        vec![0.0]
    } else {
        block.offsets.clone()
    };
    let lattice = ellipsoid_lattice(run.dim, &block.eccentricities, &block.volumes, &offsets)
        .map_err(config_error)?;
    let report =
        initial_sweep(&cfg, &params, &lattice, block.t_target, &grid).map_err(flow_error)?;
    let rows: Vec<SweepCsvRow> = report
        .rows
        .iter()
        .map(|r| SweepCsvRow {
            lattice_id: r.lattice_id,
            semi_axes: join(&r.semi_axes),
            center: join(&r.center),
            status: r.status.clone(),
            final_j: r.final_j,
            max_j: r.max_j,
            min_ellipsoid_distance_to_b1: r.min_ellipsoid_distance_to_b1,
            t_reached: r.t_reached,
        })
        .collect();
    Ok(vec![
        csv_artifact("sweep.csv", &rows)?,
        json_artifact("sweep.json", &report)?,
    ])
}

#[derive(Serialize)]
struct ValidationJson<'a> {
    passed: bool,
    options: &'a BatteryOptions,
    checks: Vec<chordflow::validation::CheckResult>,
}

fn cmd_validate(
    run: &Resolved,
    fault: Option<FaultArg>,
    checks: &[String],
) -> Result<Vec<Artifact>, Failure> {
    if run.dim != 3 {
        return Err(Failure::Config("the battery runs in dimension 3".into()));
    }
    let block = run.config.validate.clone().unwrap_or_default();
    let defaults = BatteryOptions::default();
    let opts = BatteryOptions {
        level: run.grid,
        samples: block.samples.unwrap_or(defaults.samples),
        seed: run.seed,
        fault: fault.map(|FaultArg::Omega| Fault::Omega),
        only: if checks.is_empty() {
            block.checks
        } else {
            checks.to_vec()
        },
    };
    let results = run_battery(&opts).map_err(config_error)?;
    if results.is_empty() {
        return Err(Failure::Config(format!("no check matches {:?}", opts.only)));
    }
    for c in &results {
        eprintln!(
            "{} {:<32} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let report = ValidationJson {
        passed: results.iter().all(|c| c.passed),
        options: &opts,
        checks: results,
    };
    Ok(vec![json_artifact("validation.json", &report)?])
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let run = resolve(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(run.threads)
        .build_global()
        .map_err(config_error)?;
    let artifacts = match &run.command {
        Command::Measure => cmd_measure(&run)?,
        Command::Flow => cmd_flow(&run)?,
        Command::Sweep => cmd_sweep(&run)?,
        Command::Validate {
            inject_fault,
            checks,
        } => cmd_validate(&run, *inject_fault, checks)?,
    };
    let failed = validation_failed(&artifacts);
    write_artifacts(&run, artifacts)?;
    match failed {
        Some(names) => Err(Failure::Validation(format!(
            "failed checks: {}",
            names.join(", ")
        ))),
        None => Ok(()),
    }
}

/// Names of failed checks in a validation report, if any.
fn validation_failed(artifacts: &[Artifact]) -> Option<Vec<String>> {
    let a = artifacts.iter().find(|a| a.name == "validation.json")?;
    let v: serde_json::Value = serde_json::from_slice(&a.bytes).ok()?;
    let names: Vec<String> = v["checks"]
        .as_array()?
        .iter()
        .filter(|c| c["passed"] == false)
        .filter_map(|c| c["name"].as_str().map(String::from))
        .collect();
    (!names.is_empty()).then_some(names)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
