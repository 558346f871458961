//! `fraclap`: command-line surface for the fractional Laplacian FE library.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fraclap::analytic::{ball_coefficient, getoor_eval, BallSolution};
use fraclap::assembly::{
    assemble_load, assemble_stiffness, write_matrix, write_vector, QuadConfig,
};
use fraclap::mesh::{build_graded_disk_mesh, build_interval_mesh, GradingSpec, Mesh, PairClass};
use fraclap::quadrature::{pair_check, PairQuadratureSpec};
use fraclap::study::{exact_load_energy, rhs_for, solve_cell, ExperimentConfig, Problem};

/// Exit codes: 0 success, 2 usage (from clap), 3 malformed config, 4 invalid
/// input or dimension/problem mismatch, 5 numerical failure, 6 I/O failure.
#[derive(Parser)]
#[command(
    name = "fraclap",
    version,
    about = "Finite element solver for the integral fractional Laplacian",
    after_help = "Exit codes: 0 success, 2 usage, 3 malformed config, 4 invalid input, 5 numerical failure, 6 I/O failure."
)]
struct Cli {
    /// Worker threads (fallback: FRACLAP_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a mesh and write it in the fracmesh text format.
    Mesh(MeshArgs),
    /// Assemble and solve one benchmark problem on one mesh.
    Solve(SolveArgs),
    /// Assemble the stiffness matrix and load vector for a mesh file.
    Assemble(AssembleArgs),
    /// Run a convergence experiment from a JSON config.
    Convergence(ConvergenceArgs),
    /// Print reference-pair kernel entries and self-consistency deltas.
    QuadCheck(QuadCheckArgs),
    /// Print the closed-form ball solution value at a point.
    Exact(ExactArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Disk,
    Interval,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long, value_enum)]
    shape: Shape,
    /// Rings (disk) or subintervals per side (interval).
    #[arg(long)]
    rings: usize,
    /// Grading exponent mu in [1, 2); 1 is uniform.
    #[arg(long, default_value_t = 1.0)]
    grading: f64,
    /// Interval endpoints (interval shape only).
    #[arg(long, default_value_t = -1.0)]
    a: f64,
    #[arg(long, default_value_t = 1.0)]
    b: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemArg {
    DiskConstant,
    IntervalSine,
}

impl From<ProblemArg> for Problem {
    fn from(p: ProblemArg) -> Problem {
        match p {
            ProblemArg::DiskConstant => Problem::DiskConstant,
            ProblemArg::IntervalSine => Problem::IntervalSine,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum)]
    problem: ProblemArg,
    #[arg(long)]
    s: f64,
    #[arg(long)]
    rings: usize,
    #[arg(long, default_value_t = 1.0)]
    grading: f64,
    /// Use the exact unit circle for the complement term (disk diagnostics).
    #[arg(long, default_value_t = false)]
    exact_circle: bool,
    /// Write solution vector and summary under this prefix.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AssembleArgs {
    /// Mesh file in fracmesh format.
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    s: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = false)]
    exact_circle: bool,
}

#[derive(Args)]
struct ConvergenceArgs {
    /// JSON file mirroring the experiment config schema.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output prefix.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct QuadCheckArgs {
    #[arg(long, value_enum)]
    class: ClassArg,
    #[arg(long)]
    s: f64,
    #[arg(long, default_value_t = 7)]
    order: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Identical,
    SharedEdge,
    SharedVertex,
    Disjoint,
}

#[derive(Args)]
struct ExactArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    s: f64,
    /// Evaluation point, as `X` (1D) or `X,Y` (2D).
    #[arg(long)]
    at: String,
    /// Optional file for the printed value plus a manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct OutputDigest {
    path: String,
    fnv1a64: String,
}

#[derive(Serialize)]
struct RunManifest {
    artifact: String,
    version: String,
    command: String,
    started_unix: u64,
    finished_unix: u64,
    status: &'static str,
    outputs: Vec<OutputDigest>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Writes `<base>.manifest.json` describing the files just produced.
fn write_manifest(base: &Path, command: &str, started: u64, outputs: &[PathBuf]) -> std::io::Result<()> {
    let digests = outputs
        .iter()
        .filter_map(|p| {
            std::fs::read(p).ok().map(|bytes| OutputDigest {
                path: p.display().to_string(),
                fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
            })
        })
        .collect();
    let manifest = RunManifest {
        artifact: "fraclap".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        started_unix: started,
        finished_unix: unix_now(),
        status: "ok",
        outputs: digests,
    };
    let mut path = base.as_os_str().to_owned();
    path.push(".manifest.json");
    std::fs::write(PathBuf::from(path), serde_json::to_string_pretty(&manifest).expect("serialize"))
}

enum CliError {
    Config(String),
    Input(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Input(_) => 4,
            CliError::Numerical(_) => 5,
            CliError::Io(_) => 6,
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Numerical(_) => "numerical",
            CliError::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Input(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("FRACLAP_THREADS").ok().and_then(|v| v.parse().ok()));
    let started = unix_now();
    let result = match cli.command {
        Command::Mesh(args) => cmd_mesh(args, started),
        Command::Solve(args) => cmd_solve(args, threads, started),
        Command::Assemble(args) => cmd_assemble(args, threads, started),
        Command::Convergence(args) => cmd_convergence(args, threads, started),
        Command::QuadCheck(args) => cmd_quad_check(args),
        Command::Exact(args) => cmd_exact(args, started),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error({}): {}", e.category(), e.message());
            ExitCode::from(e.code())
        }
    }
}

fn build_mesh(shape: Shape, rings: usize, grading: f64, a: f64, b: f64) -> Result<Mesh, CliError> {
    let spec = GradingSpec::new(rings, grading).map_err(|e| CliError::Input(e.to_string()))?;
    match shape {
        Shape::Disk => build_graded_disk_mesh(spec),
        Shape::Interval => build_interval_mesh(a, b, spec),
    }
    .map_err(|e| CliError::Input(e.to_string()))
}

fn cmd_mesh(args: MeshArgs, started: u64) -> Result<(), CliError> {
    let mesh = build_mesh(args.shape, args.rings, args.grading, args.a, args.b)?;
    let mut buf = Vec::new();
    mesh.write_text(&mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&args.out, &buf).map_err(|e| CliError::Io(e.to_string()))?;
    write_manifest(&args.out, "mesh", started, &[args.out.clone()]).map_err(|e| CliError::Io(e.to_string()))?;
    println!(
        "mesh: dim={} vertices={} elements={} h={:.6} sigma={:.3}",
        mesh.dim(),
        mesh.n_vertices(),
        mesh.n_elements(),
        mesh.mesh_parameter,
        mesh.shape_regularity
    );
    Ok(())
}

fn quad_config(threads: Option<usize>, exact_circle: bool) -> QuadConfig {
    QuadConfig {
        geometry: if exact_circle {
            fraclap::quadrature::ComplementGeometry::UnitCircle
        } else {
            fraclap::quadrature::ComplementGeometry::MeshBoundary
        },
        threads,
        ..QuadConfig::default()
    }
}

fn cmd_solve(args: SolveArgs, threads: Option<usize>, started: u64) -> Result<(), CliError> {
    let problem: Problem = args.problem.into();
    if !(args.s > 0.0 && args.s < 1.0) {
        return Err(CliError::Input(format!("s={} outside (0, 1)", args.s)));
    }
    let mesh = match problem {
        Problem::DiskConstant => build_mesh(Shape::Disk, args.rings, args.grading, -1.0, 1.0)?,
        Problem::IntervalSine => build_mesh(Shape::Interval, args.rings, args.grading, -1.0, 1.0)?,
    };
    let quad = quad_config(threads, args.exact_circle);
    let exact = exact_load_energy(problem, args.s, quad.flap_tol)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let t0 = std::time::Instant::now();
    let cell = solve_cell(problem, args.s, mesh, &quad, exact)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let wall = t0.elapsed().as_secs_f64();
    println!(
        "solve: problem={} s={} N_dof={} energy_error={:.6e} wall_seconds={:.2}",
        problem.as_str(),
        args.s,
        cell.report.solution.len(),
        cell.energy_error,
        wall
    );
    if let Some(prefix) = args.out {
        let stem = prefix.display().to_string();
        let upath = PathBuf::from(format!("{stem}_u.txt"));
        let mut ubuf = Vec::new();
        write_vector(&mut ubuf, &cell.report.solution).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(&upath, &ubuf).map_err(|e| CliError::Io(e.to_string()))?;
        let spath = PathBuf::from(format!("{stem}_summary.json"));
        #[derive(Serialize)]
        struct Summary<'a> {
            problem: &'a str,
            s: f64,
            n_dofs: usize,
            energy_error: f64,
            discrete_energy: f64,
            relative_residual: f64,
            wall_seconds: f64,
        }
        let summary = serde_json::to_string_pretty(&Summary {
            problem: problem.as_str(),
            s: args.s,
            n_dofs: cell.report.solution.len(),
            energy_error: cell.energy_error,
            discrete_energy: cell.discrete_energy,
            relative_residual: cell.report.relative_residual,
            wall_seconds: wall,
        })
        .expect("serialize");
        std::fs::write(&spath, summary).map_err(|e| CliError::Io(e.to_string()))?;
        write_manifest(&prefix, "solve", started, &[upath, spath]).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}

fn cmd_assemble(args: AssembleArgs, threads: Option<usize>, started: u64) -> Result<(), CliError> {
    if !(args.s > 0.0 && args.s < 1.0) {
        return Err(CliError::Input(format!("s={} outside (0, 1)", args.s)));
    }
    let file = std::fs::File::open(&args.mesh).map_err(|e| CliError::Io(e.to_string()))?;
    let mesh = Mesh::read_text(std::io::BufReader::new(file)).map_err(|e| CliError::Config(e.to_string()))?;
    let quad = quad_config(threads, args.exact_circle);
    let k = assemble_stiffness(&mesh, args.s, &quad).map_err(|e| CliError::Numerical(e.to_string()))?;
    let rhs = rhs_for(
        if mesh.dim() == 2 { Problem::DiskConstant } else { Problem::IntervalSine },
        args.s,
        quad.flap_tol,
    );
    let f = assemble_load(&mesh, &rhs, quad.load_order).map_err(|e| CliError::Numerical(e.to_string()))?;
    let stem = args.out.display().to_string();
    let kpath = PathBuf::from(format!("{stem}_K.txt"));
    let fpath = PathBuf::from(format!("{stem}_F.txt"));
    let mut kbuf = Vec::new();
    write_matrix(&mut kbuf, &k).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&kpath, &kbuf).map_err(|e| CliError::Io(e.to_string()))?;
    let mut fbuf = Vec::new();
    write_vector(&mut fbuf, &f.data).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&fpath, &fbuf).map_err(|e| CliError::Io(e.to_string()))?;
    write_manifest(&args.out, "assemble", started, &[kpath, fpath]).map_err(|e| CliError::Io(e.to_string()))?;
    println!("assemble: N_dof={} max|K|={:.6e}", k.n_dofs(), k.matrix.max_abs());
    Ok(())
}

fn cmd_convergence(args: ConvergenceArgs, threads: Option<usize>, started: u64) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| CliError::Io(e.to_string()))?;
    let mut config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(prefix) = args.out_prefix {
        config.output_prefix = Some(prefix);
    }
    if threads.is_some() {
        config.threads = threads;
    }
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let results = fraclap::study::run_experiment(&config).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut failures = 0;
    for run in &results {
        match &run.fitted_rate {
            Some(fit) => println!(
                "convergence: problem={} s={} levels={} rate={:.4} residual={:.4}{}",
                run.problem.as_str(),
                run.s,
                run.records.len(),
                fit.rate,
                fit.residual,
                if fit.flagged { " FLAGGED" } else { "" }
            ),
            None => println!(
                "convergence: problem={} s={} levels={} (no rate: fewer than 3 levels)",
                run.problem.as_str(),
                run.s,
                run.records.len()
            ),
        }
        for f in &run.failures {
            failures += 1;
            eprintln!("cell failure: {f}");
        }
    }
    if let Some(prefix) = &config.output_prefix {
        let stem = prefix.display().to_string();
        let mut outputs = vec![PathBuf::from(format!("{stem}.csv")), PathBuf::from(format!("{stem}.json"))];
        for run in &results {
            let s_tag = format!("{}", run.s).replace('.', "p");
            outputs.push(PathBuf::from(format!("{stem}_{}_s{}.dat", run.problem.as_str(), s_tag)));
        }
        write_manifest(prefix, "convergence", started, &outputs).map_err(|e| CliError::Io(e.to_string()))?;
    }
    if failures > 0 {
        return Err(CliError::Numerical(format!("{failures} experiment cell(s) failed")));
    }
    Ok(())
}

fn cmd_quad_check(args: QuadCheckArgs) -> Result<(), CliError> {
    if !(args.s > 0.0 && args.s < 1.0) {
        return Err(CliError::Input(format!("s={} outside (0, 1)", args.s)));
    }
    if !(1..=28).contains(&args.order) {
        return Err(CliError::Input(format!("order={} outside 1..=28", args.order)));
    }
    let class = match args.class {
        ClassArg::Identical => PairClass::Identical,
        ClassArg::SharedEdge => PairClass::SharedEdge,
        ClassArg::SharedVertex => PairClass::SharedVertex,
        ClassArg::Disjoint => PairClass::Disjoint,
    };
    let spec = PairQuadratureSpec { class, s: args.s, n: 2, order: args.order };
    let (base, delta) = pair_check(&spec).map_err(|e| CliError::Input(e.to_string()))?;
    println!(
        "reference pair entries, class={} s={} order={}:",
        class.as_str(),
        args.s,
        args.order
    );
    let k = base.vertices.len();
    for a in 0..k {
        let row: Vec<String> = (0..k).map(|b| format!("{:+.10e}", base.entry(a, b))).collect();
        println!("  {}", row.join(" "));
    }
    println!("self-consistency vs order {}: relative delta {:.3e}", args.order + 2, delta);
    Ok(())
}

fn cmd_exact(args: ExactArgs, started: u64) -> Result<(), CliError> {
    if args.n != 1 && args.n != 2 {
        return Err(CliError::Input(format!("n={} not supported (need 1 or 2)", args.n)));
    }
    if !(args.s > 0.0 && args.s < 1.0) {
        return Err(CliError::Input(format!("s={} outside (0, 1)", args.s)));
    }
    let coords: Result<Vec<f64>, _> = args.at.split(',').map(str::trim).map(str::parse).collect();
    let coords = coords.map_err(|_| CliError::Input(format!("bad point {:?}", args.at)))?;
    if coords.len() != args.n {
        return Err(CliError::Input(format!(
            "point has {} coordinates, expected {}",
            coords.len(),
            args.n
        )));
    }
    let point = [coords[0], if args.n == 2 { coords[1] } else { 0.0 }];
    let sol = BallSolution::unit(args.n, args.s);
    let value = getoor_eval(&sol, point);
    println!("{value:.6}");
    println!("# kappa({}, {}) = {:.12}", args.n, args.s, ball_coefficient(args.n, args.s));
    if let Some(out) = args.out {
        let mut buf = Vec::new();
        writeln!(buf, "{value:.16e}").map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(&out, &buf).map_err(|e| CliError::Io(e.to_string()))?;
        write_manifest(&out, "exact", started, &[out.clone()]).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(())
}
