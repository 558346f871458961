//! Convergence experiments: mesh ladders, energy-norm errors through the
//! orthogonality identity `|u - u_h|_V^2 = int f (u - u_h)`, log-log rate
//! fits, and table emission.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{exact_energy_squared, BallSolution};
use crate::assembly::{
    assemble_load, assemble_stiffness, eval_flap_sine, AssemblyError, QuadConfig, RightHandSide,
};
use crate::linalg::{dot, solve_spd, SolveError, SolveReport};
use crate::mesh::{build_graded_disk_mesh, build_interval_mesh, GradingSpec, Mesh, MeshError};
use crate::quadrature::{adaptive_gauss, ComplementGeometry, QuadratureError};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("need at least 3 positive (h, error) pairs for a rate fit, got {0}")]
    TooFewPoints(usize),
    #[error("rate fit requires strictly positive mesh sizes and errors")]
    NonPositiveData,
    #[error("energy radicand {0:.3e} is negative beyond tolerance; stiffness, load and exact energy are inconsistent")]
    InconsistentEnergy(f64),
    #[error("fractional order s={0} outside (0, 1)")]
    InvalidFractionalOrder(f64),
    #[error("experiment config invalid: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    DiskConstant,
    IntervalSine,
}

impl Problem {
    pub fn dim(&self) -> usize {
        match self {
            Problem::DiskConstant => 2,
            Problem::IntervalSine => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Problem::DiskConstant => "disk-constant",
            Problem::IntervalSine => "interval-sine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum MeshFamily {
    Uniform,
    Graded { mu: f64 },
}

impl MeshFamily {
    pub fn mu(&self) -> f64 {
        match self {
            MeshFamily::Uniform => 1.0,
            MeshFamily::Graded { mu } => *mu,
        }
    }
}

/// Quadrature knobs mirrored into the JSON config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadSettings {
    pub touching_order: usize,
    pub near_order: usize,
    pub far_order: usize,
    pub complement_order: usize,
    pub angular_order: usize,
    pub exact_circle: bool,
    pub load_order: usize,
    pub flap_tol: f64,
}

impl Default for QuadSettings {
    fn default() -> Self {
        let q = QuadConfig::default();
        QuadSettings {
            touching_order: q.touching_order,
            near_order: q.near_order,
            far_order: q.far_order,
            complement_order: q.complement_order,
            angular_order: q.angular_order,
            exact_circle: false,
            load_order: q.load_order,
            flap_tol: q.flap_tol,
        }
    }
}

impl QuadSettings {
    pub fn to_config(self, threads: Option<usize>) -> QuadConfig {
        QuadConfig {
            touching_order: self.touching_order,
            near_order: self.near_order,
            far_order: self.far_order,
            complement_order: self.complement_order,
            angular_order: self.angular_order,
            geometry: if self.exact_circle {
                ComplementGeometry::UnitCircle
            } else {
                ComplementGeometry::MeshBoundary
            },
            load_order: self.load_order,
            flap_tol: self.flap_tol,
            threads,
            allow_large: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub problem: Problem,
    pub s_values: Vec<f64>,
    pub mesh: MeshFamily,
    /// Refinement ladder: rings (2D) or subintervals per side (1D).
    pub levels: Vec<usize>,
    pub quadrature: QuadSettings,
    pub output_prefix: Option<PathBuf>,
    pub deterministic: bool,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: 1,
            problem: Problem::DiskConstant,
            s_values: vec![0.5],
            mesh: MeshFamily::Uniform,
            levels: vec![4, 6, 8],
            quadrature: QuadSettings::default(),
            deterministic: true,
            output_prefix: None,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), StudyError> {
        if self.version != 1 {
            return Err(StudyError::InvalidConfig(format!("unsupported config version {}", self.version)));
        }
        for &s in &self.s_values {
            if !(s > 0.0 && s < 1.0) {
                return Err(StudyError::InvalidFractionalOrder(s));
            }
        }
        if self.levels.is_empty() {
            return Err(StudyError::InvalidConfig("empty refinement ladder".into()));
        }
        if let MeshFamily::Graded { mu } = self.mesh {
            if !(1.0..2.0).contains(&mu) {
                return Err(StudyError::InvalidConfig(format!("grading mu={mu} outside [1,2)")));
            }
        }
        Ok(())
    }

    fn threads_effective(&self) -> Option<usize> {
        if self.deterministic && self.threads.is_none() {
            // A pinned worker count keeps reruns bitwise identical even if
            // the machine's available parallelism differs.
            Some(std::thread::available_parallelism().map_or(1, |n| n.get()))
        } else {
            self.threads
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRecord {
    pub m: usize,
    pub h: f64,
    pub n_dofs: usize,
    pub energy_error: f64,
    /// Consecutive-pair rate against the previous level.
    pub rate_running: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FittedRate {
    /// Least-squares slope of log error against log h.
    pub rate: f64,
    /// RMS deviation of the fit in log space.
    pub residual: f64,
    /// Slope against `N_dof^(-1/n)` for cross-checking.
    pub rate_vs_dofs: f64,
    /// Set when the fit residual exceeds 0.05.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SRunResult {
    pub problem: Problem,
    pub s: f64,
    pub mu: f64,
    pub records: Vec<ConvergenceRecord>,
    pub fitted_rate: Option<FittedRate>,
    pub failures: Vec<String>,
}

/// One assembled-and-solved mesh level.
#[derive(Debug)]
pub struct CellSolution {
    pub mesh: Mesh,
    pub load: Vec<f64>,
    pub report: SolveReport,
    pub energy_error: f64,
    pub discrete_energy: f64,
}

pub fn build_level_mesh(problem: Problem, family: MeshFamily, m: usize) -> Result<Mesh, MeshError> {
    let spec = GradingSpec { rings: m, mu: family.mu() };
    match problem.dim() {
        1 => build_interval_mesh(-1.0, 1.0, spec),
        _ => build_graded_disk_mesh(spec),
    }
}

/// Exact load energy `int_Omega f u` of the benchmark problems. For the disk
/// this is the closed-form ball energy; for the truncated sine it is
/// evaluated adaptively from the right-hand side.
pub fn exact_load_energy(problem: Problem, s: f64, flap_tol: f64) -> Result<f64, StudyError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(StudyError::InvalidFractionalOrder(s));
    }
    match problem {
        Problem::DiskConstant => Ok(exact_energy_squared(&BallSolution::unit(2, s))),
        Problem::IntervalSine => {
            let f_tol = flap_tol.min(1e-9);
            let mut inner_err: Option<AssemblyError> = None;
            let value = adaptive_gauss(
                |x: f64| match eval_flap_sine(x, s, f_tol) {
                    Ok(v) => v * (std::f64::consts::PI * x).sin(),
                    Err(e) => {
                        inner_err.get_or_insert(e);
                        0.0
                    }
                },
                -1.0,
                1.0,
                1e-9,
            )?;
            if let Some(e) = inner_err {
                return Err(e.into());
            }
            Ok(value)
        }
    }
}

/// Energy error from the orthogonality identity:
/// `|u - u_h|_V = sqrt(int f u - F^T U)`. Radicands below `-1e-10` (relative
/// to the exact energy) are inconsistencies; small negatives clamp to zero.
pub fn energy_error(exact_energy: f64, load: &[f64], solution: &[f64]) -> Result<f64, StudyError> {
    let fu = dot(load, solution);
    let radicand = exact_energy - fu;
    let tol = 1e-10 * exact_energy.abs().max(1.0);
    if radicand < -tol {
        return Err(StudyError::InconsistentEnergy(radicand));
    }
    if radicand < 0.0 {
        eprintln!("warning: clamping tiny negative energy radicand {radicand:.3e} to zero");
        return Ok(0.0);
    }
    Ok(radicand.sqrt())
}

pub fn rhs_for(problem: Problem, s: f64, flap_tol: f64) -> RightHandSide {
    match problem {
        Problem::DiskConstant => RightHandSide::ConstantOne,
        Problem::IntervalSine => RightHandSide::TruncatedSineFlap { s, tol: flap_tol },
    }
}

/// Assemble, solve and measure one (problem, s, mesh) cell.
pub fn solve_cell(
    problem: Problem,
    s: f64,
    mesh: Mesh,
    quad: &QuadConfig,
    exact_energy: f64,
) -> Result<CellSolution, StudyError> {
    let stiffness = assemble_stiffness(&mesh, s, quad)?;
    let rhs = rhs_for(problem, s, quad.flap_tol);
    let load = assemble_load(&mesh, &rhs, quad.load_order)?;
    let report = solve_spd(&stiffness.matrix, &load.data)?;
    let err = energy_error(exact_energy, &load.data, &report.solution)?;
    let discrete_energy = dot(&load.data, &report.solution);
    Ok(CellSolution {
        mesh,
        load: load.data,
        report,
        energy_error: err,
        discrete_energy,
    })
}

/// Least-squares slope of `log e` against `log h`, with the RMS fit residual.
pub fn fit_rate(hs: &[f64], errors: &[f64]) -> Result<(f64, f64), StudyError> {
    if hs.len() != errors.len() || hs.len() < 3 {
        return Err(StudyError::TooFewPoints(hs.len().min(errors.len())));
    }
    if hs.iter().chain(errors).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(StudyError::NonPositiveData);
    }
    let xs: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let d = y - (intercept + slope * x);
            d * d
        })
        .sum::<f64>()
        / n)
        .sqrt();
    Ok((slope, residual))
}

/// Runs the full ladder for every `s` in the config; any cell failure is
/// recorded and the run continues. Emits CSV/JSON/plot files when an output
/// prefix is configured.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SRunResult>, StudyError> {
    config.validate()?;
    let threads = config.threads_effective();
    let quad = config.quadrature.to_config(threads);
    let mu = config.mesh.mu();
    let mut results = Vec::new();
    for &s in &config.s_values {
        let mut records: Vec<ConvergenceRecord> = Vec::new();
        let mut failures = Vec::new();
        let exact = match exact_load_energy(config.problem, s, quad.flap_tol) {
            Ok(v) => v,
            Err(e) => {
                results.push(SRunResult {
                    problem: config.problem,
                    s,
                    mu,
                    records,
                    fitted_rate: None,
                    failures: vec![format!("exact energy: {e}")],
                });
                continue;
            }
        };
        for &m in &config.levels {
            let start = Instant::now();
            let cell = build_level_mesh(config.problem, config.mesh, m)
                .map_err(StudyError::from)
                .and_then(|mesh| solve_cell(config.problem, s, mesh, &quad, exact));
            match cell {
                Ok(cell) => {
                    let h = cell.mesh.mesh_parameter;
                    let rate_running = records.last().and_then(|prev: &ConvergenceRecord| {
                        if prev.energy_error > 0.0 && cell.energy_error > 0.0 {
                            Some((prev.energy_error / cell.energy_error).ln() / (prev.h / h).ln())
                        } else {
                            None
                        }
                    });
                    records.push(ConvergenceRecord {
                        m,
                        h,
                        n_dofs: cell.report.solution.len(),
                        energy_error: cell.energy_error,
                        rate_running,
                        wall_seconds: start.elapsed().as_secs_f64(),
                    });
                }
                Err(e) => failures.push(format!("s={s} M={m}: {e}")),
            }
        }
        let fitted_rate = if records.len() >= 3 {
            let hs: Vec<f64> = records.iter().map(|r| r.h).collect();
            let errs: Vec<f64> = records.iter().map(|r| r.energy_error).collect();
            match fit_rate(&hs, &errs) {
                Ok((rate, residual)) => {
                    let inv_dim: Vec<f64> = records
                        .iter()
                        .map(|r| (r.n_dofs as f64).powf(-1.0 / config.problem.dim() as f64))
                        .collect();
                    let rate_vs_dofs = fit_rate(&inv_dim, &errs).map(|(r, _)| r).unwrap_or(f64::NAN);
                    Some(FittedRate {
                        rate,
                        residual,
                        rate_vs_dofs,
                        flagged: residual > 0.05,
                    })
                }
                Err(e) => {
                    failures.push(format!("s={s}: rate fit failed: {e}"));
                    None
                }
            }
        } else {
            None
        };
        results.push(SRunResult {
            problem: config.problem,
            s,
            mu,
            records,
            fitted_rate,
            failures,
        });
    }
    if let Some(prefix) = &config.output_prefix {
        write_outputs(prefix, config, &results)?;
    }
    Ok(results)
}

/// CSV schema: `problem,s,mu,M,h,N_dof,energy_error,rate_running,wall_seconds`.
pub fn write_csv<W: Write>(mut w: W, results: &[SRunResult]) -> std::io::Result<()> {
    writeln!(w, "problem,s,mu,M,h,N_dof,energy_error,rate_running,wall_seconds")?;
    for run in results {
        for r in &run.records {
            writeln!(
                w,
                "{},{},{},{},{:.12e},{},{:.12e},{},{:.3}",
                run.problem.as_str(),
                run.s,
                run.mu,
                r.m,
                r.h,
                r.n_dofs,
                r.energy_error,
                r.rate_running.map_or(String::new(), |v| format!("{v:.4}")),
                r.wall_seconds
            )?;
        }
    }
    Ok(())
}

fn write_outputs(prefix: &Path, config: &ExperimentConfig, results: &[SRunResult]) -> Result<(), StudyError> {
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let stem = prefix.to_string_lossy();
    let mut csv = Vec::new();
    write_csv(&mut csv, results)?;
    std::fs::write(format!("{stem}.csv"), &csv)?;
    #[derive(Serialize)]
    struct JsonOut<'a> {
        config: &'a ExperimentConfig,
        runs: &'a [SRunResult],
    }
    let json = serde_json::to_string_pretty(&JsonOut { config, runs: results }).expect("serialize");
    std::fs::write(format!("{stem}.json"), json)?;
    for run in results {
        let mut dat = String::new();
        for r in &run.records {
            if r.energy_error > 0.0 {
                dat.push_str(&format!("{:.12e} {:.12e}\n", r.h.log10(), r.energy_error.log10()));
            }
        }
        let s_tag = format!("{}", run.s).replace('.', "p");
        std::fs::write(format!("{stem}_{}_s{}.dat", run.problem.as_str(), s_tag), dat)?;
    }
    Ok(())
}
