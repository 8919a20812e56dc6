//! Experiment drivers behind the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use cellmech::mesh::{Mesh, MeshError};
use cellmech::model::{convert_surface_units, EcMode, MeshSource, ModelParams, Scenario, Stimulus, SurfaceUnit};
use cellmech::simulator::{Observables, SimError, Simulator, Trajectory};
use cellmech::verification::{run_benchmark, EocReport, FieldErrors, VerificationError};

use crate::config::{ec_mode_label, shape_label, ConfigError, RunConfig};
use crate::output::{self, num, observable_cells};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// 2 for configuration, usage and I/O problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Model(m) => CliError::Config(ConfigError::Invalid(m.to_string())),
            SimError::Mesh(m) => CliError::Mesh(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<VerificationError> for CliError {
    fn from(e: VerificationError) -> Self {
        match e {
            VerificationError::TooFewLevels(_) => CliError::Usage(e.to_string()),
            VerificationError::Mesh(m) => CliError::Mesh(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    output::write_csv(path, header, rows).map_err(io_err(path))
}

pub fn build_mesh(source: &MeshSource) -> Result<Mesh, CliError> {
    Ok(source.build()?)
}

/// Runs one scenario, optionally writing snapshots into a directory every
/// `cadence` steps (0: first and last only).
pub fn simulate(
    mesh: &Mesh,
    scenario: &Scenario,
    params: &ModelParams,
    tol: f64,
    dir: Option<(&Path, usize)>,
) -> Result<Trajectory, CliError> {
    scenario
        .validate(params, Some(mesh))
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let mut sim = Simulator::with_tolerance(mesh, scenario.clone(), params.clone(), tol)?;
    let last = scenario.n_steps();
    let mut io_error: Option<CliError> = None;
    let traj = sim.run_with(|state| {
        let Some((dir, cadence)) = dir else { return };
        let due = state.step == 0 || state.step == last || (cadence > 0 && state.step % cadence == 0);
        if due && io_error.is_none() {
            if let Err(e) = output::write_snapshot(dir, mesh, state, scenario.ec_mode, params) {
                io_error = Some(CliError::Io {
                    path: dir.to_path_buf(),
                    source: e,
                });
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if traj.min_concentration < cellmech::simulator::NEGATIVE_WARN {
        warn!("negative concentration {:.3e} during the run", traj.min_concentration);
    }
    Ok(traj)
}

pub fn cmd_run(cfg: &RunConfig) -> Result<Trajectory, CliError> {
    let mesh = build_mesh(&cfg.scenario.mesh)?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    let snapshots = cfg.output.vtk.then_some((dir.as_path(), cfg.output.cadence));
    let traj = simulate(&mesh, &cfg.scenario, &cfg.params, cfg.tol, snapshots)?;
    let path = dir.join("timeseries.csv");
    output::write_timeseries(&path, &traj.observables).map_err(io_err(&path))?;
    let o = traj.last();
    info!(
        "t = {}: mean phi_a {:.4}, max rho_a {:.4e}, max |u| {:.4}, steady {}",
        o.t, o.phia.mean, o.rhoa.max, o.max_u, o.steady
    );
    Ok(traj)
}

/// One cell of a sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub shape: MeshSource,
    pub stimulus: Stimulus,
    pub ec_mode: EcMode,
    pub c1: f64,
    pub e: f64,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub result: Result<Observables, String>,
}

pub const SWEEP_HEADER: [&str; 21] = [
    "cell",
    "shape",
    "stimulus",
    "ec_mode",
    "C1",
    "E",
    "status",
    "Ec_mean",
    "Ec_min",
    "Ec_max",
    "divu_mean",
    "divu_min",
    "divu_max",
    "phia_mean",
    "phia_min",
    "phia_max",
    "rhoa_mean",
    "rhoa_min",
    "rhoa_max",
    "max_u",
    "steady",
];

/// Grid in fixed order: shape, stimulus, E_c mode, C₁, then E innermost.
pub fn sweep_grid(cfg: &RunConfig) -> Vec<SweepCell> {
    let s = &cfg.sweep;
    let shapes = if s.shapes.is_empty() { vec![cfg.scenario.mesh.clone()] } else { s.shapes.clone() };
    let stimuli = if s.stimuli.is_empty() { vec![cfg.scenario.stimulus] } else { s.stimuli.clone() };
    let mut cells = Vec::new();
    for shape in &shapes {
        for &stimulus in &stimuli {
            for &ec_mode in &s.ec_modes {
                for &c1 in &s.c1 {
                    for &e in &s.e {
                        cells.push(SweepCell {
                            shape: shape.clone(),
                            stimulus,
                            ec_mode,
                            c1,
                            e,
                        });
                    }
                }
            }
        }
    }
    cells
}

fn sweep_row_cells(index: usize, row: &SweepRow) -> Vec<String> {
    let c = &row.cell;
    let mut out = vec![
        index.to_string(),
        shape_label(&c.shape),
        c.stimulus.to_string(),
        ec_mode_label(c.ec_mode),
        num(c.c1),
        num(c.e),
    ];
    match &row.result {
        Ok(o) => {
            out.push("ok".into());
            out.extend(observable_cells(o));
            out.push(num(o.max_u));
            out.push(u8::from(o.steady).to_string());
        }
        Err(msg) => {
            out.push(format!("error: {msg}"));
            out.extend(std::iter::repeat_n(String::new(), 14));
        }
    }
    out
}

/// Runs every grid cell (in parallel) and writes `sweep.csv` plus one
/// `cells/cell_<i>/timeseries.csv` per cell. Failed cells are recorded in
/// the status column.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>, CliError> {
    let cells = sweep_grid(cfg);
    if cells.is_empty() {
        return Err(CliError::Usage("the sweep grid is empty".into()));
    }
    let mut meshes: Vec<(MeshSource, Mesh)> = Vec::new();
    for c in &cells {
        if !meshes.iter().any(|(s, _)| *s == c.shape) {
            meshes.push((c.shape.clone(), build_mesh(&c.shape)?));
        }
    }
    let dir = &cfg.output.dir;
    create_dir(&dir.join("cells"))?;
    let rows: Vec<SweepRow> = cells
        .into_par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let mesh = &meshes.iter().find(|(s, _)| *s == cell.shape).expect("mesh built above").1;
            let scenario = Scenario {
                stimulus: cell.stimulus,
                ec_mode: cell.ec_mode,
                mesh: cell.shape.clone(),
                ..cfg.scenario.clone()
            };
            let mut params = cfg.params.clone();
            params.e = cell.e;
            params.c1 = cell.c1;
            let cell_dir = dir.join("cells").join(format!("cell_{i:03}"));
            let result = fs::create_dir_all(&cell_dir)
                .map_err(|e| CliError::Io {
                    path: cell_dir.clone(),
                    source: e,
                })
                .and_then(|_| simulate(mesh, &scenario, &params, cfg.tol, None))
                .and_then(|traj| {
                    let path = cell_dir.join("timeseries.csv");
                    output::write_timeseries(&path, &traj.observables).map_err(io_err(&path))?;
                    Ok(traj.last().clone())
                })
                .map_err(|e| {
                    warn!("sweep cell {i} failed: {e}");
                    e.to_string()
                });
            SweepRow { cell, result }
        })
        .collect();
    let table: Vec<Vec<String>> = rows.iter().enumerate().map(|(i, r)| sweep_row_cells(i, r)).collect();
    write_csv(&dir.join("sweep.csv"), &SWEEP_HEADER, &table)?;
    Ok(rows)
}

/// Percentage change of the four steady means relative to a baseline:
/// (v − v*)/v* · 100.
pub fn percent_change(run: &Observables, base: &Observables) -> [f64; 4] {
    let d = |a: f64, b: f64| (a - b) / b * 100.0;
    [
        d(run.ec.mean, base.ec.mean),
        d(run.divu.mean, base.divu.mean),
        d(run.phia.mean, base.phia.mean),
        d(run.rhoa.mean, base.rhoa.mean),
    ]
}

#[derive(Clone, Debug)]
pub struct SensitivityRow {
    pub parameter: String,
    pub delta: f64,
    pub e: f64,
    pub result: Result<[f64; 4], String>,
}

pub const SENSITIVITY_HEADER: [&str; 8] =
    ["parameter", "delta", "E", "status", "Ec_diff", "divu_diff", "phia_diff", "rhoa_diff"];

/// For every (parameter, relative delta, E) the percentage change of the
/// steady means against the unperturbed run at the same E. Writes
/// `sensitivity.csv`.
pub fn cmd_sensitivity(cfg: &RunConfig) -> Result<Vec<SensitivityRow>, CliError> {
    let mesh = build_mesh(&cfg.scenario.mesh)?;
    let s = &cfg.sweep;
    for name in &s.parameters {
        if cfg.params.get(name).map_err(|e| ConfigError::Invalid(e.to_string()))?.is_none() {
            return Err(ConfigError::Invalid(format!("parameter '{name}' has no value to perturb")).into());
        }
    }
    let params_at = |e: f64| {
        let mut p = cfg.params.clone();
        p.e = e;
        p
    };
    let baselines: Vec<Observables> = s
        .e
        .par_iter()
        .map(|&e| simulate(&mesh, &cfg.scenario, &params_at(e), cfg.tol, None).map(|t| t.last().clone()))
        .collect::<Result<_, _>>()?;
    let mut jobs = Vec::new();
    for name in &s.parameters {
        for &delta in &s.deltas {
            for (k, &e) in s.e.iter().enumerate() {
                jobs.push((name.clone(), delta, k, e));
            }
        }
    }
    let rows: Vec<SensitivityRow> = jobs
        .into_par_iter()
        .map(|(name, delta, k, e)| {
            let mut p = params_at(e);
            let base = p.get(&name).ok().flatten().expect("checked above");
            let result = p
                .set(&name, base * (1.0 + delta))
                .map_err(|e| e.to_string())
                .and_then(|_| {
                    simulate(&mesh, &cfg.scenario, &p, cfg.tol, None)
                        .map(|t| percent_change(t.last(), &baselines[k]))
                        .map_err(|e| e.to_string())
                });
            SensitivityRow {
                parameter: name,
                delta,
                e,
                result,
            }
        })
        .collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut out = vec![r.parameter.clone(), num(r.delta), num(r.e)];
            match &r.result {
                Ok(d) => {
                    out.push("ok".into());
                    out.extend(d.iter().map(|v| num(*v)));
                }
                Err(m) => {
                    out.push(format!("error: {m}"));
                    out.extend(std::iter::repeat_n(String::new(), 4));
                }
            }
            out
        })
        .collect();
    create_dir(&cfg.output.dir)?;
    write_csv(&cfg.output.dir.join("sensitivity.csv"), &SENSITIVITY_HEADER, &table)?;
    Ok(rows)
}

pub const BENCHMARK_ERRORS_HEADER: [&str; 11] = [
    "level", "h", "dt", "steps", "vertices", "phi_L2", "phi_H1", "rho_L2", "rho_H1", "u_L2", "u_H1",
];
pub const BENCHMARK_EOC_HEADER: [&str; 9] =
    ["pair", "h_coarse", "h_fine", "phi_L2", "phi_H1", "rho_L2", "rho_H1", "u_L2", "u_H1"];

fn error_cells(e: &FieldErrors) -> impl Iterator<Item = String> {
    e.as_array().into_iter().map(num)
}

/// Convergence study on the unit ball; writes `benchmark_errors.csv` and
/// `benchmark_eoc.csv`.
pub fn cmd_benchmark(cfg: &RunConfig) -> Result<EocReport, CliError> {
    let s = &cfg.sweep;
    if s.levels.len() < 2 {
        return Err(CliError::Usage(format!(
            "the benchmark needs at least two refinement levels, got {}",
            s.levels.len()
        )));
    }
    let report = run_benchmark(&s.levels, s.dt_policy, s.benchmark_t_end)?;
    create_dir(&cfg.output.dir)?;
    let errors: Vec<Vec<String>> = report
        .levels
        .iter()
        .map(|l| {
            let mut row = vec![
                l.level.to_string(),
                num(l.h),
                num(l.dt),
                l.steps.to_string(),
                l.n_vertices.to_string(),
            ];
            row.extend(error_cells(&l.errors));
            row
        })
        .collect();
    write_csv(&cfg.output.dir.join("benchmark_errors.csv"), &BENCHMARK_ERRORS_HEADER, &errors)?;
    let eoc: Vec<Vec<String>> = report
        .eoc
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let mut row = vec![(k + 1).to_string(), num(report.levels[k].h), num(report.levels[k + 1].h)];
            row.extend(error_cells(e));
            row
        })
        .collect();
    write_csv(&cfg.output.dir.join("benchmark_eoc.csv"), &BENCHMARK_EOC_HEADER, &eoc)?;
    Ok(report)
}

pub fn convert_units(value: f64, to: SurfaceUnit) -> f64 {
    convert_surface_units(value, to)
}

/// Text summary of a mesh.
pub fn mesh_info(mesh: &Mesh) -> String {
    let g = mesh.geometry();
    let mut s = format!(
        "vertices {}\ntetrahedra {}\nboundary triangles {}\nmembrane vertices {}\nvolume {}\nsurface area {}\nbottom area {}\nn_r {}\nh {}\n",
        mesh.n_vertices(),
        mesh.n_tets(),
        mesh.boundary().len(),
        mesh.n_surface_vertices(),
        g.volume,
        g.surface_area,
        g.bottom_area,
        g.n_r,
        g.h
    );
    for (name, tag) in mesh.regions() {
        s += &format!("region {name}: {} triangles, {} vertices\n", tag.tris.len(), tag.vertices.len());
    }
    s
}
