//! Legacy VTK snapshots and CSV tables.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use cellmech::fem;
use cellmech::mesh::Mesh;
use cellmech::model::{youngs_modulus, EcMode, ModelParams};
use cellmech::simulator::{Observables, SimState, Stat};

/// Columns of the per-run time series.
pub const TIMESERIES_HEADER: [&str; 16] = [
    "t",
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
    "fak_mass",
    "max_u",
    "steady",
];

/// Shortest representation that parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

fn stat_cells(s: &Stat) -> [String; 3] {
    [num(s.mean), num(s.min), num(s.max)]
}

/// The 12 mean/min/max cells for E_c, div u, φ_a and ρ_a.
pub fn observable_cells(o: &Observables) -> Vec<String> {
    [&o.ec, &o.divu, &o.phia, &o.rhoa].into_iter().flat_map(stat_cells).collect()
}

pub fn timeseries_row(o: &Observables) -> Vec<String> {
    let mut row = vec![num(o.t)];
    row.extend(observable_cells(o));
    row.push(num(o.fak_mass));
    row.push(num(o.max_u));
    row.push(u8::from(o.steady).to_string());
    row
}

pub fn write_csv<P: AsRef<Path>>(path: P, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()
}

pub fn write_timeseries(path: &Path, observables: &[Observables]) -> io::Result<()> {
    let rows: Vec<Vec<String>> = observables.iter().map(timeseries_row).collect();
    write_csv(path, &TIMESERIES_HEADER, &rows)
}

fn scalars(out: &mut String, name: &str, values: &[f64]) {
    let _ = writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default");
    for v in values {
        let _ = writeln!(out, "{}", num(*v));
    }
}

/// Bulk snapshot: tetrahedra with φ_d, φ_a, |u| and u at the vertices and
/// div u, tr(σ)₊ and E_c per element.
pub fn bulk_vtk(mesh: &Mesh, state: &SimState, ec_mode: EcMode, params: &ModelParams) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "cellmech bulk t={}", num(state.t));
    let _ = writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.n_vertices());
    for x in mesh.vertices() {
        let _ = writeln!(s, "{} {} {}", num(x.x), num(x.y), num(x.z));
    }
    let nt = mesh.n_tets();
    let _ = writeln!(s, "CELLS {nt} {}", 5 * nt);
    for t in mesh.tets() {
        let _ = writeln!(s, "4 {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        s.push_str("10\n");
    }
    let n = mesh.n_vertices();
    let u = &state.u.u;
    let _ = writeln!(s, "POINT_DATA {n}");
    scalars(&mut s, "phi_d", &state.phi_d.values);
    scalars(&mut s, "phi_a", &state.phi_a.values);
    let mag: Vec<f64> = (0..n).map(|v| u.vertex_vec(v).norm()).collect();
    scalars(&mut s, "u_magnitude", &mag);
    s.push_str("VECTORS u double\n");
    for v in 0..n {
        let x = u.vertex_vec(v);
        let _ = writeln!(s, "{} {} {}", num(x.x), num(x.y), num(x.z));
    }
    let _ = writeln!(s, "CELL_DATA {nt}");
    scalars(&mut s, "div_u", &state.div_u);
    scalars(&mut s, "tr_sigma_plus", &state.tr_plus);
    let ec: Vec<f64> = fem::element_means(mesh, &state.phi_a.values)
        .into_iter()
        .map(|p| youngs_modulus(p, ec_mode, params))
        .collect();
    scalars(&mut s, "E_c", &ec);
    s
}

/// Membrane snapshot: surface triangles with ρ_a at the vertices.
pub fn surface_vtk(mesh: &Mesh, state: &SimState) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "cellmech membrane t={}", num(state.t));
    let _ = writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", mesh.n_surface_vertices());
    for &v in mesh.surface_to_bulk() {
        let x = mesh.vertices()[v];
        let _ = writeln!(s, "{} {} {}", num(x.x), num(x.y), num(x.z));
    }
    let tris = mesh.surface_tris();
    let _ = writeln!(s, "CELLS {} {}", tris.len(), 4 * tris.len());
    for t in tris {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {}", tris.len());
    for _ in tris {
        s.push_str("5\n");
    }
    let _ = writeln!(s, "POINT_DATA {}", mesh.n_surface_vertices());
    scalars(&mut s, "rho_a", &state.rho_a.values);
    s
}

/// Writes `bulk_<step>.vtk` and `surface_<step>.vtk` into `dir`.
pub fn write_snapshot(
    dir: &Path,
    mesh: &Mesh,
    state: &SimState,
    ec_mode: EcMode,
    params: &ModelParams,
) -> io::Result<()> {
    let step = state.step;
    fs::File::create(dir.join(format!("bulk_{step:06}.vtk")))?
        .write_all(bulk_vtk(mesh, state, ec_mode, params).as_bytes())?;
    fs::File::create(dir.join(format!("surface_{step:06}.vtk")))?.write_all(surface_vtk(mesh, state).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_roundtrip() {
        for v in [0.0, -1.5, 1.0 / 3.0, 7e6, 6e-7, f64::MIN_POSITIVE] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn row_matches_header() {
        let o = Observables::default();
        assert_eq!(timeseries_row(&o).len(), TIMESERIES_HEADER.len());
    }
}
