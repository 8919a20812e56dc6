//! Manufactured-solution convergence benchmark on the unit ball.
//!
//! The benchmark system is
//!
//! ```text
//! −∇·σ(u) = f            in Y,   σ(u)ν = h            on Γ
//! ∂ₜφ − Δφ = q₁ + tr(σ(u))₊  in Y,   ∇φ·ν = ρ − φ + q₃   on Γ
//! ∂ₜρ − Δ_Γρ = q₂ − ρ + φ    on Γ
//! ```
//!
//! with unit Lamé constants and data chosen so that
//! u = (2x₁²x₂x₃, −x₁x₂²x₃, −2x₁x₂x₃²)e^{−4t}, φ = cos(x₁x₂x₃)e^{−4t},
//! ρ = (cos(x₁x₂x₃) − 3 sin(x₁x₂x₃))e^{−4t} solve it exactly. Every source
//! is the product of e^{−4t} and a function of space.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::elasticity::{self, constraint_functionals, raw_rigid_modes, stiffness, ElasticityError, STRAIN_FACTOR};
use crate::fem::{self, dot, tet_rule_deg5, tri_rule_deg5, SparseMatrix};
use crate::linsolve::{self, CgOptions, Constraints, PrecondKind, SolveError, DEFAULT_TOL};
use crate::mesh::{generate_unit_ball, Mesh, MeshError, Region, Vec3};
use crate::model::Lame;

#[derive(Debug, thiserror::Error)]
pub enum VerificationError {
    #[error("at least two refinement levels are needed, got {0}")]
    TooFewLevels(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Elasticity(#[from] ElasticityError),
    #[error("level {level}: {source}")]
    Solve { level: usize, source: SolveError },
    #[error("level {level}: elasticity data are not compatible (rigid component {rel:.3e})")]
    Incompatible { level: usize, rel: f64 },
}

/// Closed-form exact solution and derived data of the benchmark.
#[derive(Clone, Copy, Debug)]
pub struct ManufacturedSolution {
    pub lambda: f64,
    pub mu: f64,
}

impl Default for ManufacturedSolution {
    fn default() -> Self {
        Self { lambda: 1.0, mu: 1.0 }
    }
}

fn s_of(x: &Vec3) -> f64 {
    x.x * x.y * x.z
}

fn grad_s(x: &Vec3) -> Vec3 {
    Vec3::new(x.y * x.z, x.x * x.z, x.x * x.y)
}

fn hess_s(x: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, x.z, x.y, x.z, 0.0, x.x, x.y, x.x, 0.0)
}

impl ManufacturedSolution {
    pub fn time_factor(t: f64) -> f64 {
        (-4.0 * t).exp()
    }

    /// μ as it enters σ (doubled under the printed strain convention).
    fn mu_eff(&self) -> f64 {
        STRAIN_FACTOR * self.mu
    }

    pub fn u(&self, t: f64, x: &Vec3) -> Vec3 {
        let (a, b, c) = (x.x, x.y, x.z);
        Vec3::new(2.0 * a * a * b * c, -a * b * b * c, -2.0 * a * b * c * c) * Self::time_factor(t)
    }

    /// ∂ⱼuᵢ in row i, column j.
    pub fn grad_u(&self, t: f64, x: &Vec3) -> Matrix3<f64> {
        let (a, b, c) = (x.x, x.y, x.z);
        Matrix3::new(
            4.0 * a * b * c,
            2.0 * a * a * c,
            2.0 * a * a * b,
            -b * b * c,
            -2.0 * a * b * c,
            -a * b * b,
            -2.0 * b * c * c,
            -2.0 * a * c * c,
            -4.0 * a * b * c,
        ) * Self::time_factor(t)
    }

    pub fn div_u(&self, t: f64, x: &Vec3) -> f64 {
        -2.0 * s_of(x) * Self::time_factor(t)
    }

    pub fn sigma(&self, t: f64, x: &Vec3) -> Matrix3<f64> {
        let g = self.grad_u(t, x);
        Matrix3::identity() * (self.lambda * g.trace()) + (g + g.transpose()) * self.mu_eff()
    }

    pub fn tr_sigma(&self, t: f64, x: &Vec3) -> f64 {
        (3.0 * self.lambda + 2.0 * self.mu_eff()) * self.div_u(t, x)
    }

    /// f = −∇·σ(u) = −(λ+μ)∇(∇·u) − μΔu
    pub fn f(&self, t: f64, x: &Vec3) -> Vec3 {
        let (a, b, c) = (x.x, x.y, x.z);
        let grad_div = Vec3::new(b * c, a * c, a * b) * -2.0;
        let lap_u = Vec3::new(4.0 * b * c, -2.0 * a * c, -4.0 * a * b);
        -(grad_div * (self.lambda + self.mu_eff()) + lap_u * self.mu_eff()) * Self::time_factor(t)
    }

    /// Neumann data σ(u)ν.
    pub fn traction(&self, t: f64, x: &Vec3, normal: &Vec3) -> Vec3 {
        self.sigma(t, x) * normal
    }

    pub fn phi(&self, t: f64, x: &Vec3) -> f64 {
        s_of(x).cos() * Self::time_factor(t)
    }

    pub fn grad_phi(&self, t: f64, x: &Vec3) -> Vec3 {
        grad_s(x) * (-s_of(x).sin() * Self::time_factor(t))
    }

    pub fn lap_phi(&self, t: f64, x: &Vec3) -> f64 {
        -s_of(x).cos() * grad_s(x).norm_squared() * Self::time_factor(t)
    }

    pub fn rho(&self, t: f64, x: &Vec3) -> f64 {
        let s = s_of(x);
        (s.cos() - 3.0 * s.sin()) * Self::time_factor(t)
    }

    pub fn grad_rho(&self, t: f64, x: &Vec3) -> Vec3 {
        let s = s_of(x);
        grad_s(x) * ((-s.sin() - 3.0 * s.cos()) * Self::time_factor(t))
    }

    fn hess_rho(&self, t: f64, x: &Vec3) -> Matrix3<f64> {
        let s = s_of(x);
        let g1 = -s.sin() - 3.0 * s.cos();
        let g2 = -s.cos() + 3.0 * s.sin();
        let gs = grad_s(x);
        (gs * gs.transpose() * g2 + hess_s(x) * g1) * Self::time_factor(t)
    }

    /// Laplace–Beltrami operator of ρ on the sphere through x centred at
    /// the origin: ΔF − νᵀ∇²Fν − (2/|x|)∇F·ν with ν = x/|x|.
    pub fn surface_lap_rho(&self, t: f64, x: &Vec3) -> f64 {
        let r = x.norm();
        let nu = x / r;
        let h = self.hess_rho(t, x);
        h.trace() - (nu.transpose() * h * nu)[(0, 0)] - 2.0 / r * self.grad_rho(t, x).dot(&nu)
    }

    /// q₁ = ∂ₜφ − Δφ − tr(σ(u))₊
    pub fn q1(&self, t: f64, x: &Vec3) -> f64 {
        -4.0 * self.phi(t, x) - self.lap_phi(t, x) - self.tr_sigma(t, x).max(0.0)
    }

    /// q₂ = ∂ₜρ − Δ_Γρ + ρ − φ
    pub fn q2(&self, t: f64, x: &Vec3) -> f64 {
        -4.0 * self.rho(t, x) - self.surface_lap_rho(t, x) + self.rho(t, x) - self.phi(t, x)
    }

    /// q₃ = ∇φ·ν − (ρ − φ), restoring the Robin condition for the exact pair.
    pub fn q3(&self, t: f64, x: &Vec3, normal: &Vec3) -> f64 {
        self.grad_phi(t, x).dot(normal) - (self.rho(t, x) - self.phi(t, x))
    }
}

/// Δt = c·h², rounded down so that T is a whole number of steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtPolicy {
    pub c: f64,
}

impl Default for DtPolicy {
    fn default() -> Self {
        Self { c: 0.25 }
    }
}

impl DtPolicy {
    pub fn steps(&self, h: f64, t_end: f64) -> usize {
        if t_end <= 0.0 {
            0
        } else {
            (t_end / (self.c * h * h)).ceil().max(1.0) as usize
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldErrors {
    pub phi_l2: f64,
    pub phi_h1: f64,
    pub rho_l2: f64,
    pub rho_h1: f64,
    pub u_l2: f64,
    pub u_h1: f64,
}

impl FieldErrors {
    pub const NAMES: [&'static str; 6] = ["phi_L2", "phi_H1", "rho_L2", "rho_H1", "u_L2", "u_H1"];

    pub fn as_array(&self) -> [f64; 6] {
        [self.phi_l2, self.phi_h1, self.rho_l2, self.rho_h1, self.u_l2, self.u_h1]
    }

    fn from_array(a: [f64; 6]) -> Self {
        Self {
            phi_l2: a[0],
            phi_h1: a[1],
            rho_l2: a[2],
            rho_h1: a[3],
            u_l2: a[4],
            u_h1: a[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelResult {
    pub level: usize,
    pub h: f64,
    pub n_vertices: usize,
    pub dt: f64,
    pub steps: usize,
    pub errors: FieldErrors,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EocReport {
    pub t_end: f64,
    pub levels: Vec<LevelResult>,
    /// EOC for each consecutive pair of levels
    pub eoc: Vec<FieldErrors>,
}

pub fn eoc(e_coarse: f64, e_fine: f64, h_coarse: f64, h_fine: f64) -> f64 {
    (e_fine / e_coarse).ln() / (h_fine / h_coarse).ln()
}

impl EocReport {
    pub fn finest(&self) -> &FieldErrors {
        self.eoc.last().expect("a report has at least one pair")
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = format!("{:>6} {:>10} {:>8} {:>6}", "level", "h", "dt", "steps");
        for n in FieldErrors::NAMES {
            s += &format!(" {n:>12}");
        }
        s.push('\n');
        for l in &self.levels {
            s += &format!("{:>6} {:>10.6} {:>8.2e} {:>6}", l.level, l.h, l.dt, l.steps);
            for e in l.errors.as_array() {
                s += &format!(" {e:>12.4e}");
            }
            s.push('\n');
        }
        for (k, e) in self.eoc.iter().enumerate() {
            s += &format!("{:>6} {:>10} {:>8} {:>6}", format!("EOC{}", k + 1), "", "", "");
            for v in e.as_array() {
                s += &format!(" {v:>12.4}");
            }
            s.push('\n');
        }
        s
    }
}

/// Runs the benchmark on the listed unit-ball refinement levels up to `t_end`.
/// With `t_end = 0` no steps are taken and the errors are those of the
/// nodal interpolants.
pub fn run_benchmark(levels: &[usize], policy: DtPolicy, t_end: f64) -> Result<EocReport, VerificationError> {
    if levels.len() < 2 {
        return Err(VerificationError::TooFewLevels(levels.len()));
    }
    let results: Vec<LevelResult> = levels
        .par_iter()
        .map(|&l| {
            let mesh = generate_unit_ball(l);
            run_level(&mesh, l, policy, t_end)
        })
        .collect::<Result<_, _>>()?;
    let eoc = results
        .windows(2)
        .map(|w| {
            let a = w[0].errors.as_array();
            let b = w[1].errors.as_array();
            let mut out = [0.0; 6];
            for k in 0..6 {
                out[k] = eoc(a[k], b[k], w[0].h, w[1].h);
            }
            FieldErrors::from_array(out)
        })
        .collect();
    Ok(EocReport {
        t_end,
        levels: results,
        eoc,
    })
}

/// Space-only parts of the benchmark loads (multiply by e^{−4t}).
struct Loads {
    elastic: Vec<f64>,
    q1: Vec<f64>,
    q3: Vec<f64>,
    q2: Vec<f64>,
}

fn assemble_loads(mesh: &Mesh, ms: &ManufacturedSolution) -> Result<Loads, MeshError> {
    let n = mesh.n_vertices();
    let mut elastic = vec![0.0; 3 * n];
    let mut q1 = vec![0.0; n];
    for (t, g) in mesh.tets().iter().zip(mesh.tet_geometry()) {
        let p = t.map(|v| mesh.vertices()[v]);
        for q in tet_rule_deg5() {
            let x = p[0] * q.bary[0] + p[1] * q.bary[1] + p[2] * q.bary[2] + p[3] * q.bary[3];
            let w = q.weight * g.volume;
            let f = ms.f(0.0, &x);
            let s = ms.q1(0.0, &x);
            for k in 0..4 {
                for c in 0..3 {
                    elastic[3 * t[k] + c] += w * f[c] * q.bary[k];
                }
                q1[t[k]] += w * s * q.bary[k];
            }
        }
    }
    let mut q3 = vec![0.0; n];
    for &tri in mesh.membrane() {
        let bt = &mesh.boundary()[tri];
        let p = bt.vertices.map(|v| mesh.vertices()[v]);
        for q in tri_rule_deg5() {
            let x = p[0] * q.bary[0] + p[1] * q.bary[1] + p[2] * q.bary[2];
            let w = q.weight * bt.area;
            let h = ms.traction(0.0, &x, &bt.normal);
            let r = ms.q3(0.0, &x, &bt.normal);
            for k in 0..3 {
                for c in 0..3 {
                    elastic[3 * bt.vertices[k] + c] += w * h[c] * q.bary[k];
                }
                q3[bt.vertices[k]] += w * r * q.bary[k];
            }
        }
    }
    let q2 = fem::surface_load_fn(mesh, Region::Membrane, |x, _| ms.q2(0.0, x))?;
    Ok(Loads { elastic, q1, q3, q2 })
}

fn run_level(mesh: &Mesh, level: usize, policy: DtPolicy, t_end: f64) -> Result<LevelResult, VerificationError> {
    let ms = ManufacturedSolution::default();
    let geom = mesh.geometry();
    let steps = policy.steps(geom.h, t_end);
    let dt = if steps > 0 { t_end / steps as f64 } else { 0.0 };
    let solve_err = |source| VerificationError::Solve { level, source };

    let mut phi: Vec<f64> = mesh.vertices().iter().map(|x| ms.phi(0.0, x)).collect();
    let mut rho: Vec<f64> = mesh
        .surface_to_bulk()
        .iter()
        .map(|&v| ms.rho(0.0, &mesh.vertices()[v]))
        .collect();
    let mut u: Vec<f64> = mesh.vertices().iter().flat_map(|x| ms.u(0.0, x).iter().copied().collect::<Vec<_>>()).collect();

    if steps > 0 {
        let loads = assemble_loads(mesh, &ms)?;
        let lame = vec![
            Lame {
                lambda: ms.lambda,
                mu: ms.mu
            };
            mesh.n_tets()
        ];
        let ku = stiffness(mesh, &lame);
        let center = mesh.centroid();
        let constraints = Constraints {
            rows: constraint_functionals(mesh, &[0, 1, 2], &[0, 1, 2]),
            modes: raw_rigid_modes(mesh, &center, &[0, 1, 2], &[0, 1, 2]),
        };
        let rel = constraints.incompatibility(&loads.elastic);
        if rel > linsolve::COMPATIBILITY_TOL {
            return Err(VerificationError::Incompatible { level, rel });
        }
        let m = fem::bulk_mass(mesh);
        let k = fem::bulk_stiffness(mesh, &vec![1.0; mesh.n_tets()]);
        let mg = fem::surface_mass_bulk(mesh, Region::Membrane, None)?;
        let mut a_phi = SparseMatrix::linear_combination(&[(1.0 / dt, &m), (1.0, &k), (1.0, &mg)]);
        a_phi.set_spd(true);
        let ms_s = fem::surface_mass(mesh, Region::Membrane, None)?;
        let ks = fem::surface_stiffness(mesh);
        let mut a_rho = SparseMatrix::linear_combination(&[(1.0 / dt + 1.0, &ms_s), (1.0, &ks)]);
        a_rho.set_spd(true);

        let mut u_prev: Option<(Vec<f64>, f64)> = None;
        for step in 1..=steps {
            let t = step as f64 * dt;
            let e = ManufacturedSolution::time_factor(t);

            // elasticity; the load only changes by a scalar factor, so the
            // previous solution rescaled is an excellent initial guess
            let b: Vec<f64> = loads.elastic.iter().map(|v| v * e).collect();
            let guess = u_prev.as_ref().map(|(x, ep)| x.iter().map(|v| v * e / ep).collect::<Vec<_>>());
            let opts = CgOptions {
                precond: PrecondKind::IncompleteCholesky,
                ..CgOptions::with_tol(DEFAULT_TOL)
            };
            let sol = linsolve::solve_constrained_with(&ku, &b, &constraints, guess.as_deref(), opts)
                .map_err(solve_err)?;
            u = sol.x;
            let tr_plus: Vec<f64> = elasticity::stress_summary(mesh, &u, &lame).tr_sigma_plus;
            u_prev = Some((u.clone(), e));

            // bulk concentration with the previous surface concentration
            let rho_bulk = fem::surface_to_bulk_vector(mesh, &rho);
            let m_phi = m.mul_vec(&phi);
            let mg_rho = mg.mul_vec(&rho_bulk);
            let tr_load = fem::bulk_load_elementwise(mesh, &tr_plus);
            let rhs: Vec<f64> = (0..phi.len())
                .map(|i| m_phi[i] / dt + e * (loads.q1[i] + loads.q3[i]) + tr_load[i] + mg_rho[i])
                .collect();
            phi = linsolve::solve_spd(&a_phi, &rhs, Some(&phi), DEFAULT_TOL).map_err(solve_err)?.0;

            // surface concentration with the new bulk concentration
            let phi_s = fem::restrict_to_surface(mesh, &phi);
            let m_rho = ms_s.mul_vec(&rho);
            let m_phis = ms_s.mul_vec(&phi_s);
            let rhs: Vec<f64> = (0..rho.len())
                .map(|i| m_rho[i] / dt + e * loads.q2[i] + m_phis[i])
                .collect();
            rho = linsolve::solve_spd(&a_rho, &rhs, Some(&rho), DEFAULT_TOL).map_err(solve_err)?.0;
        }
    }

    let errors = errors_at(mesh, &ms, t_end, &phi, &rho, &u);
    Ok(LevelResult {
        level,
        h: geom.h,
        n_vertices: mesh.n_vertices(),
        dt,
        steps,
        errors,
    })
}

/// L² and full H¹ errors of the discrete fields against the exact solution
/// at time t; ρ uses surface norms with tangential gradients.
pub fn errors_at(mesh: &Mesh, ms: &ManufacturedSolution, t: f64, phi: &[f64], rho: &[f64], u: &[f64]) -> FieldErrors {
    let (mut pl2, mut ph1, mut ul2, mut uh1) = (0.0, 0.0, 0.0, 0.0);
    let grads_u = fem::element_vector_gradient(mesh, u);
    let grads_phi = fem::element_gradient(mesh, phi);
    for (e, (tet, g)) in mesh.tets().iter().zip(mesh.tet_geometry()).enumerate() {
        let p = tet.map(|v| mesh.vertices()[v]);
        for q in tet_rule_deg5() {
            let x = p[0] * q.bary[0] + p[1] * q.bary[1] + p[2] * q.bary[2] + p[3] * q.bary[3];
            let w = q.weight * g.volume;
            let ph: f64 = (0..4).map(|k| q.bary[k] * phi[tet[k]]).sum();
            let uh: Vec3 = (0..4)
                .map(|k| Vec3::new(u[3 * tet[k]], u[3 * tet[k] + 1], u[3 * tet[k] + 2]) * q.bary[k])
                .sum();
            pl2 += w * (ph - ms.phi(t, &x)).powi(2);
            ph1 += w * (grads_phi[e] - ms.grad_phi(t, &x)).norm_squared();
            ul2 += w * (uh - ms.u(t, &x)).norm_squared();
            uh1 += w * (grads_u[e] - ms.grad_u(t, &x)).norm_squared();
        }
    }
    let (mut rl2, mut rh1) = (0.0, 0.0);
    for (k, &tri) in mesh.membrane().iter().enumerate() {
        let bt = &mesh.boundary()[tri];
        let sv = mesh.surface_tris()[k];
        let p = bt.vertices.map(|v| mesh.vertices()[v]);
        let tg = mesh.tri_gradients(tri);
        let grad_h: Vec3 = (0..3).map(|l| tg[l] * rho[sv[l]]).sum();
        let proj = Matrix3::identity() - bt.normal * bt.normal.transpose();
        for q in tri_rule_deg5() {
            let x = p[0] * q.bary[0] + p[1] * q.bary[1] + p[2] * q.bary[2];
            let w = q.weight * bt.area;
            let rh: f64 = (0..3).map(|l| q.bary[l] * rho[sv[l]]).sum();
            rl2 += w * (rh - ms.rho(t, &x)).powi(2);
            rh1 += w * (grad_h - proj * ms.grad_rho(t, &x)).norm_squared();
        }
    }
    FieldErrors {
        phi_l2: pl2.sqrt(),
        phi_h1: (pl2 + ph1).sqrt(),
        rho_l2: rl2.sqrt(),
        rho_h1: (rl2 + rh1).sqrt(),
        u_l2: ul2.sqrt(),
        u_h1: (ul2 + uh1).sqrt(),
    }
}

/// Net rigid-mode work of the elasticity data relative to its size; zero up
/// to quadrature and rounding for exact Neumann data.
pub fn elastic_data_incompatibility(mesh: &Mesh) -> Result<f64, MeshError> {
    let loads = assemble_loads(mesh, &ManufacturedSolution::default())?;
    let modes = raw_rigid_modes(mesh, &mesh.centroid(), &[0, 1, 2], &[0, 1, 2]);
    let q = linsolve::orthonormalize(&modes);
    let nb = fem::norm2(&loads.elastic);
    Ok(q.iter().map(|r| dot(r, &loads.elastic).powi(2)).sum::<f64>().sqrt() / nb)
}
