//! Linear (visco)elasticity driven by the RhoA traction on the membrane.
//!
//! Displacements are interleaved P1 vectors `[u₀x, u₀y, u₀z, u₁x, …]` over
//! bulk vertices. Three boundary treatments are supported: pure traction
//! with rigid motions factored out, a base resting on a rigid substrate, and
//! an optional Robin condition on a nucleus surface.

use nalgebra::Matrix3;

use crate::fem::{self, dot, NodalField, SparseMatrix, TripletBuilder, Unit};
use crate::linsolve::{self, CgOptions, Constraints, PrecondKind, Preconditioner, SolveError, SolveReport};
use crate::mesh::{Mesh, MeshError, Region, TetGeometry, Vec3, BOTTOM_TAG, NUCLEUS_TAG};
use crate::model::{BcMode, Lame};

/// Multiplier on μ in the constitutive law. The standard law uses the
/// symmetric gradient ε(u); the `printed-strain` feature uses 2ε(u) instead.
pub const STRAIN_FACTOR: f64 = if cfg!(feature = "printed-strain") { 2.0 } else { 1.0 };

#[derive(Debug, thiserror::Error)]
pub enum ElasticityError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("nucleus Robin condition requested but mesh has no '{NUCLEUS_TAG}' region")]
    MissingNucleus,
    #[error("partially fixed base requested but mesh has no '{BOTTOM_TAG}' region")]
    MissingBottom,
    #[error("{0}")]
    Input(String),
}

/// Displacement with the element Lamé constants it was computed with.
#[derive(Clone, Debug)]
pub struct Displacement {
    pub u: NodalField,
    pub lame: Vec<Lame>,
    pub report: SolveReport,
}

impl Displacement {
    pub fn zero(mesh: &Mesh, lame: Vec<Lame>) -> Self {
        Self {
            u: NodalField::vector(vec![0.0; 3 * mesh.n_vertices()], Unit::Micrometre),
            lame,
            report: SolveReport {
                iterations: 0,
                residual: 0.0,
                converged: true,
            },
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.u
            .values
            .chunks_exact(3)
            .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StressSummary {
    pub tr_sigma: Vec<f64>,
    pub tr_sigma_plus: Vec<f64>,
    pub div_u: Vec<f64>,
    /// volume-weighted mean of div(u)
    pub div_mean: f64,
    pub div_min: f64,
    pub div_max: f64,
}

/// Visits the 144 entries of one element stiffness in a fixed order.
#[inline]
fn element_stiffness(t: &[usize; 4], g: &TetGeometry, l: &Lame, mut f: impl FnMut(usize, usize, f64)) {
    let mu = STRAIN_FACTOR * l.mu;
    for a in 0..4 {
        for c in 0..4 {
            let ga = &g.grads[a];
            let gc = &g.grads[c];
            let gg = ga.dot(gc);
            for i in 0..3 {
                for j in 0..3 {
                    let mut v = l.lambda * (ga[i] * gc[j]) + mu * (ga[j] * gc[i]);
                    if i == j {
                        v += mu * gg;
                    }
                    f(3 * t[a] + i, 3 * t[c] + j, g.volume * v);
                }
            }
        }
    }
}

/// Vector stiffness ⟨σ(u), ε(v)⟩ with element-constant Lamé constants.
pub fn stiffness(mesh: &Mesh, lame: &[Lame]) -> SparseMatrix {
    assert_eq!(lame.len(), mesh.n_tets());
    let n = 3 * mesh.n_vertices();
    let mut b = TripletBuilder::with_capacity(n, n, 144 * mesh.n_tets());
    for ((t, g), l) in mesh.tets().iter().zip(mesh.tet_geometry()).zip(lame) {
        element_stiffness(t, g, l, |i, j, v| b.add(i, j, v));
    }
    b.finalize(true, false)
}

/// Repeated stiffness assembly on a fixed sparsity pattern. Entries are
/// summed in the same order as [`stiffness`], so values agree bitwise.
#[derive(Clone, Debug)]
pub struct StiffnessAssembler {
    pattern: SparseMatrix,
    slots: Vec<usize>,
}

impl StiffnessAssembler {
    pub fn new(mesh: &Mesh) -> Self {
        let n = 3 * mesh.n_vertices();
        let mut b = TripletBuilder::with_capacity(n, n, 144 * mesh.n_tets());
        for t in mesh.tets() {
            for a in 0..4 {
                for c in 0..4 {
                    for i in 0..3 {
                        for j in 0..3 {
                            b.add(3 * t[a] + i, 3 * t[c] + j, 1.0);
                        }
                    }
                }
            }
        }
        let pattern = b.finalize(true, false);
        let mut slots = Vec::with_capacity(144 * mesh.n_tets());
        let unit = Lame { lambda: 1.0, mu: 1.0 };
        for (t, g) in mesh.tets().iter().zip(mesh.tet_geometry()) {
            element_stiffness(t, g, &unit, |i, j, _| {
                slots.push(pattern.position(i, j).expect("entry is in the pattern"))
            });
        }
        Self { pattern, slots }
    }

    pub fn assemble(&self, mesh: &Mesh, lame: &[Lame]) -> SparseMatrix {
        assert_eq!(lame.len(), mesh.n_tets());
        assert_eq!(self.slots.len(), 144 * mesh.n_tets());
        let mut vals = vec![0.0; self.pattern.nnz()];
        let mut k = 0;
        for ((t, g), l) in mesh.tets().iter().zip(mesh.tet_geometry()).zip(lame) {
            element_stiffness(t, g, l, |_, _, v| {
                vals[self.slots[k]] += v;
                k += 1;
            });
        }
        self.pattern.with_values(vals, false)
    }
}

/// Expands a scalar matrix to act componentwise on interleaved vectors.
pub fn vectorize(m: &SparseMatrix) -> SparseMatrix {
    let n = m.nrows();
    let mut b = TripletBuilder::with_capacity(3 * n, 3 * n, 3 * m.nnz());
    for i in 0..n {
        let (cols, vals) = m.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            for c in 0..3 {
                b.add(3 * i + c, 3 * j + c, v);
            }
        }
    }
    b.finalize(m.is_symmetric(), m.is_spd())
}

/// Nodal rigid motions: 3 unit translations, then rotations eₖ × (x − c)
/// about the given centre, for the axes listed.
pub fn raw_rigid_modes(mesh: &Mesh, center: &Vec3, translations: &[usize], rotations: &[usize]) -> Vec<Vec<f64>> {
    let n = mesh.n_vertices();
    let mut out = Vec::new();
    for &d in translations {
        let mut v = vec![0.0; 3 * n];
        for k in 0..n {
            v[3 * k + d] = 1.0;
        }
        out.push(v);
    }
    for &d in rotations {
        let mut axis = Vec3::zeros();
        axis[d] = 1.0;
        let mut v = vec![0.0; 3 * n];
        for (k, x) in mesh.vertices().iter().enumerate() {
            let r = axis.cross(&(x - center));
            v[3 * k..3 * k + 3].copy_from_slice(r.as_slice());
        }
        out.push(v);
    }
    out
}

/// Gram–Schmidt in the inner product ⟨x, y⟩ = xᵀ M y.
pub fn m_orthonormalize(vs: &[Vec<f64>], m: &SparseMatrix) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for v in vs {
        let mut w = v.clone();
        for _ in 0..2 {
            let mw = m.mul_vec(&w);
            let coeffs: Vec<f64> = out.iter().map(|q| dot(q, &mw)).collect();
            for (q, c) in out.iter().zip(coeffs) {
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let nrm = m.bilinear(&w, &w).sqrt();
        if nrm > 0.0 {
            for wi in &mut w {
                *wi /= nrm;
            }
            out.push(w);
        }
    }
    out
}

/// The six rigid modes about the centroid, orthonormal in L²(Y).
pub fn rigid_modes(mesh: &Mesh) -> Vec<Vec<f64>> {
    let raw = raw_rigid_modes(mesh, &mesh.centroid(), &[0, 1, 2], &[0, 1, 2]);
    m_orthonormalize(&raw, &vectorize(&fem::bulk_mass(mesh)))
}

/// The six rigid modes restricted to the membrane, orthonormal in L²(Γ).
pub fn membrane_rigid_modes(mesh: &Mesh) -> Result<(Vec<Vec<f64>>, SparseMatrix), MeshError> {
    let m = vectorize(&fem::surface_mass_bulk(mesh, Region::Membrane, None)?);
    let raw = raw_rigid_modes(mesh, &mesh.centroid(), &[0, 1, 2], &[0, 1, 2]);
    Ok((m_orthonormalize(&raw, &m), m))
}

/// Removes from a load functional b = ⟨g, ·⟩ the part generated by the L²
/// projection of g onto the given modes: b − Σₖ (r̂ₖᵀb) M r̂ₖ.
pub fn project_functional(b: &[f64], modes: &[Vec<f64>], m: &SparseMatrix) -> Vec<f64> {
    let mut out = b.to_vec();
    for r in modes {
        let c = dot(r, b);
        let mr = m.mul_vec(r);
        for (o, v) in out.iter_mut().zip(&mr) {
            *o -= c * v;
        }
    }
    out
}

/// Projection of a P1 membrane vector field (surface numbering) onto the
/// L²(Γ)-orthogonal complement of the rigid motions.
pub fn project_traction(mesh: &Mesh, g: &[Vec3]) -> Result<Vec<Vec3>, MeshError> {
    assert_eq!(g.len(), mesh.n_surface_vertices());
    let (modes, m) = membrane_rigid_modes(mesh)?;
    let n = mesh.n_vertices();
    let mut bulk = vec![0.0; 3 * n];
    for (k, &v) in mesh.surface_to_bulk().iter().enumerate() {
        bulk[3 * v..3 * v + 3].copy_from_slice(g[k].as_slice());
    }
    let mg = m.mul_vec(&bulk);
    for r in &modes {
        let c = dot(r, &mg);
        for (x, ri) in bulk.iter_mut().zip(r) {
            *x -= c * ri;
        }
    }
    Ok(mesh
        .surface_to_bulk()
        .iter()
        .map(|&v| Vec3::new(bulk[3 * v], bulk[3 * v + 1], bulk[3 * v + 2]))
        .collect())
}

/// Net force Σ bᵥ and torque Σ (xᵥ − c) × bᵥ of a load functional.
pub fn net_force_torque(mesh: &Mesh, b: &[f64]) -> (Vec3, Vec3) {
    let c = mesh.centroid();
    let mut f = Vec3::zeros();
    let mut m = Vec3::zeros();
    for (k, x) in mesh.vertices().iter().enumerate() {
        let bv = Vec3::new(b[3 * k], b[3 * k + 1], b[3 * k + 2]);
        f += bv;
        m += (x - c).cross(&bv);
    }
    (f, m)
}

/// Sum of the magnitudes entering net force and torque, for relative checks.
pub fn load_scale(mesh: &Mesh, b: &[f64]) -> (f64, f64) {
    let c = mesh.centroid();
    let mut fs = 0.0;
    let mut ms = 0.0;
    for (k, x) in mesh.vertices().iter().enumerate() {
        let bv = Vec3::new(b[3 * k], b[3 * k + 1], b[3 * k + 2]);
        fs += bv.norm();
        ms += (x - c).norm() * bv.norm();
    }
    (fs, ms)
}

/// ∫u_d over Y for each listed component and ∫(∂ⱼuᵢ − ∂ᵢuⱼ) for each listed
/// rotation axis k (with (i, j) the other two axes in cyclic order).
pub fn constraint_functionals(mesh: &Mesh, translations: &[usize], rotations: &[usize]) -> Vec<Vec<f64>> {
    let n = mesh.n_vertices();
    let lumped = fem::bulk_lumped_mass(mesh);
    let mut rows = Vec::new();
    for &d in translations {
        let mut r = vec![0.0; 3 * n];
        for k in 0..n {
            r[3 * k + d] = lumped[k];
        }
        rows.push(r);
    }
    for &axis in rotations {
        // rotation about `axis` has ∂ⱼuᵢ − ∂ᵢuⱼ = 2 with (i, j) = (axis+2, axis+1) mod 3
        let i = (axis + 2) % 3;
        let j = (axis + 1) % 3;
        let mut r = vec![0.0; 3 * n];
        for (t, g) in mesh.tets().iter().zip(mesh.tet_geometry()) {
            for a in 0..4 {
                r[3 * t[a] + i] += g.volume * g.grads[a][j];
                r[3 * t[a] + j] -= g.volume * g.grads[a][i];
            }
        }
        rows.push(r);
    }
    rows
}

/// Per-element stress trace and divergence for the elastic law.
pub fn stress_summary(mesh: &Mesh, u: &[f64], lame: &[Lame]) -> StressSummary {
    let div: Vec<f64> = element_divergence(mesh, u);
    let tr: Vec<f64> = div
        .iter()
        .zip(lame)
        .map(|(d, l)| (3.0 * l.lambda + 2.0 * STRAIN_FACTOR * l.mu) * d)
        .collect();
    summarize(mesh, tr, div)
}

/// Stress trace including the rate terms of the viscoelastic law, with
/// ∂ₜu ≈ (u − u_prev)/Δt.
pub fn viscous_stress_summary(
    mesh: &Mesh,
    u: &[f64],
    u_prev: &[f64],
    dt: f64,
    lame: &[Lame],
    theta_lambda: f64,
    theta_mu: f64,
) -> StressSummary {
    let div = element_divergence(mesh, u);
    let div_prev = element_divergence(mesh, u_prev);
    let tr = div
        .iter()
        .zip(&div_prev)
        .zip(lame)
        .map(|((d, dp), l)| {
            let mu = 2.0 * STRAIN_FACTOR * l.mu;
            let rate = (d - dp) / dt;
            (3.0 * l.lambda + mu) * d + (3.0 * l.lambda * theta_lambda + mu * theta_mu) * rate
        })
        .collect();
    summarize(mesh, tr, div)
}

pub fn element_divergence(mesh: &Mesh, u: &[f64]) -> Vec<f64> {
    fem::element_vector_gradient(mesh, u)
        .iter()
        .map(Matrix3::trace)
        .collect()
}

fn summarize(mesh: &Mesh, tr: Vec<f64>, div: Vec<f64>) -> StressSummary {
    let vol = mesh.volume();
    let div_mean = div
        .iter()
        .zip(mesh.tet_geometry())
        .map(|(d, g)| d * g.volume)
        .sum::<f64>()
        / vol;
    let div_min = div.iter().copied().fold(f64::INFINITY, f64::min);
    let div_max = div.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tr_plus = tr.iter().map(|&t| t.max(0.0)).collect();
    StressSummary {
        tr_sigma: tr,
        tr_sigma_plus: tr_plus,
        div_u: div,
        div_mean,
        div_min,
        div_max,
    }
}

/// Assembled boundary treatment and load machinery for one mesh.
pub struct ElasticSolver<'m> {
    mesh: &'m Mesh,
    bc: BcMode,
    tol: f64,
    constraints: Constraints,
    load_region: Region<'m>,
    load_modes: Vec<Vec<f64>>,
    load_mass: SparseMatrix,
    fixed: Vec<bool>,
    nucleus: Option<SparseMatrix>,
    assembler: StiffnessAssembler,
    cache: Option<CachedOperator>,
}

struct CachedOperator {
    lame: Vec<Lame>,
    s_lambda: f64,
    s_mu: f64,
    matrix: SparseMatrix,
    precond: Preconditioner,
}

impl<'m> ElasticSolver<'m> {
    /// `omega` enables the Robin condition σ(u)ν = −ωu on the nucleus.
    pub fn new(mesh: &'m Mesh, bc: BcMode, omega: Option<f64>, tol: f64) -> Result<Self, ElasticityError> {
        let n = mesh.n_vertices();
        let center = mesh.centroid();
        let (translations, rotations, load_region): (&[usize], &[usize], Region<'m>) = match bc {
            BcMode::PureTraction => (&[0, 1, 2], &[0, 1, 2], Region::Membrane),
            BcMode::PartiallyFixed => {
                if mesh.region_tag(BOTTOM_TAG).map_or(true, |t| t.tris.is_empty()) {
                    return Err(ElasticityError::MissingBottom);
                }
                (&[0, 1], &[2], Region::MembraneExcept(BOTTOM_TAG))
            }
        };
        let mut fixed = vec![false; 3 * n];
        if bc == BcMode::PartiallyFixed {
            for &v in &mesh.region_tag(BOTTOM_TAG)?.vertices {
                fixed[3 * v + 2] = true;
            }
        }
        let load_mass = vectorize(&fem::surface_mass_bulk(mesh, load_region, None)?);
        let raw = raw_rigid_modes(mesh, &center, translations, rotations);
        let load_modes = m_orthonormalize(&raw, &load_mass);
        let constraints = Constraints {
            rows: constraint_functionals(mesh, translations, rotations),
            modes: raw,
        };
        let nucleus = match omega {
            None => None,
            Some(w) => {
                if mesh.region_tag(NUCLEUS_TAG).map_or(true, |t| t.tris.is_empty()) {
                    return Err(ElasticityError::MissingNucleus);
                }
                let m = fem::surface_mass_bulk(mesh, Region::Tag(NUCLEUS_TAG), None)?;
                Some(vectorize(&m).scaled(w))
            }
        };
        Ok(Self {
            mesh,
            bc,
            tol,
            constraints,
            load_region,
            load_modes,
            load_mass,
            fixed,
            nucleus,
            assembler: StiffnessAssembler::new(mesh),
            cache: None,
        })
    }

    pub fn mesh(&self) -> &'m Mesh {
        self.mesh
    }

    pub fn bc_mode(&self) -> BcMode {
        self.bc
    }

    pub fn constraints(&self) -> &Constraints {
        &self.constraints
    }

    /// Degrees of freedom held at zero (u₃ on the contact set).
    pub fn fixed_dofs(&self) -> &[bool] {
        &self.fixed
    }

    /// k₆·𝕡(ρ ν̂) as a load functional on the load region, with fixed
    /// degrees of freedom zeroed.
    pub fn traction_load(&self, rho_surface: &[f64], k6: f64) -> Result<Vec<f64>, ElasticityError> {
        if rho_surface.len() != self.mesh.n_surface_vertices() {
            return Err(ElasticityError::Input(format!(
                "surface field has {} values, mesh has {} membrane vertices",
                rho_surface.len(),
                self.mesh.n_surface_vertices()
            )));
        }
        let raw = fem::normal_traction_load(self.mesh, self.load_region, rho_surface)?;
        let mut b = project_functional(&raw, &self.load_modes, &self.load_mass);
        for (bi, &f) in b.iter_mut().zip(&self.fixed) {
            *bi = if f { 0.0 } else { k6 * *bi };
        }
        Ok(b)
    }

    /// Stiffness with scaled Lamé constants, the nucleus term and the base
    /// constraint applied, with its preconditioner; the last one is cached.
    fn prepare(&mut self, lame: &[Lame], s_lambda: f64, s_mu: f64) {
        let hit = self
            .cache
            .as_ref()
            .is_some_and(|c| c.lame == lame && c.s_lambda == s_lambda && c.s_mu == s_mu);
        if !hit {
            let scaled: Vec<Lame> = lame
                .iter()
                .map(|l| Lame {
                    lambda: l.lambda * s_lambda,
                    mu: l.mu * s_mu,
                })
                .collect();
            let mut k = self.assembler.assemble(self.mesh, &scaled);
            if let Some(nm) = &self.nucleus {
                k = SparseMatrix::linear_combination(&[(1.0, &k), (1.0, nm)]);
            }
            if self.bc == BcMode::PartiallyFixed {
                k = k.eliminate(&self.fixed);
            }
            let precond = Preconditioner::build(&k, PrecondKind::IncompleteCholesky);
            self.cache = Some(CachedOperator {
                lame: lame.to_vec(),
                s_lambda,
                s_mu,
                matrix: k,
                precond,
            });
        }
    }

    fn solve_system(
        &mut self,
        lame: &[Lame],
        s_lambda: f64,
        s_mu: f64,
        b: &[f64],
        x0: Option<&[f64]>,
    ) -> Result<(Vec<f64>, SolveReport), ElasticityError> {
        let opts = CgOptions::with_tol(self.tol);
        self.prepare(lame, s_lambda, s_mu);
        let op = self.cache.as_ref().unwrap();
        let sol = linsolve::solve_constrained_preconditioned(&op.matrix, b, &self.constraints, x0, opts, &op.precond)?;
        Ok((sol.x, sol.report))
    }

    /// Elastic equilibrium for the given element Lamé constants and RhoA field.
    pub fn solve(
        &mut self,
        lame: &[Lame],
        rho_surface: &[f64],
        k6: f64,
        guess: Option<&[f64]>,
    ) -> Result<Displacement, ElasticityError> {
        let b = self.traction_load(rho_surface, k6)?;
        let (x, report) = self.solve_system(lame, 1.0, 1.0, &b, guess)?;
        Ok(Displacement {
            u: NodalField::vector(x, Unit::Micrometre),
            lame: lame.to_vec(),
            report,
        })
    }

    /// One backward-Euler step of the viscoelastic law:
    /// K(λ(1+θ_λ/Δt), μ(1+θ_μ/Δt)) Uⁿ = K(λθ_λ/Δt, μθ_μ/Δt) Uⁿ⁻¹ + b.
    #[allow(clippy::too_many_arguments)]
    pub fn step_viscoelastic(
        &mut self,
        lame: &[Lame],
        rho_surface: &[f64],
        k6: f64,
        u_prev: &[f64],
        dt: f64,
        theta_lambda: f64,
        theta_mu: f64,
    ) -> Result<Displacement, ElasticityError> {
        if u_prev.len() != 3 * self.mesh.n_vertices() {
            return Err(ElasticityError::Input("previous displacement has wrong length".into()));
        }
        if !(dt > 0.0) {
            return Err(ElasticityError::Input(format!("time step must be positive, got {dt}")));
        }
        let mut b = self.traction_load(rho_surface, k6)?;
        if theta_lambda != 0.0 || theta_mu != 0.0 {
            let mut hist = self.assembler.assemble(
                self.mesh,
                &lame
                    .iter()
                    .map(|l| Lame {
                        lambda: l.lambda * theta_lambda / dt,
                        mu: l.mu * theta_mu / dt,
                    })
                    .collect::<Vec<_>>(),
            );
            if self.bc == BcMode::PartiallyFixed {
                hist = hist.eliminate(&self.fixed);
            }
            let hu = hist.mul_vec(u_prev);
            for ((bi, h), &f) in b.iter_mut().zip(&hu).zip(&self.fixed) {
                if !f {
                    *bi += h;
                }
            }
        }
        let (x, report) = self.solve_system(lame, 1.0 + theta_lambda / dt, 1.0 + theta_mu / dt, &b, Some(u_prev))?;
        Ok(Displacement {
            u: NodalField::vector(x, Unit::Micrometre),
            lame: lame.to_vec(),
            report,
        })
    }

    /// max over the constraint functionals of |cₖᵀu|/‖cₖ‖, relative to ‖u‖.
    pub fn constraint_residual(&self, u: &[f64]) -> f64 {
        let un = fem::norm2(u);
        if un == 0.0 {
            return 0.0;
        }
        self.constraints.residual(u) / un
    }
}
