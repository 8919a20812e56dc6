//! P1 finite-element assembly on tetrahedra and boundary triangles.
//!
//! All bilinear forms are integrated exactly for P1 products. Bulk matrices
//! are indexed by bulk vertex; surface-indexed variants use the membrane
//! numbering of [`Mesh::surface_to_bulk`].

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::mesh::{Mesh, MeshError, Region, Vec3};

/// Physical unit attached to a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    /// μmol/dm³ (bulk concentration)
    MicromolarBulk,
    /// μmol/dm² (surface concentration)
    MicromolarSurface,
    /// μm (displacement)
    Micrometre,
    Dimensionless,
}

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("field has {found} values, expected {expected}")]
    Length { expected: usize, found: usize },
    #[error("field unit {found:?} where {expected:?} was expected")]
    Unit { expected: Unit, found: Unit },
    #[error("field contains non-finite value at index {0}")]
    NonFinite(usize),
}

/// P1 coefficients over bulk vertices; vector fields interleave 3 components.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalField {
    pub values: Vec<f64>,
    pub components: usize,
    pub unit: Unit,
}

impl NodalField {
    pub fn scalar(values: Vec<f64>, unit: Unit) -> Self {
        Self {
            values,
            components: 1,
            unit,
        }
    }

    pub fn vector(values: Vec<f64>, unit: Unit) -> Self {
        Self {
            values,
            components: 3,
            unit,
        }
    }

    pub fn uniform(mesh: &Mesh, value: f64, unit: Unit) -> Self {
        Self::scalar(vec![value; mesh.n_vertices()], unit)
    }

    pub fn check(&self, mesh: &Mesh, unit: Unit) -> Result<(), FieldError> {
        let expected = mesh.n_vertices() * self.components;
        if self.values.len() != expected {
            return Err(FieldError::Length {
                expected,
                found: self.values.len(),
            });
        }
        if self.unit != unit {
            return Err(FieldError::Unit {
                expected: unit,
                found: self.unit,
            });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(i));
        }
        Ok(())
    }

    pub fn vertex_vec(&self, v: usize) -> Vec3 {
        Vec3::new(self.values[3 * v], self.values[3 * v + 1], self.values[3 * v + 2])
    }
}

/// P1 coefficients over membrane vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceField {
    pub values: Vec<f64>,
    pub unit: Unit,
}

impl SurfaceField {
    pub fn new(values: Vec<f64>, unit: Unit) -> Self {
        Self { values, unit }
    }

    pub fn uniform(mesh: &Mesh, value: f64, unit: Unit) -> Self {
        Self::new(vec![value; mesh.n_surface_vertices()], unit)
    }

    pub fn check(&self, mesh: &Mesh, unit: Unit) -> Result<(), FieldError> {
        if self.values.len() != mesh.n_surface_vertices() {
            return Err(FieldError::Length {
                expected: mesh.n_surface_vertices(),
                found: self.values.len(),
            });
        }
        if self.unit != unit {
            return Err(FieldError::Unit {
                expected: unit,
                found: self.unit,
            });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(i));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// sparse matrices

/// Compressed-sparse-row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    symmetric: bool,
    spd: bool,
}

/// Coordinate-format accumulator; duplicates are summed on [`finalize`].
///
/// [`finalize`]: TripletBuilder::finalize
#[derive(Clone, Debug)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        self.entries.push((i, j, v));
    }

    /// Sums duplicates in insertion order and drops exact zeros.
    pub fn finalize(mut self, symmetric: bool, spd: bool) -> SparseMatrix {
        // stable sort keeps summation order equal to insertion order
        self.entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut offsets = vec![0usize; self.nrows + 1];
        let mut cols = Vec::with_capacity(self.entries.len() / 4);
        let mut vals: Vec<f64> = Vec::with_capacity(self.entries.len() / 4);
        let mut k = 0;
        let n = self.entries.len();
        for row in 0..self.nrows {
            while k < n && self.entries[k].0 == row {
                let col = self.entries[k].1;
                let mut s = 0.0;
                while k < n && self.entries[k].0 == row && self.entries[k].1 == col {
                    s += self.entries[k].2;
                    k += 1;
                }
                if s != 0.0 {
                    cols.push(col);
                    vals.push(s);
                }
            }
            offsets[row + 1] = cols.len();
        }
        SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            offsets,
            cols,
            vals,
            symmetric,
            spd,
        }
    }
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        TripletBuilder::new(nrows, ncols).finalize(nrows == ncols, false)
    }

    pub fn identity(n: usize) -> Self {
        let mut b = TripletBuilder::with_capacity(n, n, n);
        for i in 0..n {
            b.add(i, i, 1.0);
        }
        b.finalize(true, true)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn is_spd(&self) -> bool {
        self.spd
    }

    pub fn set_spd(&mut self, spd: bool) {
        self.spd = spd;
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        match c.binary_search(&j) {
            Ok(k) => v[k],
            Err(_) => 0.0,
        }
    }

    /// Index of entry (i, j) in [`values`](Self::values), if stored.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.offsets[i];
        self.cols[start..self.offsets[i + 1]].binary_search(&j).ok().map(|k| start + k)
    }

    /// A matrix with this sparsity pattern and new values (stored zeros kept).
    pub fn with_values(&self, vals: Vec<f64>, spd: bool) -> SparseMatrix {
        assert_eq!(vals.len(), self.vals.len());
        SparseMatrix {
            vals,
            spd,
            ..self.clone_structure()
        }
    }

    fn clone_structure(&self) -> SparseMatrix {
        SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            offsets: self.offsets.clone(),
            cols: self.cols.clone(),
            vals: Vec::new(),
            symmetric: self.symmetric,
            spd: self.spd,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, i)).collect()
    }

    /// y = A x. Rows are processed in parallel for large systems; each row is
    /// summed sequentially, so the result does not depend on the thread count.
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        let row = |i: usize| {
            let mut s = 0.0;
            for k in self.offsets[i]..self.offsets[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            s
        };
        if self.nrows >= 20_000 {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = row(i));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = row(i);
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// xᵀ A y
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.mul_vec(y))
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut b = TripletBuilder::with_capacity(self.ncols, self.nrows, self.nnz());
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                b.add(j, i, a);
            }
        }
        b.finalize(self.symmetric, self.spd)
    }

    pub fn scaled(&self, s: f64) -> SparseMatrix {
        let mut m = self.clone();
        for v in &mut m.vals {
            *v *= s;
        }
        if m.vals.iter().all(|v| *v != 0.0) {
            m
        } else {
            m.prune()
        }
    }

    fn prune(mut self) -> SparseMatrix {
        let mut b = TripletBuilder::with_capacity(self.nrows, self.ncols, self.nnz());
        for i in 0..self.nrows {
            for k in self.offsets[i]..self.offsets[i + 1] {
                b.add(i, self.cols[k], self.vals[k]);
            }
        }
        let (s, p) = (self.symmetric, self.spd);
        self.vals.clear();
        b.finalize(s, p)
    }

    /// Σ cₖ Aₖ over matrices of equal shape, summed in the given order.
    pub fn linear_combination(terms: &[(f64, &SparseMatrix)]) -> SparseMatrix {
        assert!(!terms.is_empty());
        let (nr, nc) = (terms[0].1.nrows, terms[0].1.ncols);
        let cap: usize = terms.iter().map(|(_, m)| m.nnz()).sum();
        let mut b = TripletBuilder::with_capacity(nr, nc, cap);
        for (c, m) in terms {
            assert_eq!((m.nrows, m.ncols), (nr, nc), "shape mismatch");
            for i in 0..nr {
                for k in m.offsets[i]..m.offsets[i + 1] {
                    b.add(i, m.cols[k], c * m.vals[k]);
                }
            }
        }
        let symmetric = terms.iter().all(|(_, m)| m.symmetric);
        b.finalize(symmetric, false)
    }

    /// Exact structural and numerical symmetry check.
    pub fn is_exactly_symmetric(&self) -> bool {
        self.nrows == self.ncols
            && (0..self.nrows).all(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).all(|(&j, &a)| self.get(j, i) == a)
            })
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                d[(i, j)] = a;
            }
        }
        d
    }

    /// Symmetric elimination of fixed degrees of freedom with zero prescribed
    /// value: rows and columns are cleared and a unit diagonal is placed.
    pub fn eliminate(&self, fixed: &[bool]) -> SparseMatrix {
        let mut b = TripletBuilder::with_capacity(self.nrows, self.ncols, self.nnz());
        for i in 0..self.nrows {
            if fixed[i] {
                b.add(i, i, 1.0);
                continue;
            }
            for k in self.offsets[i]..self.offsets[i + 1] {
                let j = self.cols[k];
                if !fixed[j] {
                    b.add(i, j, self.vals[k]);
                }
            }
        }
        b.finalize(self.symmetric, self.spd)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// quadrature

/// Quadrature point in barycentric coordinates with a weight normalised to
/// sum to one.
#[derive(Clone, Copy, Debug)]
pub struct QuadPoint<const N: usize> {
    pub bary: [f64; N],
    pub weight: f64,
}

/// Degree-5 rule on the tetrahedron (14 points).
pub fn tet_rule_deg5() -> Vec<QuadPoint<4>> {
    let mut pts = Vec::with_capacity(14);
    let groups = [
        (0.0927352503108912, 0.01224884051939366),
        (0.3108859192633006, 0.01878132095300264),
    ];
    for (a, w) in groups {
        let b = 1.0 - 3.0 * a;
        for k in 0..4 {
            let mut bary = [a; 4];
            bary[k] = b;
            pts.push(QuadPoint { bary, weight: 6.0 * w });
        }
    }
    let a = 0.4544962958743504;
    let b = 0.5 - a;
    let w = 0.007091003462846911;
    for (i, j) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
        let mut bary = [b; 4];
        bary[i] = a;
        bary[j] = a;
        pts.push(QuadPoint { bary, weight: 6.0 * w });
    }
    pts
}

/// Degree-5 rule on the triangle (7 points).
pub fn tri_rule_deg5() -> Vec<QuadPoint<3>> {
    let mut pts = vec![QuadPoint {
        bary: [1.0 / 3.0; 3],
        weight: 0.225,
    }];
    for (a, b, w) in [
        (0.0597158717897698, 0.4701420641051151, 0.1323941527885062),
        (0.7974269853530873, 0.1012865073234563, 0.1259391805448271),
    ] {
        for k in 0..3 {
            let mut bary = [b; 3];
            bary[k] = a;
            pts.push(QuadPoint { bary, weight: w });
        }
    }
    pts
}

// ---------------------------------------------------------------------------
// bulk operators

fn tet_mass_entry(i: usize, j: usize, vol: f64) -> f64 {
    if i == j {
        vol / 10.0
    } else {
        vol / 20.0
    }
}

/// Consistent P1 mass matrix ⟨φⱼ, φᵢ⟩_Y.
pub fn bulk_mass(mesh: &Mesh) -> SparseMatrix {
    bulk_weighted_mass(mesh, None)
}

/// ⟨c φⱼ, φᵢ⟩_Y for an element-constant coefficient (`None` means c ≡ 1).
pub fn bulk_weighted_mass(mesh: &Mesh, coeff: Option<&[f64]>) -> SparseMatrix {
    let n = mesh.n_vertices();
    let mut b = TripletBuilder::with_capacity(n, n, 16 * mesh.n_tets());
    for (e, (t, g)) in mesh.tets().iter().zip(mesh.tet_geometry()).enumerate() {
        let c = coeff.map_or(1.0, |c| c[e]);
        for i in 0..4 {
            for j in 0..4 {
                b.add(t[i], t[j], c * tet_mass_entry(i, j, g.volume));
            }
        }
    }
    let spd = coeff.is_none_or(|c| c.iter().all(|&x| x > 0.0));
    b.finalize(true, spd)
}

/// Lumped (row-sum) mass, kept only as a positivity diagnostic.
pub fn bulk_lumped_mass(mesh: &Mesh) -> Vec<f64> {
    let mut m = vec![0.0; mesh.n_vertices()];
    for (t, g) in mesh.tets().iter().zip(mesh.tet_geometry()) {
        for &v in t {
            m[v] += g.volume / 4.0;
        }
    }
    m
}

/// ⟨c ∇φⱼ, ∇φᵢ⟩_Y with an element-constant coefficient.
pub fn bulk_stiffness(mesh: &Mesh, coeff: &[f64]) -> SparseMatrix {
    assert_eq!(coeff.len(), mesh.n_tets());
    let n = mesh.n_vertices();
    let mut b = TripletBuilder::with_capacity(n, n, 16 * mesh.n_tets());
    for ((t, g), &c) in mesh.tets().iter().zip(mesh.tet_geometry()).zip(coeff) {
        for i in 0..4 {
            for j in 0..4 {
                b.add(t[i], t[j], c * g.volume * g.grads[i].dot(&g.grads[j]));
            }
        }
    }
    b.finalize(true, false)
}

/// ⟨c, φᵢ⟩_Y for an element-constant source.
pub fn bulk_load_elementwise(mesh: &Mesh, source: &[f64]) -> Vec<f64> {
    let mut f = vec![0.0; mesh.n_vertices()];
    for ((t, g), &s) in mesh.tets().iter().zip(mesh.tet_geometry()).zip(source) {
        for &v in t {
            f[v] += s * g.volume / 4.0;
        }
    }
    f
}

/// ⟨f, φᵢ⟩_Y by the degree-5 rule for a pointwise source.
pub fn bulk_load_fn(mesh: &Mesh, f: impl Fn(&Vec3) -> f64) -> Vec<f64> {
    let rule = tet_rule_deg5();
    let mut out = vec![0.0; mesh.n_vertices()];
    for (t, g) in mesh.tets().iter().zip(mesh.tet_geometry()) {
        let p = t.map(|v| mesh.vertices()[v]);
        for q in &rule {
            let x = p[0] * q.bary[0] + p[1] * q.bary[1] + p[2] * q.bary[2] + p[3] * q.bary[3];
            let fx = f(&x) * q.weight * g.volume;
            for k in 0..4 {
                out[t[k]] += fx * q.bary[k];
            }
        }
    }
    out
}

/// Exact P1 gradient of a scalar field on every tetrahedron.
pub fn element_gradient(mesh: &Mesh, field: &[f64]) -> Vec<Vec3> {
    assert_eq!(field.len(), mesh.n_vertices());
    mesh.tets()
        .iter()
        .zip(mesh.tet_geometry())
        .map(|(t, g)| (0..4).map(|k| g.grads[k] * field[t[k]]).sum())
        .collect()
}

/// Exact P1 gradient ∂uᵢ/∂xⱼ (row i, column j) of an interleaved vector field.
pub fn element_vector_gradient(mesh: &Mesh, field: &[f64]) -> Vec<Matrix3<f64>> {
    assert_eq!(field.len(), 3 * mesh.n_vertices());
    mesh.tets()
        .iter()
        .zip(mesh.tet_geometry())
        .map(|(t, g)| {
            let mut m = Matrix3::zeros();
            for k in 0..4 {
                let v = t[k];
                for i in 0..3 {
                    for j in 0..3 {
                        m[(i, j)] += g.grads[k][j] * field[3 * v + i];
                    }
                }
            }
            m
        })
        .collect()
}

/// Element means of a P1 scalar field.
pub fn element_means(mesh: &Mesh, field: &[f64]) -> Vec<f64> {
    mesh.tets()
        .iter()
        .map(|t| t.iter().map(|&v| field[v]).sum::<f64>() / 4.0)
        .collect()
}

// ---------------------------------------------------------------------------
// surface operators

/// Exact triangle integral ∫ λᵢ λⱼ λₖ = 2A·i!j!k!/(i+j+k+2)!, specialised to
/// one power per index.
fn tri_triple(i: usize, j: usize, k: usize, area: f64) -> f64 {
    if i == j && j == k {
        area / 10.0
    } else if i == j || j == k || i == k {
        area / 30.0
    } else {
        area / 60.0
    }
}

fn tri_mass_entry(i: usize, j: usize, area: f64) -> f64 {
    if i == j {
        area / 6.0
    } else {
        area / 12.0
    }
}

/// ⟨c φⱼ, φᵢ⟩ over the region's triangles, bulk-indexed, with one
/// coefficient per boundary triangle (`None` means c ≡ 1).
pub fn surface_mass_bulk(
    mesh: &Mesh,
    region: Region<'_>,
    tri_coeff: Option<&[f64]>,
) -> Result<SparseMatrix, MeshError> {
    let n = mesh.n_vertices();
    let tris = mesh.region_tris(region)?;
    let mut b = TripletBuilder::with_capacity(n, n, 9 * tris.len());
    for &t in &tris {
        let bt = &mesh.boundary()[t];
        let c = tri_coeff.map_or(1.0, |c| c[t]);
        for i in 0..3 {
            for j in 0..3 {
                b.add(bt.vertices[i], bt.vertices[j], c * tri_mass_entry(i, j, bt.area));
            }
        }
    }
    Ok(b.finalize(true, false))
}

fn membrane_tris_of(mesh: &Mesh, region: Region<'_>) -> Result<Vec<(usize, usize)>, MeshError> {
    mesh.region_tris(region)?
        .into_iter()
        .map(|t| {
            mesh.membrane_position(t).map(|k| (t, k)).ok_or_else(|| {
                MeshError::Invalid(format!("boundary triangle {t} is not part of the membrane"))
            })
        })
        .collect()
}

/// Surface-indexed mass ⟨c φⱼ, φᵢ⟩ over a region of the membrane.
pub fn surface_mass(
    mesh: &Mesh,
    region: Region<'_>,
    tri_coeff: Option<&[f64]>,
) -> Result<SparseMatrix, MeshError> {
    let n = mesh.n_surface_vertices();
    let tris = membrane_tris_of(mesh, region)?;
    let mut b = TripletBuilder::with_capacity(n, n, 9 * tris.len());
    for &(t, k) in &tris {
        let area = mesh.boundary()[t].area;
        let sv = mesh.surface_tris()[k];
        let c = tri_coeff.map_or(1.0, |c| c[t]);
        for i in 0..3 {
            for j in 0..3 {
                b.add(sv[i], sv[j], c * tri_mass_entry(i, j, area));
            }
        }
    }
    Ok(b.finalize(true, false))
}

/// Surface-indexed ⟨c_h φⱼ, φᵢ⟩ with c_h the P1 interpolant of nodal values
/// `nodal` (surface numbering), integrated exactly.
pub fn surface_mass_p1_weighted(
    mesh: &Mesh,
    region: Region<'_>,
    nodal: &[f64],
) -> Result<SparseMatrix, MeshError> {
    let n = mesh.n_surface_vertices();
    assert_eq!(nodal.len(), n);
    let tris = membrane_tris_of(mesh, region)?;
    let mut b = TripletBuilder::with_capacity(n, n, 9 * tris.len());
    for &(t, k) in &tris {
        let area = mesh.boundary()[t].area;
        let sv = mesh.surface_tris()[k];
        for i in 0..3 {
            for j in 0..3 {
                let w: f64 = (0..3).map(|l| nodal[sv[l]] * tri_triple(i, j, l, area)).sum();
                b.add(sv[i], sv[j], w);
            }
        }
    }
    Ok(b.finalize(true, false))
}

/// Laplace–Beltrami stiffness ⟨∇_Γ φⱼ, ∇_Γ φᵢ⟩ on the membrane, surface-indexed.
pub fn surface_stiffness(mesh: &Mesh) -> SparseMatrix {
    let n = mesh.n_surface_vertices();
    let mut b = TripletBuilder::with_capacity(n, n, 9 * mesh.membrane().len());
    for (k, &t) in mesh.membrane().iter().enumerate() {
        let area = mesh.boundary()[t].area;
        let g = mesh.tri_gradients(t);
        let sv = mesh.surface_tris()[k];
        for i in 0..3 {
            for j in 0..3 {
                b.add(sv[i], sv[j], area * g[i].dot(&g[j]));
            }
        }
    }
    b.finalize(true, false)
}

/// ⟨g, vᵢ⟩ over a region for a P1 vector field given on membrane vertices;
/// returned as an interleaved bulk load vector. Vertices of the field that
/// lie outside the region contribute nothing.
pub fn boundary_load(mesh: &Mesh, region: Region<'_>, field: &[Vec3]) -> Result<Vec<f64>, MeshError> {
    assert_eq!(field.len(), mesh.n_surface_vertices());
    let tris = membrane_tris_of(mesh, region)?;
    let mut out = vec![0.0; 3 * mesh.n_vertices()];
    for &(t, k) in &tris {
        let bt = &mesh.boundary()[t];
        let sv = mesh.surface_tris()[k];
        for i in 0..3 {
            let mut acc = Vec3::zeros();
            for j in 0..3 {
                acc += field[sv[j]] * tri_mass_entry(i, j, bt.area);
            }
            let v = bt.vertices[i];
            for c in 0..3 {
                out[3 * v + c] += acc[c];
            }
        }
    }
    Ok(out)
}

/// ⟨ρ ν̂, vᵢ⟩ over a region with ν̂ the (piecewise constant) facet normal and
/// ρ a P1 surface field; interleaved bulk vector.
pub fn normal_traction_load(mesh: &Mesh, region: Region<'_>, rho: &[f64]) -> Result<Vec<f64>, MeshError> {
    assert_eq!(rho.len(), mesh.n_surface_vertices());
    let tris = membrane_tris_of(mesh, region)?;
    let mut out = vec![0.0; 3 * mesh.n_vertices()];
    for &(t, k) in &tris {
        let bt = &mesh.boundary()[t];
        let sv = mesh.surface_tris()[k];
        for i in 0..3 {
            let w: f64 = (0..3).map(|j| rho[sv[j]] * tri_mass_entry(i, j, bt.area)).sum();
            let v = bt.vertices[i];
            for c in 0..3 {
                out[3 * v + c] += w * bt.normal[c];
            }
        }
    }
    Ok(out)
}

/// ⟨f, φᵢ⟩ over a region for a pointwise scalar source, surface-indexed,
/// evaluated with the degree-5 triangle rule. `f` receives the point and the
/// facet normal.
pub fn surface_load_fn(
    mesh: &Mesh,
    region: Region<'_>,
    f: impl Fn(&Vec3, &Vec3) -> f64,
) -> Result<Vec<f64>, MeshError> {
    let rule = tri_rule_deg5();
    let tris = membrane_tris_of(mesh, region)?;
    let mut out = vec![0.0; mesh.n_surface_vertices()];
    for &(t, k) in &tris {
        let bt = &mesh.boundary()[t];
        let p = bt.vertices.map(|v| mesh.vertices()[v]);
        let sv = mesh.surface_tris()[k];
        for q in &rule {
            let x = p[0] * q.bary[0] + p[1] * q.bary[1] + p[2] * q.bary[2];
            let fx = f(&x, &bt.normal) * q.weight * bt.area;
            for l in 0..3 {
                out[sv[l]] += fx * q.bary[l];
            }
        }
    }
    Ok(out)
}

/// Restriction of a bulk P1 field to membrane vertices.
pub fn restrict_to_surface(mesh: &Mesh, bulk: &[f64]) -> Vec<f64> {
    mesh.surface_to_bulk().iter().map(|&v| bulk[v]).collect()
}

/// Adds a surface-indexed vector into bulk indexing.
pub fn surface_to_bulk_vector(mesh: &Mesh, surf: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_vertices()];
    for (k, &v) in mesh.surface_to_bulk().iter().enumerate() {
        out[v] += surf[k];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_cell_dome, generate_unit_ball, BOTTOM_TAG};
    use approx::assert_relative_eq;

    fn reference_simplex() -> Mesh {
        Mesh::from_tets(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2, 3]],
            Vec::new(),
        )
        .unwrap()
    }

    fn two_tets() -> Mesh {
        Mesh::from_tets(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                Vec3::new(1.0, 1.0, 1.0),
            ],
            vec![[0, 1, 2, 3], [1, 2, 3, 4]],
            Vec::new(),
        )
        .unwrap()
    }

    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }

    fn factorial(n: u32) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    #[test]
    fn tet_rule_integrates_degree_five_monomials() {
        // ∫ x^a y^b z^c over the reference simplex = a!b!c!/(a+b+c+3)!
        let rule = tet_rule_deg5();
        let w: f64 = rule.iter().map(|q| q.weight).sum();
        assert_relative_eq!(w, 1.0, epsilon = 1e-14);
        for a in 0..=5u32 {
            for b in 0..=(5 - a) {
                for c in 0..=(5 - a - b) {
                    let exact = factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 3);
                    let q: f64 = rule
                        .iter()
                        .map(|q| {
                            q.weight / 6.0
                                * q.bary[1].powi(a as i32)
                                * q.bary[2].powi(b as i32)
                                * q.bary[3].powi(c as i32)
                        })
                        .sum();
                    assert_relative_eq!(q, exact, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn tri_rule_integrates_degree_five_monomials() {
        let rule = tri_rule_deg5();
        for a in 0..=5u32 {
            for b in 0..=(5 - a) {
                let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                let q: f64 = rule
                    .iter()
                    .map(|q| 0.5 * q.weight * q.bary[1].powi(a as i32) * q.bary[2].powi(b as i32))
                    .sum();
                assert_relative_eq!(q, exact, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn mass_of_reference_simplex() {
        let m = bulk_mass(&reference_simplex());
        let total: f64 = m.values().iter().sum();
        assert_relative_eq!(total, 1.0 / 6.0, epsilon = 1e-15);
        assert!(m.is_exactly_symmetric());
    }

    #[test]
    fn two_tet_mass_matches_hand_integration() {
        let mesh = two_tets();
        let m = bulk_mass(&mesh);
        let v0 = mesh.tet_geometry()[0].volume;
        let v1 = mesh.tet_geometry()[1].volume;
        // vertex 0 only in tet 0, vertex 1 in both, 4 only in tet 1
        assert_relative_eq!(m.get(0, 0), v0 / 10.0, epsilon = 1e-15);
        assert_relative_eq!(m.get(1, 1), v0 / 10.0 + v1 / 10.0, epsilon = 1e-15);
        assert_relative_eq!(m.get(0, 1), v0 / 20.0, epsilon = 1e-15);
        assert_relative_eq!(m.get(1, 2), v0 / 20.0 + v1 / 20.0, epsilon = 1e-15);
        assert_relative_eq!(m.get(1, 4), v1 / 20.0, epsilon = 1e-15);
        assert_eq!(m.get(0, 4), 0.0);
    }

    #[test]
    fn stiffness_kernel_and_linear_energy() {
        let mesh = generate_unit_ball(1);
        let ones = vec![1.0; mesh.n_tets()];
        let k = bulk_stiffness(&mesh, &ones);
        assert!(k.is_exactly_symmetric());
        let c = vec![3.7; mesh.n_vertices()];
        let kc = k.mul_vec(&c);
        assert!(kc.iter().all(|v| v.abs() < 1e-12));
        let x: Vec<f64> = mesh.vertices().iter().map(|p| p.x).collect();
        assert_relative_eq!(k.bilinear(&x, &x), mesh.volume(), max_relative = 1e-12);
        let zero = bulk_stiffness(&mesh, &vec![0.0; mesh.n_tets()]);
        assert_eq!(zero.nnz(), 0);
    }

    #[test]
    fn stiffness_is_linear_in_coefficient() {
        let mesh = generate_unit_ball(0);
        let c: Vec<f64> = (0..mesh.n_tets()).map(|e| 1.0 + (e % 7) as f64).collect();
        let c3: Vec<f64> = c.iter().map(|v| 2.5 * v).collect();
        let a = bulk_stiffness(&mesh, &c);
        let b = bulk_stiffness(&mesh, &c3);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_relative_eq!(2.5 * x, *y, max_relative = 1e-14);
        }
    }

    #[test]
    fn sphere_surface_mass_and_laplace_beltrami() {
        let mesh = generate_unit_ball(2);
        let m = surface_mass(&mesh, Region::Membrane, None).unwrap();
        let area: f64 = m.values().iter().sum();
        let pi = std::f64::consts::PI;
        assert!((area / (4.0 * pi) - 1.0).abs() < 0.02, "area {area}");
        let k = surface_stiffness(&mesh);
        assert!(k.is_exactly_symmetric());
        let ones = vec![1.0; mesh.n_surface_vertices()];
        assert!(k.mul_vec(&ones).iter().all(|v| v.abs() < 1e-12));
        let z: Vec<f64> = mesh.surface_to_bulk().iter().map(|&v| mesh.vertices()[v].z).collect();
        let e = k.bilinear(&z, &z);
        assert!((e / (8.0 * pi / 3.0) - 1.0).abs() < 0.03, "energy {e}");
    }

    #[test]
    fn single_triangle_mass_block() {
        let mesh = reference_simplex();
        let region_tri = 0;
        let area = mesh.boundary()[region_tri].area;
        let coeff: Vec<f64> = (0..4).map(|t| if t == region_tri { 1.0 } else { 0.0 }).collect();
        let m = surface_mass_bulk(&mesh, Region::Membrane, Some(&coeff)).unwrap();
        let v = mesh.boundary()[region_tri].vertices;
        assert_relative_eq!(m.get(v[0], v[0]), area / 6.0, epsilon = 1e-15);
        assert_relative_eq!(m.get(v[0], v[1]), area / 12.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_region_gives_zero_matrix() {
        let mut mesh = generate_unit_ball(0);
        mesh.tag_region("empty", vec![]).unwrap();
        let m = surface_mass_bulk(&mesh, Region::Tag("empty"), None).unwrap();
        assert_eq!(m.nnz(), 0);
        assert!(matches!(
            surface_mass_bulk(&mesh, Region::Tag("nope"), None),
            Err(MeshError::UnknownRegion(_))
        ));
    }

    #[test]
    fn boundary_load_constant_field() {
        let mesh = generate_unit_ball(1);
        let g = Vec3::new(0.3, -1.2, 2.0);
        let field = vec![g; mesh.n_surface_vertices()];
        let b = boundary_load(&mesh, Region::Membrane, &field).unwrap();
        let area = mesh.geometry().surface_area;
        for c in 0..3 {
            let s: f64 = (0..mesh.n_vertices()).map(|v| b[3 * v + c]).sum();
            assert!((s - g[c] * area).abs() < 1e-12 * area.max(1.0));
        }
        let zero = boundary_load(&mesh, Region::Membrane, &vec![Vec3::zeros(); mesh.n_surface_vertices()]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_load_off_region_is_zero() {
        let mesh = generate_cell_dome(2.0, 1.0, 0).unwrap();
        let field: Vec<Vec3> = mesh
            .surface_to_bulk()
            .iter()
            .map(|&v| if mesh.vertices()[v].z > 0.5 { Vec3::new(1.0, 2.0, 3.0) } else { Vec3::zeros() })
            .collect();
        let b = boundary_load(&mesh, Region::Tag(BOTTOM_TAG), &field).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_of_coordinates_and_constants() {
        let mesh = generate_unit_ball(0);
        let y: Vec<f64> = mesh.vertices().iter().map(|p| p.y).collect();
        for g in element_gradient(&mesh, &y) {
            assert!((g - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
        }
        for g in element_gradient(&mesh, &vec![2.0; mesh.n_vertices()]) {
            assert!(g.norm() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_of_interpolant() {
        let mesh = reference_simplex();
        let vals = [0.37, -1.2, 2.5, 0.11];
        let g = element_gradient(&mesh, &vals)[0];
        // the affine interpolant on the reference simplex in barycentric form
        let f = |p: Vec3| vals[0] * (1.0 - p.x - p.y - p.z) + vals[1] * p.x + vals[2] * p.y + vals[3] * p.z;
        let x0 = Vec3::new(0.2, 0.3, 0.1);
        let h = 1e-6;
        for d in 0..3 {
            let mut e = Vec3::zeros();
            e[d] = h;
            let fd = (f(x0 + e) - f(x0 - e)) / (2.0 * h);
            assert!((fd - g[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn weighted_surface_mass_matches_constant_weight() {
        let mesh = generate_unit_ball(0);
        let ones = vec![2.0; mesh.n_surface_vertices()];
        let a = surface_mass_p1_weighted(&mesh, Region::Membrane, &ones).unwrap();
        let b = surface_mass(&mesh, Region::Membrane, None).unwrap();
        for i in 0..mesh.n_surface_vertices() {
            let (c, v) = a.row(i);
            for (&j, &x) in c.iter().zip(v) {
                assert_relative_eq!(x, 2.0 * b.get(i, j), max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn linear_combination_and_elimination() {
        let mesh = generate_unit_ball(0);
        let m = bulk_mass(&mesh);
        let k = bulk_stiffness(&mesh, &vec![1.0; mesh.n_tets()]);
        let a = SparseMatrix::linear_combination(&[(2.0, &m), (0.5, &k)]);
        assert_relative_eq!(a.get(3, 3), 2.0 * m.get(3, 3) + 0.5 * k.get(3, 3), max_relative = 1e-14);
        let mut fixed = vec![false; a.nrows()];
        fixed[3] = true;
        let e = a.eliminate(&fixed);
        assert_eq!(e.get(3, 3), 1.0);
        let (cols, _) = e.row(3);
        assert_eq!(cols, &[3]);
        assert!(e.is_exactly_symmetric());
    }

    #[test]
    fn assembly_is_invariant_under_vertex_permutation() {
        let mesh = generate_unit_ball(0);
        let n = mesh.n_vertices();
        let mult = (2..n).find(|m| gcd(*m, n) == 1 && *m > 5).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i * mult + 3) % n).collect();
        let pm = mesh.permuted(&perm).unwrap();
        let a = bulk_stiffness(&mesh, &vec![1.0; mesh.n_tets()]);
        let b = bulk_stiffness(&pm, &vec![1.0; pm.n_tets()]);
        for i in 0..n {
            let (c, v) = a.row(i);
            for (&j, &x) in c.iter().zip(v) {
                assert_relative_eq!(x, b.get(perm[i], perm[j]), epsilon = 1e-13);
            }
        }
        assert_relative_eq!(mesh.volume(), pm.volume(), max_relative = 1e-14);
    }
}
