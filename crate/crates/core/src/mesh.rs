//! Tetrahedral bulk meshes with an extracted, outward-oriented boundary
//! triangulation and named boundary regions.
//!
//! A [`Mesh`] is immutable once built apart from adding region tags. The
//! boundary is always recomputed from the tetrahedra; surface elements read
//! from a file only name regions and are checked against the derived faces.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix2, Vector3};

pub type Vec3 = Vector3<f64>;

/// Region tag for the flat substrate contact set.
pub const BOTTOM_TAG: &str = "Γ0";
/// Region tag for the (interior) nucleus boundary.
pub const NUCLEUS_TAG: &str = "nucleus";

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unsupported element type {kind} ({name})")]
    UnsupportedElement {
        line: usize,
        kind: u32,
        name: &'static str,
    },
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("unknown region tag `{0}`")]
    UnknownRegion(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One face of the boundary triangulation, oriented so that `normal` points
/// out of the owning tetrahedron.
#[derive(Clone, Debug)]
pub struct BoundaryTri {
    pub vertices: [usize; 3],
    pub tet: usize,
    pub normal: Vec3,
    pub area: f64,
}

/// Boundary triangles (indices into [`Mesh::boundary`]) and the bulk
/// vertices they touch, both sorted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionTag {
    pub tris: Vec<usize>,
    pub vertices: Vec<usize>,
}

/// Volume and barycentric-coordinate gradients of one tetrahedron.
#[derive(Clone, Debug)]
pub struct TetGeometry {
    pub volume: f64,
    pub grads: [Vec3; 4],
}

/// Selects a set of boundary triangles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region<'a> {
    /// The cell membrane: every boundary triangle not tagged as nucleus.
    Membrane,
    /// A named region.
    Tag(&'a str),
    /// The membrane minus a named region (e.g. Γ∖Γ0).
    MembraneExcept(&'a str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshGeometry {
    /// |Y| in μm³.
    pub volume: f64,
    /// |Γ| (membrane area) in μm².
    pub surface_area: f64,
    /// |Γ0| in μm², zero when no bottom tag exists.
    pub bottom_area: f64,
    /// n_r = |Y| / |Γ| in μm.
    pub n_r: f64,
    /// Maximum element diameter.
    pub h: f64,
}

#[derive(Clone, Debug)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    tet_geom: Vec<TetGeometry>,
    boundary: Vec<BoundaryTri>,
    regions: BTreeMap<String, RegionTag>,
    membrane: Vec<usize>,
    membrane_pos: Vec<Option<usize>>,
    surface_to_bulk: Vec<usize>,
    bulk_to_surface: Vec<Option<usize>>,
    surface_tris: Vec<[usize; 3]>,
}

fn face_key(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

fn signed_volume6(p: &[Vec3; 4]) -> f64 {
    (p[1] - p[0]).dot(&(p[2] - p[0]).cross(&(p[3] - p[0])))
}

fn tet_geometry(p: &[Vec3; 4]) -> TetGeometry {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let e3 = p[3] - p[0];
    let det = e1.dot(&e2.cross(&e3));
    // rows of the inverse Jacobian are the gradients of λ1..λ3
    let g1 = e2.cross(&e3) / det;
    let g2 = e3.cross(&e1) / det;
    let g3 = e1.cross(&e2) / det;
    let g0 = -(g1 + g2 + g3);
    TetGeometry {
        volume: det / 6.0,
        grads: [g0, g1, g2, g3],
    }
}

impl Mesh {
    /// Builds a mesh from raw tetrahedra. Tetrahedra with negative orientation
    /// are flipped; `tagged_tris` name boundary regions and must coincide with
    /// faces derived from the tetrahedra.
    pub fn from_tets(
        vertices: Vec<Vec3>,
        tets: Vec<[usize; 4]>,
        tagged_tris: Vec<(String, [usize; 3])>,
    ) -> Result<Self, MeshError> {
        if tets.is_empty() {
            return Err(MeshError::Invalid("mesh has no tetrahedra".into()));
        }
        let nv = vertices.len();
        for (e, t) in tets.iter().enumerate() {
            if let Some(&v) = t.iter().find(|&&v| v >= nv) {
                return Err(MeshError::Invalid(format!(
                    "tetrahedron {e} references vertex {v}, only {nv} exist"
                )));
            }
            if (0..4).any(|a| (a + 1..4).any(|b| t[a] == t[b])) {
                return Err(MeshError::Invalid(format!(
                    "tetrahedron {e} repeats a vertex"
                )));
            }
        }
        for (i, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(MeshError::Invalid(format!("vertex {i} is not finite")));
            }
        }

        // drop vertices not used by any tetrahedron
        let mut used = vec![false; nv];
        for t in &tets {
            for &v in t {
                used[v] = true;
            }
        }
        let mut remap = vec![usize::MAX; nv];
        let mut compact = Vec::with_capacity(nv);
        for (i, v) in vertices.into_iter().enumerate() {
            if used[i] {
                remap[i] = compact.len();
                compact.push(v);
            }
        }
        let vertices = compact;
        let mut tets: Vec<[usize; 4]> = tets
            .into_iter()
            .map(|t| [remap[t[0]], remap[t[1]], remap[t[2]], remap[t[3]]])
            .collect();

        let (lo, hi) = bounding_box(&vertices);
        let scale = (hi - lo).norm();
        let vol_floor = 1e-14 * scale.powi(3);
        for (e, t) in tets.iter_mut().enumerate() {
            let p = t.map(|v| vertices[v]);
            let v6 = signed_volume6(&p);
            if v6.abs() <= vol_floor {
                return Err(MeshError::Invalid(format!(
                    "tetrahedron {e} is degenerate (volume {:.3e})",
                    v6 / 6.0
                )));
            }
            if v6 < 0.0 {
                t.swap(2, 3);
            }
        }
        let tet_geom: Vec<TetGeometry> = tets
            .iter()
            .map(|t| tet_geometry(&t.map(|v| vertices[v])))
            .collect();
        if let Some(e) = tet_geom.iter().position(|g| g.volume <= 0.0) {
            return Err(MeshError::Invalid(format!(
                "tetrahedron {e} is inverted after orientation fix-up"
            )));
        }

        let mut face_count: HashMap<[usize; 3], u32> = HashMap::with_capacity(tets.len() * 3);
        for t in &tets {
            for f in TET_FACES {
                *face_count.entry(face_key(f.map(|i| t[i]))).or_insert(0) += 1;
            }
        }
        if let Some((k, c)) = face_count.iter().find(|(_, &c)| c > 2) {
            return Err(MeshError::Invalid(format!(
                "face {k:?} is shared by {c} tetrahedra"
            )));
        }

        let mut boundary = Vec::new();
        for (e, t) in tets.iter().enumerate() {
            let centroid = t.iter().map(|&v| vertices[v]).sum::<Vec3>() / 4.0;
            for f in TET_FACES {
                let mut tri = f.map(|i| t[i]);
                if face_count[&face_key(tri)] != 1 {
                    continue;
                }
                let [a, b, c] = tri.map(|v| vertices[v]);
                let mut n = (b - a).cross(&(c - a));
                let fc = (a + b + c) / 3.0;
                if n.dot(&(fc - centroid)) < 0.0 {
                    tri.swap(1, 2);
                    n = -n;
                }
                let len = n.norm();
                boundary.push(BoundaryTri {
                    vertices: tri,
                    tet: e,
                    normal: n / len,
                    area: 0.5 * len,
                });
            }
        }

        let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &boundary {
            for k in 0..3 {
                let (a, b) = (tri.vertices[k], tri.vertices[(k + 1) % 3]);
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        if let Some((e, c)) = edge_count.iter().find(|(_, &c)| c != 2) {
            return Err(MeshError::Invalid(format!(
                "boundary is not watertight: edge {e:?} belongs to {c} boundary triangles"
            )));
        }

        let index: HashMap<[usize; 3], usize> = boundary
            .iter()
            .enumerate()
            .map(|(i, t)| (face_key(t.vertices), i))
            .collect();
        let mut tagged: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (name, tri) in tagged_tris {
            if tri.iter().any(|&v| v >= nv || remap[v] == usize::MAX) {
                return Err(MeshError::Invalid(format!(
                    "surface element in region `{name}` references a vertex outside the volume mesh"
                )));
            }
            let key = face_key(tri.map(|v| remap[v]));
            let Some(&b) = index.get(&key) else {
                return Err(MeshError::Invalid(format!(
                    "surface element {tri:?} in region `{name}` is not a boundary face of the volume mesh"
                )));
            };
            tagged.entry(name).or_default().push(b);
        }

        let mut mesh = Mesh {
            vertices,
            tets,
            tet_geom,
            boundary,
            regions: BTreeMap::new(),
            membrane: Vec::new(),
            membrane_pos: Vec::new(),
            surface_to_bulk: Vec::new(),
            bulk_to_surface: Vec::new(),
            surface_tris: Vec::new(),
        };
        for (name, tris) in tagged {
            mesh.set_region(&name, tris);
        }
        mesh.rebuild_membrane();
        Ok(mesh)
    }

    fn rebuild_membrane(&mut self) {
        let nucleus = self.regions.get(NUCLEUS_TAG).map(|r| r.tris.clone());
        let mut excluded = vec![false; self.boundary.len()];
        if let Some(tris) = nucleus {
            for t in tris {
                excluded[t] = true;
            }
        }
        self.membrane = (0..self.boundary.len()).filter(|&t| !excluded[t]).collect();
        self.membrane_pos = vec![None; self.boundary.len()];
        for (k, &t) in self.membrane.iter().enumerate() {
            self.membrane_pos[t] = Some(k);
        }
        self.bulk_to_surface = vec![None; self.vertices.len()];
        self.surface_to_bulk.clear();
        for &t in &self.membrane {
            for &v in &self.boundary[t].vertices {
                if self.bulk_to_surface[v].is_none() {
                    self.bulk_to_surface[v] = Some(self.surface_to_bulk.len());
                    self.surface_to_bulk.push(v);
                }
            }
        }
        self.surface_tris = self
            .membrane
            .iter()
            .map(|&t| {
                self.boundary[t]
                    .vertices
                    .map(|v| self.bulk_to_surface[v].expect("membrane vertex"))
            })
            .collect();
    }

    fn set_region(&mut self, name: &str, mut tris: Vec<usize>) {
        tris.sort_unstable();
        tris.dedup();
        let mut vertices: Vec<usize> = tris
            .iter()
            .flat_map(|&t| self.boundary[t].vertices)
            .collect();
        vertices.sort_unstable();
        vertices.dedup();
        self.regions
            .insert(name.to_string(), RegionTag { tris, vertices });
        if name == NUCLEUS_TAG {
            self.rebuild_membrane();
        }
    }

    /// Adds (or replaces) a named region from boundary-triangle indices.
    pub fn tag_region(&mut self, name: &str, tris: Vec<usize>) -> Result<&RegionTag, MeshError> {
        if let Some(&t) = tris.iter().find(|&&t| t >= self.boundary.len()) {
            return Err(MeshError::Invalid(format!(
                "boundary triangle {t} out of range"
            )));
        }
        self.set_region(name, tris);
        Ok(&self.regions[name])
    }

    /// Tags as [`BOTTOM_TAG`] every membrane triangle whose vertices all
    /// satisfy |x₃| ≤ `tol`.
    pub fn tag_bottom(&mut self, tol: f64) -> &RegionTag {
        let tris: Vec<usize> = self
            .membrane
            .iter()
            .copied()
            .filter(|&t| {
                self.boundary[t]
                    .vertices
                    .iter()
                    .all(|&v| self.vertices[v].z.abs() <= tol)
            })
            .collect();
        self.set_region(BOTTOM_TAG, tris);
        &self.regions[BOTTOM_TAG]
    }

    /// Default bottom tolerance: 1e-6 · h.
    pub fn default_bottom_tol(&self) -> f64 {
        1e-6 * self.max_diameter()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn tet_geometry(&self) -> &[TetGeometry] {
        &self.tet_geom
    }

    pub fn boundary(&self) -> &[BoundaryTri] {
        &self.boundary
    }

    pub fn regions(&self) -> &BTreeMap<String, RegionTag> {
        &self.regions
    }

    pub fn region_tag(&self, name: &str) -> Result<&RegionTag, MeshError> {
        self.regions
            .get(name)
            .ok_or_else(|| MeshError::UnknownRegion(name.to_string()))
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    /// Boundary-triangle indices forming the membrane.
    pub fn membrane(&self) -> &[usize] {
        &self.membrane
    }

    /// Position of a boundary triangle within the membrane list.
    pub fn membrane_position(&self, tri: usize) -> Option<usize> {
        self.membrane_pos[tri]
    }

    pub fn n_surface_vertices(&self) -> usize {
        self.surface_to_bulk.len()
    }

    pub fn surface_to_bulk(&self) -> &[usize] {
        &self.surface_to_bulk
    }

    pub fn bulk_to_surface(&self, v: usize) -> Option<usize> {
        self.bulk_to_surface[v]
    }

    /// Membrane triangles in surface-vertex numbering, parallel to [`Mesh::membrane`].
    pub fn surface_tris(&self) -> &[[usize; 3]] {
        &self.surface_tris
    }

    /// Resolves a region selector to sorted boundary-triangle indices.
    pub fn region_tris(&self, region: Region<'_>) -> Result<Vec<usize>, MeshError> {
        match region {
            Region::Membrane => Ok(self.membrane.clone()),
            Region::Tag(name) => Ok(self.region_tag(name)?.tris.clone()),
            Region::MembraneExcept(name) => {
                let tag = self.region_tag(name)?;
                let mut drop = vec![false; self.boundary.len()];
                for &t in &tag.tris {
                    drop[t] = true;
                }
                Ok(self.membrane.iter().copied().filter(|&t| !drop[t]).collect())
            }
        }
    }

    pub fn region_area(&self, region: Region<'_>) -> Result<f64, MeshError> {
        Ok(self
            .region_tris(region)?
            .iter()
            .map(|&t| self.boundary[t].area)
            .sum())
    }

    pub fn volume(&self) -> f64 {
        self.tet_geom.iter().map(|g| g.volume).sum()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = Vec3::zeros();
        let mut vol = 0.0;
        for (t, g) in self.tets.iter().zip(&self.tet_geom) {
            let m = t.iter().map(|&v| self.vertices[v]).sum::<Vec3>() / 4.0;
            c += g.volume * m;
            vol += g.volume;
        }
        c / vol
    }

    /// Longest edge over all tetrahedra (boundary triangles are faces of
    /// tetrahedra, so they never exceed it).
    pub fn max_diameter(&self) -> f64 {
        self.tets
            .iter()
            .map(|t| {
                let mut d: f64 = 0.0;
                for a in 0..4 {
                    for b in a + 1..4 {
                        d = d.max((self.vertices[t[a]] - self.vertices[t[b]]).norm());
                    }
                }
                d
            })
            .fold(0.0, f64::max)
    }

    pub fn geometry(&self) -> MeshGeometry {
        let volume = self.volume();
        let surface_area: f64 = self.membrane.iter().map(|&t| self.boundary[t].area).sum();
        let bottom_area = self
            .regions
            .get(BOTTOM_TAG)
            .map(|r| r.tris.iter().map(|&t| self.boundary[t].area).sum())
            .unwrap_or(0.0);
        MeshGeometry {
            volume,
            surface_area,
            bottom_area,
            n_r: volume / surface_area,
            h: self.max_diameter(),
        }
    }

    /// Tangential gradients of the three barycentric functions of a boundary
    /// triangle.
    pub fn tri_gradients(&self, tri: usize) -> [Vec3; 3] {
        let [a, b, c] = self.boundary[tri].vertices.map(|v| self.vertices[v]);
        surface_gradients(&a, &b, &c)
    }

    /// Applies a vertex permutation: new vertex `perm[i]` is old vertex `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Mesh, MeshError> {
        let n = self.vertices.len();
        if perm.len() != n {
            return Err(MeshError::Invalid("permutation length mismatch".into()));
        }
        let mut vertices = vec![Vec3::zeros(); n];
        for (i, &p) in perm.iter().enumerate() {
            vertices[p] = self.vertices[i];
        }
        let tets = self.tets.iter().map(|t| t.map(|v| perm[v])).collect();
        let tagged = self
            .regions
            .iter()
            .flat_map(|(name, r)| {
                r.tris
                    .iter()
                    .map(move |&t| (name.clone(), self.boundary[t].vertices.map(|v| perm[v])))
            })
            .collect();
        Mesh::from_tets(vertices, tets, tagged)
    }
}

/// Tangential gradients of barycentric coordinates on the triangle (a, b, c).
pub fn surface_gradients(a: &Vec3, b: &Vec3, c: &Vec3) -> [Vec3; 3] {
    let e1 = b - a;
    let e2 = c - a;
    let g = Matrix2::new(e1.dot(&e1), e1.dot(&e2), e1.dot(&e2), e2.dot(&e2));
    let gi = g.try_inverse().unwrap_or_else(Matrix2::zeros);
    let g1 = e1 * gi[(0, 0)] + e2 * gi[(1, 0)];
    let g2 = e1 * gi[(0, 1)] + e2 * gi[(1, 1)];
    [-(g1 + g2), g1, g2]
}

fn bounding_box(v: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in v {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

// ---------------------------------------------------------------------------
// generators

/// Structured Freudenthal (Kuhn) tetrahedralisation of a box grid whose nodes
/// are sent through `map`. Every cube is split into six tetrahedra along its
/// main diagonal, which keeps neighbouring cubes conforming.
fn mapped_box<F: Fn(Vec3) -> Vec3>(
    counts: [usize; 3],
    lo: Vec3,
    hi: Vec3,
    map: F,
) -> (Vec<Vec3>, Vec<[usize; 4]>) {
    let [nx, ny, nz] = counts;
    let id = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                let s = Vec3::new(
                    i as f64 / nx as f64,
                    j as f64 / ny as f64,
                    k as f64 / nz as f64,
                );
                let p = lo + (hi - lo).component_mul(&s);
                vertices.push(map(p));
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let corner = |bits: usize| id(i + (bits & 1), j + ((bits >> 1) & 1), k + (bits >> 2));
                for p in PERMS {
                    let b1 = 1 << p[0];
                    let b2 = b1 | (1 << p[1]);
                    tets.push([corner(0), corner(b1), corner(b2), corner(7)]);
                }
            }
        }
    }
    (vertices, tets)
}

/// Sends the cube [-1,1]³ onto the unit ball by radial rescaling with
/// ‖p‖∞ / ‖p‖₂; cube faces land on the sphere and coordinate planes through
/// the origin are preserved.
fn cube_to_ball(p: Vec3) -> Vec3 {
    let r2 = p.norm();
    if r2 == 0.0 {
        return p;
    }
    p * (p.amax() / r2)
}

/// Cells per cube edge for each unit-ball refinement level.
fn ball_cells(level: usize) -> usize {
    match level {
        0 => 6,
        1 => 7,
        2 => 14,
        l => 28 << (l - 3),
    }
}

/// Tetrahedral mesh of the unit ball centred at the origin.
pub fn generate_unit_ball(refinement_level: usize) -> Mesh {
    let n = ball_cells(refinement_level);
    let (v, t) = mapped_box(
        [n, n, n],
        Vec3::repeat(-1.0),
        Vec3::repeat(1.0),
        cube_to_ball,
    );
    Mesh::from_tets(v, t, Vec::new()).expect("generated ball mesh is valid")
}

/// Semi-axes of the half-spheroid whose volume and total surface (cap plus
/// flat base) match the axisymmetric cell: |Y| = 1193 μm³, |Γ| = 1020 μm².
pub const DOME_BASE_RADIUS: f64 = 12.1723;
pub const DOME_HEIGHT: f64 = 3.8445;
/// Default refinement: 1183 vertices, mesh size about 3.5 μm.
pub const DOME_DEFAULT_REFINEMENT: usize = 2;

/// Axisymmetric dome (half-spheroid) with its flat base in the plane x₃ = 0.
/// The base is tagged as [`BOTTOM_TAG`].
pub fn generate_cell_dome(base_radius: f64, height: f64, refinement: usize) -> Result<Mesh, MeshError> {
    if !(base_radius.is_finite() && height.is_finite() && base_radius > 0.0 && height > 0.0) {
        return Err(MeshError::InvalidGeometry(format!(
            "dome needs positive finite base radius and height, got {base_radius} and {height}"
        )));
    }
    let n = 4 * (refinement + 1);
    let nz = (n / 2).max(1);
    let (v, t) = mapped_box(
        [n, n, nz],
        Vec3::new(-1.0, -1.0, 0.0),
        Vec3::new(1.0, 1.0, 1.0),
        |p| {
            let q = cube_to_ball(p);
            Vec3::new(q.x * base_radius, q.y * base_radius, q.z * height)
        },
    );
    let mut mesh = Mesh::from_tets(v, t, Vec::new())?;
    let tol = mesh.default_bottom_tol();
    mesh.tag_bottom(tol);
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// MSH 2.2 ASCII

fn element_name(kind: u32) -> &'static str {
    match kind {
        3 => "quadrangle",
        5 => "hexahedron",
        6 => "prism (pentahedron)",
        7 => "pyramid",
        8 => "second-order line",
        9 => "second-order triangle",
        11 => "second-order tetrahedron",
        _ => "unknown",
    }
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_line(&mut self) -> Result<Option<String>, MeshError> {
        match self.inner.next() {
            None => Ok(None),
            Some(l) => {
                self.line += 1;
                Ok(Some(l?.trim().to_string()))
            }
        }
    }

    fn expect_line(&mut self, what: &str) -> Result<String, MeshError> {
        self.next_line()?.ok_or_else(|| MeshError::Parse {
            line: self.line,
            msg: format!("unexpected end of file, expected {what}"),
        })
    }

    fn err(&self, msg: impl Into<String>) -> MeshError {
        MeshError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, lines: &Lines<impl BufRead>, what: &str) -> Result<T, MeshError> {
    let tok = tok.ok_or_else(|| lines.err(format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| lines.err(format!("cannot parse {what} from `{tok}`")))
}

/// Reads a Gmsh MSH 2.2 ASCII file.
pub fn load_msh(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
    let file = std::fs::File::open(path)?;
    read_msh(BufReader::new(file))
}

/// Parses MSH 2.2 ASCII from any reader. Only element types 2 (triangle) and
/// 4 (tetrahedron) contribute; points and lines are skipped; other volume or
/// higher-order elements are rejected. Triangles carry their physical group as
/// a region name.
pub fn read_msh<R: BufRead>(reader: R) -> Result<Mesh, MeshError> {
    let mut lines = Lines {
        inner: reader.lines(),
        line: 0,
    };
    let mut names: HashMap<i64, String> = HashMap::new();
    let mut node_index: HashMap<i64, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut tets = Vec::new();
    let mut tris: Vec<(String, [usize; 3])> = Vec::new();
    let mut raw_tris: Vec<(i64, [i64; 3], usize)> = Vec::new();
    let mut seen_format = false;

    while let Some(l) = lines.next_line()? {
        match l.as_str() {
            "" => continue,
            "$MeshFormat" => {
                let fmt = lines.expect_line("format line")?;
                let mut it = fmt.split_whitespace();
                let version: String = parse_num(it.next(), &lines, "version")?;
                let file_type: u32 = parse_num(it.next(), &lines, "file type")?;
                if !version.starts_with("2.") {
                    return Err(lines.err(format!("MSH version {version} not supported, need 2.2")));
                }
                if file_type != 0 {
                    return Err(lines.err("binary MSH files are not supported"));
                }
                if lines.expect_line("$EndMeshFormat")? != "$EndMeshFormat" {
                    return Err(lines.err("expected $EndMeshFormat"));
                }
                seen_format = true;
            }
            "$PhysicalNames" => {
                let n: usize = parse_num(Some(lines.expect_line("count")?.as_str()), &lines, "name count")?;
                for _ in 0..n {
                    let row = lines.expect_line("physical name")?;
                    let mut it = row.splitn(3, char::is_whitespace);
                    let _dim: u32 = parse_num(it.next(), &lines, "dimension")?;
                    let tag: i64 = parse_num(it.next(), &lines, "physical tag")?;
                    let name = it
                        .next()
                        .map(|s| s.trim().trim_matches('"').to_string())
                        .ok_or_else(|| lines.err("missing physical name"))?;
                    let name = if name == "Gamma0" { BOTTOM_TAG.to_string() } else { name };
                    names.insert(tag, name);
                }
                if lines.expect_line("$EndPhysicalNames")? != "$EndPhysicalNames" {
                    return Err(lines.err("expected $EndPhysicalNames"));
                }
            }
            "$Nodes" => {
                if !seen_format {
                    return Err(lines.err("$Nodes before $MeshFormat"));
                }
                let n: usize = parse_num(Some(lines.expect_line("count")?.as_str()), &lines, "node count")?;
                vertices.reserve(n);
                for _ in 0..n {
                    let row = lines.expect_line("node")?;
                    let mut it = row.split_whitespace();
                    let id: i64 = parse_num(it.next(), &lines, "node id")?;
                    let x: f64 = parse_num(it.next(), &lines, "x")?;
                    let y: f64 = parse_num(it.next(), &lines, "y")?;
                    let z: f64 = parse_num(it.next(), &lines, "z")?;
                    if node_index.insert(id, vertices.len()).is_some() {
                        return Err(lines.err(format!("duplicate node id {id}")));
                    }
                    vertices.push(Vec3::new(x, y, z));
                }
                if lines.expect_line("$EndNodes")? != "$EndNodes" {
                    return Err(lines.err("expected $EndNodes"));
                }
            }
            "$Elements" => {
                let n: usize = parse_num(Some(lines.expect_line("count")?.as_str()), &lines, "element count")?;
                for _ in 0..n {
                    let row = lines.expect_line("element")?;
                    let toks: Vec<&str> = row.split_whitespace().collect();
                    let mut it = toks.iter().copied();
                    let _id: i64 = parse_num(it.next(), &lines, "element id")?;
                    let kind: u32 = parse_num(it.next(), &lines, "element type")?;
                    let ntags: usize = parse_num(it.next(), &lines, "tag count")?;
                    let mut tags = Vec::with_capacity(ntags);
                    for _ in 0..ntags {
                        tags.push(parse_num::<i64>(it.next(), &lines, "tag")?);
                    }
                    let nodes: Vec<i64> = it
                        .map(|t| t.parse().map_err(|_| lines.err(format!("bad node reference `{t}`"))))
                        .collect::<Result<_, _>>()?;
                    let expect = match kind {
                        15 => 1,
                        1 => 2,
                        2 => 3,
                        4 => 4,
                        _ => {
                            return Err(MeshError::UnsupportedElement {
                                line: lines.line,
                                kind,
                                name: element_name(kind),
                            })
                        }
                    };
                    if nodes.len() != expect {
                        return Err(lines.err(format!(
                            "element type {kind} needs {expect} nodes, found {}",
                            nodes.len()
                        )));
                    }
                    match kind {
                        2 => {
                            let phys = tags.first().copied().unwrap_or(0);
                            raw_tris.push((phys, [nodes[0], nodes[1], nodes[2]], lines.line));
                        }
                        4 => {
                            let mut t = [0usize; 4];
                            for (k, id) in nodes.iter().enumerate() {
                                t[k] = *node_index
                                    .get(id)
                                    .ok_or_else(|| lines.err(format!("unknown node id {id}")))?;
                            }
                            tets.push(t);
                        }
                        _ => {}
                    }
                }
                if lines.expect_line("$EndElements")? != "$EndElements" {
                    return Err(lines.err("expected $EndElements"));
                }
            }
            s if s.starts_with('$') => {
                // skip unknown sections
                let end = format!("$End{}", &s[1..]);
                loop {
                    if lines.expect_line(&end)? == end {
                        break;
                    }
                }
            }
            other => return Err(lines.err(format!("unexpected content `{other}`"))),
        }
    }
    if !seen_format {
        return Err(lines.err("missing $MeshFormat section"));
    }
    for (phys, nodes, line) in raw_tris {
        let mut t = [0usize; 3];
        for (k, id) in nodes.iter().enumerate() {
            t[k] = *node_index.get(id).ok_or(MeshError::Parse {
                line,
                msg: format!("unknown node id {id}"),
            })?;
        }
        let name = names.get(&phys).cloned().unwrap_or_else(|| phys.to_string());
        tris.push((name, t));
    }
    Mesh::from_tets(vertices, tets, tris)
}

/// Writes MSH 2.2 ASCII: all vertices, every tetrahedron (physical group 1)
/// and one triangle per region membership.
pub fn write_msh(mesh: &Mesh, out: &mut impl Write) -> std::io::Result<()> {
    let mut s = String::new();
    s.push_str("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n");
    let region_names: Vec<&String> = mesh.regions.keys().collect();
    s.push_str("$PhysicalNames\n");
    let _ = writeln!(s, "{}", region_names.len() + 1);
    let _ = writeln!(s, "3 1 \"cytoplasm\"");
    for (k, name) in region_names.iter().enumerate() {
        let _ = writeln!(s, "2 {} \"{}\"", k + 2, name);
    }
    s.push_str("$EndPhysicalNames\n$Nodes\n");
    let _ = writeln!(s, "{}", mesh.vertices.len());
    for (i, p) in mesh.vertices.iter().enumerate() {
        let _ = writeln!(s, "{} {:.17e} {:.17e} {:.17e}", i + 1, p.x, p.y, p.z);
    }
    s.push_str("$EndNodes\n$Elements\n");
    let n_tris: usize = mesh.regions.values().map(|r| r.tris.len()).sum();
    let _ = writeln!(s, "{}", n_tris + mesh.tets.len());
    let mut id = 1;
    for (k, r) in mesh.regions.values().enumerate() {
        for &t in &r.tris {
            let v = mesh.boundary[t].vertices;
            let _ = writeln!(s, "{id} 2 2 {} {} {} {} {}", k + 2, k + 2, v[0] + 1, v[1] + 1, v[2] + 1);
            id += 1;
        }
    }
    for t in &mesh.tets {
        let _ = writeln!(s, "{id} 4 2 1 1 {} {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1, t[3] + 1);
        id += 1;
    }
    s.push_str("$EndElements\n");
    out.write_all(s.as_bytes())
}
