//! Triangle meshes with a facet skeleton, the conductive fracture mesh
//! extracted from them, fracture immersion by level-set cutting, and
//! uniform red refinement.

use std::collections::HashMap;

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::geometry::{
    cross, point_segment_distance, BcKind, DomainBoundary, Fracture, IntersectionSets, Point, PointClass,
};

/// Piecewise constant permeability tensor of a cell.
pub type Tensor = Matrix2<f64>;

type Edge = [usize; 2];

#[inline]
fn edge_key(a: usize, b: usize) -> Edge {
    if a < b {
        [a, b]
    } else {
        [b, a]
    }
}

fn signed_area(a: &Point, b: &Point, c: &Point) -> f64 {
    0.5 * cross(&(b - a), &(c - a))
}

/// Conforming triangle mesh.
///
/// Local facet `i` of a cell is the edge opposite its local vertex `i`.
/// Facets are numbered in order of first appearance while scanning cells.
#[derive(Clone, Debug)]
pub struct SimplicialMesh {
    vertices: Vec<Point>,
    cells: Vec<[usize; 3]>,
    facets: Vec<Edge>,
    cell_facets: Vec<[usize; 3]>,
    facet_cells: Vec<(usize, Option<usize>)>,
    boundary: Vec<Option<BcKind>>,
    fracture: Vec<Option<usize>>,
    permeability: Vec<Tensor>,
}

/// Collects vertices, cells and edge tags, then builds the facet skeleton.
#[derive(Clone, Debug, Default)]
pub struct MeshBuilder {
    pub vertices: Vec<Point>,
    pub cells: Vec<[usize; 3]>,
    pub permeability: Vec<Tensor>,
    pub boundary_tags: HashMap<Edge, BcKind>,
    pub fracture_tags: HashMap<Edge, usize>,
}

impl MeshBuilder {
    pub fn new(vertices: Vec<Point>, cells: Vec<[usize; 3]>) -> Self {
        let permeability = vec![Tensor::identity(); cells.len()];
        Self { vertices, cells, permeability, ..Default::default() }
    }

    pub fn tag_boundary(&mut self, a: usize, b: usize, kind: BcKind) {
        self.boundary_tags.insert(edge_key(a, b), kind);
    }

    pub fn tag_fracture(&mut self, a: usize, b: usize, fracture: usize) {
        self.fracture_tags.insert(edge_key(a, b), fracture);
    }

    /// Untagged boundary facets default to Neumann.
    pub fn build(self) -> Result<SimplicialMesh> {
        let MeshBuilder { vertices, mut cells, permeability, boundary_tags, fracture_tags } = self;
        if permeability.len() != cells.len() {
            return Err(Error::InvalidMesh(format!(
                "{} permeability tensors for {} cells",
                permeability.len(),
                cells.len()
            )));
        }
        for (c, cell) in cells.iter_mut().enumerate() {
            if cell.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidMesh(format!("cell {c} references a missing vertex")));
            }
            let [a, b, d] = cell.map(|v| vertices[v]);
            let area = signed_area(&a, &b, &d);
            if !(area.abs() > 0.0) || !area.is_finite() {
                return Err(Error::InvalidMesh(format!("cell {c} has zero area")));
            }
            if area < 0.0 {
                cell.swap(1, 2);
            }
        }
        let mut index: HashMap<Edge, usize> = HashMap::with_capacity(cells.len() * 2);
        let mut facets = Vec::new();
        let mut facet_cells: Vec<(usize, Option<usize>)> = Vec::new();
        let mut cell_facets = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let mut local = [0; 3];
            for (i, slot) in local.iter_mut().enumerate() {
                let key = edge_key(cell[(i + 1) % 3], cell[(i + 2) % 3]);
                let f = *index.entry(key).or_insert_with(|| {
                    facets.push(key);
                    facet_cells.push((c, None));
                    facets.len() - 1
                });
                if facet_cells[f].0 != c {
                    if facet_cells[f].1.is_some() {
                        return Err(Error::InvalidMesh(format!(
                            "facet ({}, {}) is shared by more than two cells",
                            key[0], key[1]
                        )));
                    }
                    facet_cells[f].1 = Some(c);
                }
                *slot = f;
            }
            cell_facets.push(local);
        }
        let mut boundary = vec![None; facets.len()];
        for (f, pair) in facet_cells.iter().enumerate() {
            if pair.1.is_none() {
                boundary[f] = Some(*boundary_tags.get(&facets[f]).unwrap_or(&BcKind::Neumann));
            }
        }
        for key in boundary_tags.keys() {
            if let Some(&f) = index.get(key) {
                if facet_cells[f].1.is_some() {
                    return Err(Error::InvalidMesh(format!(
                        "interior facet ({}, {}) carries a boundary tag",
                        key[0], key[1]
                    )));
                }
            }
        }
        let mut fracture = vec![None; facets.len()];
        for (key, &id) in &fracture_tags {
            match index.get(key) {
                Some(&f) => fracture[f] = Some(id),
                None => {
                    return Err(Error::InvalidMesh(format!(
                        "fracture tag on ({}, {}) which is not a facet",
                        key[0], key[1]
                    )))
                }
            }
        }
        Ok(SimplicialMesh { vertices, cells, facets, cell_facets, facet_cells, boundary, fracture, permeability })
    }
}

impl SimplicialMesh {
    pub fn new(vertices: Vec<Point>, cells: Vec<[usize; 3]>) -> Result<Self> {
        MeshBuilder::new(vertices, cells).build()
    }

    /// Tensor-product grid over the given (strictly increasing) coordinates, each
    /// rectangle split along the diagonal from its lower-left corner.
    pub fn tensor_grid(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let columns = xs.len();
        let mut vertices = Vec::with_capacity(xs.len() * ys.len());
        for &y in ys {
            for &x in xs {
                vertices.push(Point::new(x, y));
            }
        }
        Self::new(vertices, grid_cells(xs.len() - 1, ys.len() - 1, columns))
    }

    /// Uniform `nx × ny` grid of the rectangle `[x0, x1] × [y0, y1]`.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64, nx: usize, ny: usize) -> Result<Self> {
        let xs: Vec<f64> = (0..=nx).map(|i| x0 + (x1 - x0) * i as f64 / nx as f64).collect();
        let ys: Vec<f64> = (0..=ny).map(|j| y0 + (y1 - y0) * j as f64 / ny as f64).collect();
        Self::tensor_grid(&xs, &ys)
    }

    /// Column-mapped grid: vertical grid line `x` is divided into `ny` equal
    /// pieces between `bottom(x)` and `top(x)`.
    pub fn mapped_columns(
        xs: &[f64],
        ny: usize,
        bottom: impl Fn(f64) -> f64,
        top: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let mut vertices = Vec::with_capacity(xs.len() * (ny + 1));
        for j in 0..=ny {
            let s = j as f64 / ny as f64;
            for &x in xs {
                let (y0, y1) = (bottom(x), top(x));
                vertices.push(Point::new(x, y0 + s * (y1 - y0)));
            }
        }
        Self::new(vertices, grid_cells(xs.len() - 1, ny, xs.len()))
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> Point {
        self.vertices[v]
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn cell(&self, c: usize) -> [usize; 3] {
        self.cells[c]
    }

    pub fn cell_points(&self, c: usize) -> [Point; 3] {
        self.cells[c].map(|v| self.vertices[v])
    }

    pub fn facet(&self, f: usize) -> [usize; 2] {
        self.facets[f]
    }

    pub fn facets(&self) -> &[[usize; 2]] {
        &self.facets
    }

    pub fn cell_facets(&self, c: usize) -> [usize; 3] {
        self.cell_facets[c]
    }

    /// Incident cells; the first one has the lower index.
    pub fn facet_cells(&self, f: usize) -> (usize, Option<usize>) {
        self.facet_cells[f]
    }

    pub fn is_boundary(&self, f: usize) -> bool {
        self.facet_cells[f].1.is_none()
    }

    pub fn boundary_tag(&self, f: usize) -> Option<BcKind> {
        self.boundary[f]
    }

    pub fn fracture_tag(&self, f: usize) -> Option<usize> {
        self.fracture[f]
    }

    pub fn permeability(&self, c: usize) -> &Tensor {
        &self.permeability[c]
    }

    pub fn set_permeability(&mut self, c: usize, k: Tensor) {
        self.permeability[c] = k;
    }

    pub fn set_uniform_permeability(&mut self, k: Tensor) {
        self.permeability.iter_mut().for_each(|t| *t = k);
    }

    pub fn area(&self, c: usize) -> f64 {
        let [a, b, d] = self.cell_points(c);
        signed_area(&a, &b, &d)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_cells()).map(|c| self.area(c)).sum()
    }

    pub fn centroid(&self, c: usize) -> Point {
        let [a, b, d] = self.cell_points(c);
        Point::from((a.coords + b.coords + d.coords) / 3.0)
    }

    pub fn facet_length(&self, f: usize) -> f64 {
        let [a, b] = self.facets[f];
        (self.vertices[b] - self.vertices[a]).norm()
    }

    pub fn facet_midpoint(&self, f: usize) -> Point {
        let [a, b] = self.facets[f];
        nalgebra::center(&self.vertices[a], &self.vertices[b])
    }

    /// Local index (0..3) of facet `f` within cell `c`.
    pub fn local_facet(&self, c: usize, f: usize) -> Option<usize> {
        self.cell_facets[c].iter().position(|&g| g == f)
    }

    /// Unit outward normal of local facet `i` of cell `c`.
    pub fn outward_normal(&self, c: usize, i: usize) -> crate::geometry::Vector {
        let cell = self.cells[c];
        let a = self.vertices[cell[(i + 1) % 3]];
        let b = self.vertices[cell[(i + 2) % 3]];
        let t = (b - a).normalize();
        // counter-clockwise cells have the interior on the left of each edge
        crate::geometry::Vector::new(t.y, -t.x)
    }

    /// Global facet normal: outward from the lower-index incident cell.
    pub fn facet_normal(&self, f: usize) -> crate::geometry::Vector {
        let c = self.facet_cells[f].0;
        let i = self.local_facet(c, f).expect("facet incidence is consistent");
        self.outward_normal(c, i)
    }

    /// `(min, max)` corners of the bounding box.
    pub fn bounding_box(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.vertices {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Tags every boundary facet with the condition kind of the polygon edge
    /// containing its midpoint.
    pub fn tag_boundary_from(&mut self, boundary: &DomainBoundary, tol: f64) -> Result<()> {
        for f in 0..self.num_facets() {
            if !self.is_boundary(f) {
                continue;
            }
            let m = self.facet_midpoint(f);
            let edge = boundary
                .locate(&m, tol)?
                .ok_or_else(|| Error::InvalidMesh(format!("boundary facet {f} is not on the domain boundary")))?;
            self.boundary[f] = Some(boundary.condition(edge).kind);
        }
        Ok(())
    }

    /// Tags facets lying on `fracture` (within `tol`) with `id`.
    pub fn tag_fracture_facets(&mut self, id: usize, fracture: &Fracture, tol: f64) {
        for f in 0..self.num_facets() {
            let [a, b] = self.facets[f];
            if fracture.distance(&self.vertices[a]) <= tol && fracture.distance(&self.vertices[b]) <= tol {
                self.fracture[f] = Some(id);
            }
        }
    }

    /// Structural validity: orientation, incidence, boundary tags and no
    /// duplicated vertices.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for c in 0..self.num_cells() {
            if !(self.area(c) > 0.0) {
                return Err(Error::InvalidMesh(format!("cell {c} is not positively oriented")));
            }
        }
        for f in 0..self.num_facets() {
            let boundary = self.is_boundary(f);
            if boundary != self.boundary[f].is_some() {
                return Err(Error::InvalidMesh(format!("facet {f} has an inconsistent boundary tag")));
            }
            let (c0, c1) = self.facet_cells[f];
            if c1.is_some_and(|c1| c1 <= c0) {
                return Err(Error::InvalidMesh(format!("facet {f} incidence is not ordered")));
            }
        }
        let mut order: Vec<usize> = (0..self.num_vertices()).collect();
        order.sort_by(|&a, &b| self.vertices[a].x.total_cmp(&self.vertices[b].x));
        for (k, &a) in order.iter().enumerate() {
            for &b in &order[k + 1..] {
                if self.vertices[b].x - self.vertices[a].x > tol {
                    break;
                }
                if (self.vertices[b] - self.vertices[a]).norm() <= tol {
                    return Err(Error::InvalidMesh(format!("vertices {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }

    /// Checks that every fracture-tagged facet lies on its fracture.
    pub fn validate_fracture_tags(&self, network: &[Fracture], tol: f64) -> Result<()> {
        for f in 0..self.num_facets() {
            if let Some(id) = self.fracture[f] {
                let fracture = network
                    .get(id)
                    .ok_or_else(|| Error::InvalidMesh(format!("facet {f} tagged with unknown fracture {id}")))?;
                let [a, b] = self.facets[f];
                if fracture.distance(&self.vertices[a]) > tol || fracture.distance(&self.vertices[b]) > tol {
                    return Err(Error::InvalidMesh(format!("facet {f} does not lie on fracture {id}")));
                }
            }
        }
        Ok(())
    }

    fn builder_with_tags(&self) -> MeshBuilder {
        let mut builder = MeshBuilder {
            vertices: self.vertices.clone(),
            cells: self.cells.clone(),
            permeability: self.permeability.clone(),
            ..Default::default()
        };
        for (f, key) in self.facets.iter().enumerate() {
            if let Some(kind) = self.boundary[f] {
                builder.boundary_tags.insert(*key, kind);
            }
            if let Some(id) = self.fracture[f] {
                builder.fracture_tags.insert(*key, id);
            }
        }
        builder
    }
}

fn grid_cells(nx: usize, ny: usize, stride: usize) -> Vec<[usize; 3]> {
    let mut cells = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let v00 = j * stride + i;
            let v10 = v00 + 1;
            let v01 = v00 + stride;
            let v11 = v01 + 1;
            cells.push([v00, v10, v11]);
            cells.push([v00, v11, v01]);
        }
    }
    cells
}

/// Red refinement: every triangle is split into four through its edge
/// midpoints. Child facets inherit boundary and fracture tags; cells inherit
/// the permeability of their parent.
pub fn refine_uniform(mesh: &SimplicialMesh) -> SimplicialMesh {
    refine_uniform_with_parents(mesh).0
}

/// As [`refine_uniform`], also returning the parent of every child cell.
pub fn refine_uniform_with_parents(mesh: &SimplicialMesh) -> (SimplicialMesh, Vec<usize>) {
    let nv = mesh.num_vertices();
    let mut vertices = mesh.vertices.clone();
    vertices.extend((0..mesh.num_facets()).map(|f| mesh.facet_midpoint(f)));
    let mut cells = Vec::with_capacity(4 * mesh.num_cells());
    let mut permeability = Vec::with_capacity(4 * mesh.num_cells());
    let mut parents = Vec::with_capacity(4 * mesh.num_cells());
    for c in 0..mesh.num_cells() {
        let [v0, v1, v2] = mesh.cells[c];
        let [m0, m1, m2] = mesh.cell_facets[c].map(|f| nv + f);
        cells.extend([[v0, m2, m1], [m2, v1, m0], [m1, m0, v2], [m0, m1, m2]]);
        permeability.extend([mesh.permeability[c]; 4]);
        parents.extend([c; 4]);
    }
    let mut builder = MeshBuilder { vertices, cells, permeability, ..Default::default() };
    for (f, &[a, b]) in mesh.facets.iter().enumerate() {
        let m = nv + f;
        if let Some(kind) = mesh.boundary[f] {
            builder.tag_boundary(a, m, kind);
            builder.tag_boundary(m, b, kind);
        }
        if let Some(id) = mesh.fracture[f] {
            builder.tag_fracture(a, m, id);
            builder.tag_fracture(m, b, id);
        }
    }
    let refined = builder.build().expect("refinement of a valid mesh is valid");
    (refined, parents)
}

/// Checks that the facets tagged `id` cover `fracture` without gaps.
pub fn check_conforming(mesh: &SimplicialMesh, id: usize, fracture: &Fracture, tol: f64) -> bool {
    fracture_cover(mesh, id, fracture, tol).is_ok()
}

/// Tagged facets of fracture `id`, sorted along the fracture, as
/// `(facet, start vertex, end vertex, t_start, t_end)`.
fn fracture_cover(
    mesh: &SimplicialMesh,
    id: usize,
    fracture: &Fracture,
    tol: f64,
) -> Result<Vec<(usize, usize, usize, f64, f64)>> {
    let len = fracture.length();
    let ttol = tol / len;
    let mut pieces = Vec::new();
    for f in 0..mesh.num_facets() {
        if mesh.fracture[f] != Some(id) {
            continue;
        }
        let [a, b] = mesh.facets[f];
        let (pa, pb) = (mesh.vertices[a], mesh.vertices[b]);
        if fracture.distance(&pa) > tol || fracture.distance(&pb) > tol {
            let m = nalgebra::center(&pa, &pb);
            return Err(Error::NotFitted { fracture: id, x: m.x, y: m.y });
        }
        let (ta, tb) = (fracture.parameter(&pa), fracture.parameter(&pb));
        if ta <= tb {
            pieces.push((f, a, b, ta, tb));
        } else {
            pieces.push((f, b, a, tb, ta));
        }
    }
    pieces.sort_by(|x, y| x.3.total_cmp(&y.3));
    let gap_at = |t: f64| {
        let p = fracture.a + (fracture.b - fracture.a) * t.clamp(0.0, 1.0);
        Error::NotFitted { fracture: id, x: p.x, y: p.y }
    };
    let mut reach = 0.0;
    for piece in &pieces {
        if piece.3 > reach + ttol {
            return Err(gap_at(reach));
        }
        reach = f64::max(reach, piece.4);
    }
    if reach < 1.0 - ttol {
        return Err(gap_at(reach));
    }
    Ok(pieces)
}

/// One facet of the mesh lying on a conductive fracture.
#[derive(Clone, Debug, PartialEq)]
pub struct FractureSegment {
    pub facet: usize,
    pub fracture: usize,
    /// Mesh vertices, ordered along the fracture direction.
    pub mesh_vertices: [usize; 2],
    /// Indices into [`FractureMesh::vertices`].
    pub vertices: [usize; 2],
    pub length: f64,
    /// Aperture `ε` of the parent fracture.
    pub thickness: f64,
    /// `ε K_c` of the parent fracture.
    pub transmissivity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonVertex {
    pub mesh_vertex: usize,
    pub point: Point,
    /// `None` for regular interior vertices of a fracture.
    pub class: Option<PointClass>,
}

/// A conductive-blocking intersection strictly inside a fracture segment.
#[derive(Clone, Debug, PartialEq)]
pub struct InteriorBlockingPoint {
    pub segment: usize,
    /// Position along the segment in `[0, 1]`.
    pub s: f64,
}

/// Conductive fracture facets of a fitted mesh and their vertex skeleton.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FractureMesh {
    pub segments: Vec<FractureSegment>,
    pub vertices: Vec<SkeletonVertex>,
    pub interior_blocking: Vec<InteriorBlockingPoint>,
}

impl FractureMesh {
    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    /// Fracture segment on facet `f`, if any.
    pub fn segment_on_facet(&self) -> HashMap<usize, usize> {
        self.segments.iter().enumerate().map(|(i, s)| (s.facet, i)).collect()
    }
}

/// Builds the conductive fracture mesh of a fitted mesh.
pub fn extract_fracture_mesh(
    mesh: &SimplicialMesh,
    network: &[Fracture],
    sets: &IntersectionSets,
    tol: f64,
) -> Result<FractureMesh> {
    let mut fmesh = FractureMesh::default();
    let mut skeleton: HashMap<usize, usize> = HashMap::new();
    for (id, fracture) in network.iter().enumerate() {
        let Some(transmissivity) = fracture.tangential_transmissivity() else {
            continue;
        };
        for (facet, a, b, _, _) in fracture_cover(mesh, id, fracture, tol)? {
            let mut local = [0; 2];
            for (slot, v) in local.iter_mut().zip([a, b]) {
                *slot = *skeleton.entry(v).or_insert_with(|| {
                    let point = mesh.vertices[v];
                    fmesh.vertices.push(SkeletonVertex { mesh_vertex: v, point, class: None });
                    fmesh.vertices.len() - 1
                });
            }
            fmesh.segments.push(FractureSegment {
                facet,
                fracture: id,
                mesh_vertices: [a, b],
                vertices: local,
                length: mesh.facet_length(facet),
                thickness: fracture.thickness,
                transmissivity,
            });
        }
    }
    for vertex in &mut fmesh.vertices {
        vertex.class = sets.classify(&vertex.point, tol);
    }
    let nearest_fracture = |p: &Point| {
        network
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_conductive())
            .min_by(|(_, f), (_, g)| f.distance(p).total_cmp(&g.distance(p)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    for (class, p) in sets.iter() {
        let is_vertex = fmesh.vertices.iter().any(|v| (v.point - p).norm() <= tol);
        if is_vertex {
            continue;
        }
        if class != PointClass::Cb {
            return Err(Error::NotFitted { fracture: nearest_fracture(p), x: p.x, y: p.y });
        }
        let hit = fmesh.segments.iter().enumerate().find(|(_, s)| {
            let [a, b] = s.mesh_vertices.map(|v| mesh.vertices[v]);
            point_segment_distance(p, &a, &b) <= tol
        });
        match hit {
            Some((segment, s)) => {
                let [a, b] = s.mesh_vertices.map(|v| mesh.vertices[v]);
                let t = ((p - a).dot(&(b - a)) / (b - a).norm_squared()).clamp(0.0, 1.0);
                fmesh.interior_blocking.push(InteriorBlockingPoint { segment, s: t });
            }
            None => return Err(Error::NotFitted { fracture: nearest_fracture(p), x: p.x, y: p.y }),
        }
    }
    Ok(fmesh)
}

/// Vertex values of a continuous piecewise linear level-set function.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetField(pub Vec<f64>);

impl LevelSetField {
    /// Signed distance to the line through `fracture`; values within `tol`
    /// of zero are snapped to exactly zero.
    pub fn for_fracture(mesh_vertices: &[Point], fracture: &Fracture, tol: f64) -> Self {
        let t = fracture.tangent();
        Self(
            mesh_vertices
                .iter()
                .map(|p| {
                    let phi = cross(&t, &(p - fracture.a));
                    if phi.abs() <= tol {
                        0.0
                    } else {
                        phi
                    }
                })
                .collect(),
        )
    }
}

struct CutWork {
    vertices: Vec<Point>,
    cells: Vec<[usize; 3]>,
    permeability: Vec<Tensor>,
    boundary_tags: HashMap<Edge, BcKind>,
    fracture_tags: HashMap<Edge, usize>,
}

impl CutWork {
    fn from_mesh(mesh: &SimplicialMesh) -> Self {
        let b = mesh.builder_with_tags();
        Self {
            vertices: b.vertices,
            cells: b.cells,
            permeability: b.permeability,
            boundary_tags: b.boundary_tags,
            fracture_tags: b.fracture_tags,
        }
    }

    fn split_edge_tags(&mut self, a: usize, b: usize, m: usize) {
        if let Some(kind) = self.boundary_tags.remove(&edge_key(a, b)) {
            self.boundary_tags.insert(edge_key(a, m), kind);
            self.boundary_tags.insert(edge_key(m, b), kind);
        }
        if let Some(id) = self.fracture_tags.remove(&edge_key(a, b)) {
            self.fracture_tags.insert(edge_key(a, m), id);
            self.fracture_tags.insert(edge_key(m, b), id);
        }
    }

    /// Makes `p` a mesh vertex, splitting the edge or cell containing it.
    fn insert_point(&mut self, p: Point, tol: f64) -> Result<usize> {
        if let Some(v) = self.vertices.iter().position(|q| (q - p).norm() <= tol) {
            return Ok(v);
        }
        for c in 0..self.cells.len() {
            let cell = self.cells[c];
            let pts = cell.map(|v| self.vertices[v]);
            let area = signed_area(&pts[0], &pts[1], &pts[2]);
            // distance of p to each edge line, positive inside
            let mut dist = [0.0; 3];
            for i in 0..3 {
                let (a, b) = (pts[(i + 1) % 3], pts[(i + 2) % 3]);
                dist[i] = 2.0 * signed_area(&a, &b, &p) / (b - a).norm();
            }
            if dist.iter().any(|&d| d < -tol) {
                continue;
            }
            let _ = area;
            let m = self.vertices.len();
            self.vertices.push(p);
            if let Some(i) = (0..3).find(|&i| dist[i].abs() <= tol) {
                let (a, b) = (cell[(i + 1) % 3], cell[(i + 2) % 3]);
                self.split_edge_tags(a, b, m);
                for c2 in 0..self.cells.len() {
                    let cell2 = self.cells[c2];
                    if let Some(j) = (0..3).find(|&j| edge_key(cell2[(j + 1) % 3], cell2[(j + 2) % 3]) == edge_key(a, b)) {
                        let (x, y, z) = (cell2[j], cell2[(j + 1) % 3], cell2[(j + 2) % 3]);
                        self.cells[c2] = [x, y, m];
                        self.cells.push([x, m, z]);
                        self.permeability.push(self.permeability[c2]);
                    }
                }
            } else {
                let [v0, v1, v2] = cell;
                self.cells[c] = [v0, v1, m];
                self.cells.push([v1, v2, m]);
                self.cells.push([v2, v0, m]);
                let k = self.permeability[c];
                self.permeability.extend([k, k]);
            }
            return Ok(m);
        }
        Err(Error::InvalidMesh(format!("point ({}, {}) is outside the mesh", p.x, p.y)))
    }
}

/// Cuts `mesh` along `fracture` so that the fracture becomes a chain of
/// facets tagged `id`.
///
/// Fracture tips inside the mesh are inserted as vertices first. Vertices
/// whose level-set value is within `tol` of zero are treated as lying on the
/// fracture. A triangle crossed through two edges becomes a triangle plus a
/// quadrilateral split along its shorter diagonal; a triangle crossed through
/// a vertex and the opposite edge is split in two.
pub fn immerse_fracture(mesh: &SimplicialMesh, id: usize, fracture: &Fracture, tol: f64) -> Result<SimplicialMesh> {
    let tol_area = 1e-14 * mesh.total_area();
    let mut work = CutWork::from_mesh(mesh);
    work.insert_point(fracture.a, tol)?;
    work.insert_point(fracture.b, tol)?;

    let phi = LevelSetField::for_fracture(&work.vertices, fracture, tol).0;
    let ttol = tol / fracture.length();
    let in_span = |p: &Point| {
        let t = fracture.parameter(p);
        t >= -ttol && t <= 1.0 + ttol
    };
    let on_fracture: Vec<bool> = work.vertices.iter().zip(&phi).map(|(p, &v)| v == 0.0 && in_span(p)).collect();

    let mut cut_vertex: HashMap<Edge, usize> = HashMap::new();
    let mut cut_edges: Vec<Edge> = Vec::new();
    for cell in &work.cells {
        for i in 0..3 {
            let (a, b) = (cell[i], cell[(i + 1) % 3]);
            let key = edge_key(a, b);
            if phi[a] * phi[b] >= 0.0 || cut_vertex.contains_key(&key) {
                continue;
            }
            let (pa, pb) = (work.vertices[key[0]], work.vertices[key[1]]);
            let (fa, fb) = (phi[key[0]], phi[key[1]]);
            let p = pa + (pb - pa) * (fa / (fa - fb));
            if in_span(&p) {
                cut_vertex.insert(key, usize::MAX);
                cut_edges.push(key);
            }
        }
    }
    for key in &cut_edges {
        let (pa, pb) = (work.vertices[key[0]], work.vertices[key[1]]);
        let (fa, fb) = (phi[key[0]], phi[key[1]]);
        let m = work.vertices.len();
        work.vertices.push(pa + (pb - pa) * (fa / (fa - fb)));
        cut_vertex.insert(*key, m);
        work.split_edge_tags(key[0], key[1], m);
    }

    let mut cells = Vec::with_capacity(work.cells.len() + 2 * cut_edges.len());
    let mut permeability = Vec::with_capacity(cells.capacity());
    let mut new_fracture_edges = Vec::new();
    let area_of = |vs: &[Point], t: [usize; 3]| signed_area(&vs[t[0]], &vs[t[1]], &vs[t[2]]);
    for (c, &cell) in work.cells.iter().enumerate() {
        let k = work.permeability[c];
        let cuts: Vec<usize> =
            (0..3).filter(|&i| cut_vertex.contains_key(&edge_key(cell[(i + 1) % 3], cell[(i + 2) % 3]))).collect();
        let pieces: Vec<[usize; 3]> = match cuts.len() {
            0 => {
                for i in 0..3 {
                    let (a, b) = (cell[(i + 1) % 3], cell[(i + 2) % 3]);
                    if on_fracture[a] && on_fracture[b] {
                        let mid = nalgebra::center(&work.vertices[a], &work.vertices[b]);
                        let t = fracture.parameter(&mid);
                        if t > 0.0 && t < 1.0 {
                            new_fracture_edges.push(edge_key(a, b));
                        }
                    }
                }
                vec![cell]
            }
            1 => {
                // the cut edge is opposite local vertex i, which must lie on the fracture
                let i = cuts[0];
                let (vi, vj, vk) = (cell[i], cell[(i + 1) % 3], cell[(i + 2) % 3]);
                if !on_fracture[vi] {
                    return Err(Error::InvalidMesh(format!("inconsistent level-set cut of cell {c}")));
                }
                let m = cut_vertex[&edge_key(vj, vk)];
                new_fracture_edges.push(edge_key(vi, m));
                vec![[vi, vj, m], [vi, m, vk]]
            }
            2 => {
                // the uncut edge is opposite local vertex `iso`... the isolated vertex
                // is shared by both cut edges
                let uncut = (0..3).find(|i| !cuts.contains(i)).expect("two cut edges");
                let vi = cell[uncut];
                let (vj, vk) = (cell[(uncut + 1) % 3], cell[(uncut + 2) % 3]);
                let cij = cut_vertex[&edge_key(vi, vj)];
                let cik = cut_vertex[&edge_key(vi, vk)];
                new_fracture_edges.push(edge_key(cij, cik));
                let d1 = (work.vertices[vk] - work.vertices[cij]).norm();
                let d2 = (work.vertices[cik] - work.vertices[vj]).norm();
                if d1 <= d2 {
                    vec![[vi, cij, cik], [cij, vj, vk], [cij, vk, cik]]
                } else {
                    vec![[vi, cij, cik], [cij, vj, cik], [vj, vk, cik]]
                }
            }
            _ => return Err(Error::InvalidMesh(format!("cell {c} cut through three edges"))),
        };
        for piece in pieces {
            let area = area_of(&work.vertices, piece);
            if area < tol_area {
                return Err(Error::DegenerateCut { cell: c, area });
            }
            cells.push(piece);
            permeability.push(k);
        }
    }
    let mut builder = MeshBuilder {
        vertices: work.vertices,
        cells,
        permeability,
        boundary_tags: work.boundary_tags,
        fracture_tags: work.fracture_tags,
    };
    for key in new_fracture_edges {
        builder.fracture_tags.insert(key, id);
    }
    builder.build()
}

/// Immerses all fractures for which `select` returns true, in network order.
pub fn immerse_network(
    mesh: &SimplicialMesh,
    network: &[Fracture],
    tol: f64,
    select: impl Fn(&Fracture) -> bool,
) -> Result<SimplicialMesh> {
    let mut current = mesh.clone();
    for (id, f) in network.iter().enumerate() {
        if select(f) {
            current = immerse_fracture(&current, id, f, tol)?;
        }
    }
    Ok(current)
}

/// Bucket grid for point-in-triangle queries.
pub struct CellLocator<'a> {
    mesh: &'a SimplicialMesh,
    origin: Point,
    cell_size: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'a> CellLocator<'a> {
    pub fn new(mesh: &'a SimplicialMesh) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let n = (mesh.num_cells() as f64).sqrt().ceil().max(1.0);
        let cell_size = ((hi.x - lo.x).max(hi.y - lo.y) / n).max(f64::MIN_POSITIVE);
        let nx = ((hi.x - lo.x) / cell_size).floor() as usize + 1;
        let ny = ((hi.y - lo.y) / cell_size).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); nx * ny];
        let mut locator = Self { mesh, origin: lo, cell_size, nx, ny, buckets: Vec::new() };
        for c in 0..mesh.num_cells() {
            let pts = mesh.cell_points(c);
            let (i0, j0) = locator.bucket_of(&Point::new(
                pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
                pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min),
            ));
            let (i1, j1) = locator.bucket_of(&Point::new(
                pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
                pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max),
            ));
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * nx + i].push(c);
                }
            }
        }
        locator.buckets = buckets;
        locator
    }

    fn bucket_of(&self, p: &Point) -> (usize, usize) {
        let i = ((p.x - self.origin.x) / self.cell_size).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let j = ((p.y - self.origin.y) / self.cell_size).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (i, j)
    }

    /// Barycentric coordinates of `p` in cell `c`.
    pub fn barycentric(&self, c: usize, p: &Point) -> [f64; 3] {
        barycentric(&self.mesh.cell_points(c), p)
    }

    /// All cells whose closure contains `p` (barycentric coordinates ≥ -`tol`).
    pub fn locate_all(&self, p: &Point, tol: f64) -> Vec<usize> {
        let (lo, hi) = self.mesh.bounding_box();
        let margin = tol * self.mesh.diameter();
        if p.x < lo.x - margin || p.x > hi.x + margin || p.y < lo.y - margin || p.y > hi.y + margin {
            return Vec::new();
        }
        let (i, j) = self.bucket_of(p);
        self.buckets[j * self.nx + i]
            .iter()
            .copied()
            .filter(|&c| self.barycentric(c, p).iter().all(|&l| l >= -tol))
            .collect()
    }

    /// The containing cell with the largest minimal barycentric coordinate.
    pub fn locate(&self, p: &Point, tol: f64) -> Option<usize> {
        let (i, j) = self.bucket_of(p);
        self.buckets[j * self.nx + i]
            .iter()
            .copied()
            .map(|c| (c, self.barycentric(c, p).into_iter().fold(f64::INFINITY, f64::min)))
            .filter(|&(_, m)| m >= -tol)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
    }
}

pub fn barycentric(pts: &[Point; 3], p: &Point) -> [f64; 3] {
    let area = signed_area(&pts[0], &pts[1], &pts[2]);
    [
        signed_area(p, &pts[1], &pts[2]) / area,
        signed_area(&pts[0], p, &pts[2]) / area,
        signed_area(&pts[0], &pts[1], p) / area,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{classify_intersections, BoundaryCondition, LinearData};

    fn p(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    fn unit_square_boundary() -> DomainBoundary {
        let n = BoundaryCondition::no_flow();
        let d = BoundaryCondition::dirichlet(LinearData::constant(0.0));
        DomainBoundary::rectangle(0., 0., 1., 1., [n, d, n, d]).unwrap()
    }

    #[test]
    fn two_cell_square_topology() {
        let mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 1, 1).unwrap();
        assert_eq!(mesh.num_cells(), 2);
        assert_eq!(mesh.num_facets(), 5);
        assert_eq!((0..5).filter(|&f| mesh.is_boundary(f)).count(), 4);
        mesh.validate(1e-12).unwrap();
        assert!((mesh.total_area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clockwise_cells_are_reoriented() {
        let mesh = SimplicialMesh::new(vec![p(0., 0.), p(1., 0.), p(0., 1.)], vec![[0, 2, 1]]).unwrap();
        assert!(mesh.area(0) > 0.0);
    }

    #[test]
    fn outward_normals_point_away_from_centroid() {
        let mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 2, 2).unwrap();
        for c in 0..mesh.num_cells() {
            for i in 0..3 {
                let f = mesh.cell_facets(c)[i];
                let n = mesh.outward_normal(c, i);
                assert!((mesh.facet_midpoint(f) - mesh.centroid(c)).dot(&n) > 0.0);
            }
        }
    }

    #[test]
    fn refinement_counts_and_inheritance() {
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 1, 1).unwrap();
        mesh.set_permeability(1, Tensor::identity() * 3.0);
        let fine = refine_uniform(&mesh);
        assert_eq!(fine.num_cells(), 8);
        assert_eq!(refine_uniform(&fine).num_cells(), 32);
        let (fine, parents) = refine_uniform_with_parents(&mesh);
        for c in 0..fine.num_cells() {
            assert_eq!(fine.permeability(c), mesh.permeability(parents[c]));
        }
        assert!((fine.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_keeps_fracture_covered() {
        let boundary = unit_square_boundary();
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 4, 4).unwrap();
        mesh.tag_boundary_from(&boundary, 1e-10).unwrap();
        let f = Fracture::conductive(p(0., 0.5), p(1., 0.5), 1e-4, 1e4).unwrap();
        mesh.tag_fracture_facets(0, &f, 1e-10);
        assert!(check_conforming(&mesh, 0, &f, 1e-10));
        let fine = refine_uniform(&mesh);
        assert!(check_conforming(&fine, 0, &f, 1e-10));
        let tagged = (0..fine.num_facets()).filter(|&g| fine.fracture_tag(g) == Some(0)).count();
        assert_eq!(tagged, 8);
        for g in 0..fine.num_facets() {
            if fine.is_boundary(g) {
                let m = fine.facet_midpoint(g);
                let expected = if m.x == 1.0 || m.x == 0.0 { BcKind::Dirichlet } else { BcKind::Neumann };
                assert_eq!(fine.boundary_tag(g), Some(expected));
            }
        }
    }

    #[test]
    fn horizontal_fracture_mesh_extraction() {
        let boundary = unit_square_boundary();
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 4, 4).unwrap();
        mesh.tag_boundary_from(&boundary, 1e-10).unwrap();
        let network = [Fracture::conductive(p(0., 0.5), p(1., 0.5), 1e-4, 1e4).unwrap()];
        mesh.tag_fracture_facets(0, &network[0], 1e-10);
        let sets = classify_intersections(&network, &boundary, 1e-10).unwrap();
        let fm = extract_fracture_mesh(&mesh, &network, &sets, 1e-10).unwrap();
        assert_eq!(fm.num_segments(), 4);
        assert_eq!(fm.num_vertices(), 5);
        let tips: Vec<_> = fm.vertices.iter().filter_map(|v| v.class).collect();
        assert_eq!(tips, vec![PointClass::CmDirichlet, PointClass::CmDirichlet]);
        assert!((fm.total_length() - 1.0).abs() < 1e-12);
        assert!((fm.segments[0].transmissivity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unfitted_mesh_is_reported() {
        let boundary = unit_square_boundary();
        let mut mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 3, 3).unwrap();
        mesh.tag_boundary_from(&boundary, 1e-10).unwrap();
        let network = [Fracture::conductive(p(0., 0.5), p(1., 0.5), 1e-4, 1e4).unwrap()];
        mesh.tag_fracture_facets(0, &network[0], 1e-10);
        let sets = classify_intersections(&network, &boundary, 1e-10).unwrap();
        let err = extract_fracture_mesh(&mesh, &network, &sets, 1e-10).unwrap_err();
        assert!(matches!(err, Error::NotFitted { fracture: 0, .. }));
        assert!(!check_conforming(&mesh, 0, &network[0], 1e-10));
    }

    #[test]
    fn immersing_vertical_fracture_in_two_cells() {
        let mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 1, 1).unwrap();
        let f = Fracture::conductive(p(0.5, 0.), p(0.5, 1.), 1e-4, 1.).unwrap();
        let cut = immerse_fracture(&mesh, 0, &f, 1e-10).unwrap();
        cut.validate(1e-10).unwrap();
        assert!((cut.total_area() - 1.0).abs() < 1e-12);
        assert!(check_conforming(&cut, 0, &f, 1e-10));
        for v in 0..mesh.num_vertices() {
            assert_eq!(cut.vertex(v), mesh.vertex(v));
        }
    }

    #[test]
    fn immersing_through_a_vertex() {
        // the diagonal of every grid square passes through grid vertices
        let mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 2, 2).unwrap();
        let f = Fracture::conductive(p(0., 1.), p(1., 0.), 1e-4, 1.).unwrap();
        let cut = immerse_fracture(&mesh, 0, &f, 1e-10).unwrap();
        cut.validate(1e-10).unwrap();
        assert!(check_conforming(&cut, 0, &f, 1e-10));
        assert!((cut.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn immersing_interior_segment_inserts_tips() {
        let mesh = SimplicialMesh::rectangle(0., 0., 1., 1., 3, 3).unwrap();
        let f = Fracture::conductive(p(0.21, 0.37), p(0.83, 0.61), 1e-4, 1.).unwrap();
        let cut = immerse_fracture(&mesh, 0, &f, 1e-10).unwrap();
        cut.validate(1e-10).unwrap();
        assert!(check_conforming(&cut, 0, &f, 1e-10));
        assert!(cut.vertices().iter().any(|q| (q - f.a).norm() < 1e-14));
        assert!(cut.vertices().iter().any(|q| (q - f.b).norm() < 1e-14));
    }

    #[test]
    fn locator_finds_containing_cell() {
        let mesh = SimplicialMesh::rectangle(0., 0., 2., 1., 5, 3).unwrap();
        let locator = CellLocator::new(&mesh);
        for q in [p(0.1, 0.1), p(1.9, 0.95), p(1.0, 0.5), p(0.0, 0.0), p(2.0, 1.0)] {
            let c = locator.locate(&q, 1e-12).unwrap();
            assert!(barycentric(&mesh.cell_points(c), &q).iter().all(|&l| l >= -1e-12));
        }
        assert!(locator.locate(&p(2.5, 0.5), 1e-12).is_none());
    }
}
