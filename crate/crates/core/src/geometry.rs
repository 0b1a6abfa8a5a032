//! Fracture network geometry: fractures, the domain boundary and the
//! classification of the points where conductive fractures end or meet
//! other fractures or the boundary.

use nalgebra::{Point2, Vector2};

use crate::error::{Error, Result};

pub type Point = Point2<f64>;
pub type Vector = Vector2<f64>;

/// z-component of the 2D cross product.
#[inline]
pub fn cross(a: &Vector, b: &Vector) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Distance from `p` to the closed segment `a`-`b`.
pub fn point_segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&d) / len2).clamp(0.0, 1.0);
    (p - (a + d * t)).norm()
}

/// Default geometric tolerance for a domain of the given diameter.
pub fn default_tolerance(diameter: f64) -> f64 {
    1e-10 * diameter
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FractureKind {
    /// Highly permeable fracture, modelled as a 1D Darcy interface.
    Conductive { tangential_conductivity: f64 },
    /// Low permeability barrier, modelled as a normal resistance term.
    Blocking { normal_conductivity: f64 },
}

/// A straight fracture segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fracture {
    pub a: Point,
    pub b: Point,
    pub thickness: f64,
    pub kind: FractureKind,
}

impl Fracture {
    pub fn new(a: Point, b: Point, thickness: f64, kind: FractureKind) -> Result<Self> {
        if (b - a).norm() == 0.0 || !a.x.is_finite() || !a.y.is_finite() || !b.x.is_finite() || !b.y.is_finite()
        {
            return Err(Error::InvalidFracture(format!(
                "degenerate endpoints ({}, {})-({}, {})",
                a.x, a.y, b.x, b.y
            )));
        }
        if !(thickness > 0.0) {
            return Err(Error::InvalidFracture(format!("thickness {thickness} is not positive")));
        }
        let k = match kind {
            FractureKind::Conductive { tangential_conductivity } => tangential_conductivity,
            FractureKind::Blocking { normal_conductivity } => normal_conductivity,
        };
        if !(k > 0.0) {
            return Err(Error::InvalidFracture(format!("conductivity {k} is not positive")));
        }
        Ok(Self { a, b, thickness, kind })
    }

    pub fn conductive(a: Point, b: Point, thickness: f64, conductivity: f64) -> Result<Self> {
        Self::new(a, b, thickness, FractureKind::Conductive { tangential_conductivity: conductivity })
    }

    pub fn blocking(a: Point, b: Point, thickness: f64, conductivity: f64) -> Result<Self> {
        Self::new(a, b, thickness, FractureKind::Blocking { normal_conductivity: conductivity })
    }

    pub fn is_conductive(&self) -> bool {
        matches!(self.kind, FractureKind::Conductive { .. })
    }

    pub fn is_blocking(&self) -> bool {
        matches!(self.kind, FractureKind::Blocking { .. })
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    /// Unit tangent pointing from `a` to `b`.
    pub fn tangent(&self) -> Vector {
        (self.b - self.a) / self.length()
    }

    /// Unit normal, the tangent rotated counter-clockwise. Fixed by the endpoint order.
    pub fn normal(&self) -> Vector {
        let t = self.tangent();
        Vector::new(-t.y, t.x)
    }

    /// In-plane outward normals at `a` and `b`.
    pub fn endpoint_normals(&self) -> [Vector; 2] {
        let t = self.tangent();
        [-t, t]
    }

    /// `ε K_c` for conductive fractures.
    pub fn tangential_transmissivity(&self) -> Option<f64> {
        match self.kind {
            FractureKind::Conductive { tangential_conductivity } => Some(self.thickness * tangential_conductivity),
            FractureKind::Blocking { .. } => None,
        }
    }

    /// `ε / K_b` for blocking fractures.
    pub fn normal_resistance(&self) -> Option<f64> {
        match self.kind {
            FractureKind::Blocking { normal_conductivity } => Some(self.thickness / normal_conductivity),
            FractureKind::Conductive { .. } => None,
        }
    }

    pub fn distance(&self, p: &Point) -> f64 {
        point_segment_distance(p, &self.a, &self.b)
    }

    /// Parameter of the orthogonal projection of `p` onto the fracture line (0 at `a`, 1 at `b`).
    pub fn parameter(&self, p: &Point) -> f64 {
        let d = self.b - self.a;
        (p - self.a).dot(&d) / d.norm_squared()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BcKind {
    Dirichlet,
    Neumann,
}

/// Affine scalar data `c0 + cx x + cy y`; covers every boundary condition of the built-in
/// benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LinearData {
    pub c0: f64,
    pub cx: f64,
    pub cy: f64,
}

impl LinearData {
    pub const fn constant(c0: f64) -> Self {
        Self { c0, cx: 0.0, cy: 0.0 }
    }

    pub fn eval(&self, p: &Point) -> f64 {
        self.c0 + self.cx * p.x + self.cy * p.y
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryCondition {
    pub kind: BcKind,
    /// Pressure for Dirichlet edges, normal flux `u·n` for Neumann edges.
    pub data: LinearData,
}

impl BoundaryCondition {
    pub const fn dirichlet(data: LinearData) -> Self {
        Self { kind: BcKind::Dirichlet, data }
    }

    pub const fn neumann(data: LinearData) -> Self {
        Self { kind: BcKind::Neumann, data }
    }

    pub const fn no_flow() -> Self {
        Self::neumann(LinearData::constant(0.0))
    }
}

/// Closed polygonal domain boundary; edge `i` joins vertex `i` to vertex `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBoundary {
    vertices: Vec<Point>,
    conditions: Vec<BoundaryCondition>,
}

impl DomainBoundary {
    pub fn new(vertices: Vec<Point>, conditions: Vec<BoundaryCondition>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::InvalidBoundary(format!("{n} vertices, need at least 3")));
        }
        if conditions.len() != n {
            return Err(Error::InvalidBoundary(format!(
                "{} edge conditions for {n} edges",
                conditions.len()
            )));
        }
        let boundary = Self { vertices, conditions };
        boundary.check_simple()?;
        Ok(boundary)
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`, conditions ordered bottom, right, top, left.
    pub fn rectangle(x0: f64, y0: f64, x1: f64, y1: f64, conditions: [BoundaryCondition; 4]) -> Result<Self> {
        Self::new(
            vec![Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1)],
            conditions.to_vec(),
        )
    }

    fn check_simple(&self) -> Result<()> {
        let n = self.vertices.len();
        let tol = default_tolerance(self.diameter());
        for i in 0..n {
            let (a0, a1) = self.edge(i);
            if (a1 - a0).norm() <= tol {
                return Err(Error::InvalidBoundary(format!("edge {i} has zero length")));
            }
            for j in i + 1..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (b0, b1) = self.edge(j);
                if !matches!(intersect_segments(&a0, &a1, &b0, &b1, tol), SegmentHit::None) {
                    return Err(Error::InvalidBoundary(format!("edges {i} and {j} intersect")));
                }
            }
        }
        if self.signed_area().abs() <= tol * tol {
            return Err(Error::InvalidBoundary("zero enclosed area".into()));
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn conditions(&self) -> &[BoundaryCondition] {
        &self.conditions
    }

    pub fn num_edges(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge(&self, i: usize) -> (Point, Point) {
        (self.vertices[i], self.vertices[(i + 1) % self.vertices.len()])
    }

    pub fn condition(&self, edge: usize) -> &BoundaryCondition {
        &self.conditions[edge]
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, p) in self.vertices.iter().enumerate() {
            for q in &self.vertices[i + 1..] {
                d = d.max((q - p).norm());
            }
        }
        d
    }

    fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let (p, q) = self.edge(i);
                p.x * q.y - q.x * p.y
            })
            .sum::<f64>()
            * 0.5
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Boundary edge containing `p` within `tol`.
    ///
    /// Fails when `p` sits on a vertex joining a Dirichlet edge to a Neumann edge.
    pub fn locate(&self, p: &Point, tol: f64) -> Result<Option<usize>> {
        let n = self.vertices.len();
        for (i, v) in self.vertices.iter().enumerate() {
            if (p - v).norm() <= tol {
                let prev = (i + n - 1) % n;
                if self.conditions[prev].kind != self.conditions[i].kind {
                    return Err(Error::AmbiguousBoundaryPoint { x: p.x, y: p.y });
                }
                return Ok(Some(i));
            }
        }
        Ok((0..n).find(|&i| {
            let (a, b) = self.edge(i);
            point_segment_distance(p, &a, &b) <= tol
        }))
    }

    /// Point-in-polygon test; points within `tol` of the boundary count as inside.
    pub fn contains(&self, p: &Point, tol: f64) -> bool {
        let n = self.vertices.len();
        if (0..n).any(|i| {
            let (a, b) = self.edge(i);
            point_segment_distance(p, &a, &b) <= tol
        }) {
            return true;
        }
        let mut inside = false;
        for i in 0..n {
            let (a, b) = self.edge(i);
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

/// Points where conductive fractures end or meet something.
///
/// Every list is sorted lexicographically so the result does not depend on
/// the order of the input network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntersectionSets {
    /// Conductive-conductive intersections, including T-junctions.
    pub cc: Vec<Point>,
    /// Conductive-blocking intersections.
    pub cb: Vec<Point>,
    /// Conductive fracture points on Dirichlet boundary edges.
    pub cm_dirichlet: Vec<Point>,
    /// Conductive fracture points on Neumann boundary edges.
    pub cm_neumann: Vec<Point>,
    /// Interior tips.
    pub ci: Vec<Point>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointClass {
    Cc,
    Cb,
    CmDirichlet,
    CmNeumann,
    Ci,
}

impl IntersectionSets {
    pub fn len(&self) -> usize {
        self.cc.len() + self.cb.len() + self.cm_dirichlet.len() + self.cm_neumann.len() + self.ci.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class of the point within `tol` of `p`, if any.
    pub fn classify(&self, p: &Point, tol: f64) -> Option<PointClass> {
        let hit = |set: &[Point]| set.iter().any(|q| (q - p).norm() <= tol);
        if hit(&self.cc) {
            Some(PointClass::Cc)
        } else if hit(&self.cb) {
            Some(PointClass::Cb)
        } else if hit(&self.cm_dirichlet) {
            Some(PointClass::CmDirichlet)
        } else if hit(&self.cm_neumann) {
            Some(PointClass::CmNeumann)
        } else if hit(&self.ci) {
            Some(PointClass::Ci)
        } else {
            None
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (PointClass, &Point)> {
        self.cc
            .iter()
            .map(|p| (PointClass::Cc, p))
            .chain(self.cb.iter().map(|p| (PointClass::Cb, p)))
            .chain(self.cm_dirichlet.iter().map(|p| (PointClass::CmDirichlet, p)))
            .chain(self.cm_neumann.iter().map(|p| (PointClass::CmNeumann, p)))
            .chain(self.ci.iter().map(|p| (PointClass::Ci, p)))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum SegmentHit {
    None,
    Point(Point),
    Overlap,
}

pub(crate) fn intersect_segments(a0: &Point, a1: &Point, b0: &Point, b1: &Point, tol: f64) -> SegmentHit {
    let da = a1 - a0;
    let db = b1 - b0;
    let la = da.norm();
    let lb = db.norm();
    // signed distances of b's endpoints to line a, and of a's endpoints to line b
    let h0 = cross(&da, &(b0 - a0)) / la;
    let h1 = cross(&da, &(b1 - a0)) / la;
    if h0.abs() <= tol && h1.abs() <= tol {
        let s0 = (b0 - a0).dot(&da) / la;
        let s1 = (b1 - a0).dot(&da) / la;
        let lo = s0.min(s1).max(0.0);
        let hi = s0.max(s1).min(la);
        let overlap = hi - lo;
        if overlap > tol {
            return SegmentHit::Overlap;
        }
        if overlap >= -tol {
            let s = 0.5 * (lo + hi);
            return SegmentHit::Point(a0 + da * (s / la).clamp(0.0, 1.0));
        }
        return SegmentHit::None;
    }
    let g0 = cross(&db, &(a0 - b0)) / lb;
    let g1 = cross(&db, &(a1 - b0)) / lb;
    let straddles = |u: f64, v: f64| u.min(v) <= tol && u.max(v) >= -tol;
    if !straddles(h0, h1) || !straddles(g0, g1) {
        return SegmentHit::None;
    }
    let p = if h0.abs() <= tol {
        *b0
    } else if h1.abs() <= tol {
        *b1
    } else if g0.abs() <= tol {
        *a0
    } else if g1.abs() <= tol {
        *a1
    } else {
        b0 + db * (h0 / (h0 - h1))
    };
    if point_segment_distance(&p, a0, a1) <= tol && point_segment_distance(&p, b0, b1) <= tol {
        SegmentHit::Point(p)
    } else {
        SegmentHit::None
    }
}

/// Transversal intersection of two segments, endpoints included up to `tol`.
pub fn segment_intersection(a: (Point, Point), b: (Point, Point), tol: f64) -> Result<Option<Point>> {
    match intersect_segments(&a.0, &a.1, &b.0, &b.1, tol) {
        SegmentHit::None => Ok(None),
        SegmentHit::Point(p) => Ok(Some(p)),
        SegmentHit::Overlap => Err(Error::OverlappingFractures { first: 0, second: 1 }),
    }
}

fn push_unique(points: &mut Vec<Point>, p: Point, tol: f64) {
    if !points.iter().any(|q| (q - p).norm() <= tol) {
        points.push(p);
    }
}

/// All conductive endpoints and crossing points of the network, deduplicated.
pub(crate) fn conductive_points(network: &[Fracture], tol: f64) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (i, f) in network.iter().enumerate() {
        if !f.is_conductive() {
            continue;
        }
        push_unique(&mut points, f.a, tol);
        push_unique(&mut points, f.b, tol);
        for (j, g) in network.iter().enumerate() {
            if j == i || (g.is_conductive() && j < i) {
                continue;
            }
            match intersect_segments(&f.a, &f.b, &g.a, &g.b, tol) {
                SegmentHit::None => {}
                SegmentHit::Point(p) => push_unique(&mut points, p, tol),
                SegmentHit::Overlap => {
                    return Err(Error::OverlappingFractures { first: i.min(j), second: i.max(j) })
                }
            }
        }
    }
    Ok(points)
}

fn sort_points(points: &mut [Point]) {
    points.sort_by(|p, q| p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)));
}

/// Classifies every conductive endpoint and crossing point.
///
/// Precedence for points that qualify for several sets: boundary, then
/// conductive-conductive, then conductive-blocking, then interior tip.
pub fn classify_intersections(
    network: &[Fracture],
    boundary: &DomainBoundary,
    tol: f64,
) -> Result<IntersectionSets> {
    let mut sets = IntersectionSets::default();
    for p in conductive_points(network, tol)? {
        if let Some(edge) = boundary.locate(&p, tol)? {
            match boundary.condition(edge).kind {
                BcKind::Dirichlet => sets.cm_dirichlet.push(p),
                BcKind::Neumann => sets.cm_neumann.push(p),
            }
            continue;
        }
        let conductive_hits =
            network.iter().filter(|f| f.is_conductive() && f.distance(&p) <= tol).count();
        if conductive_hits >= 2 {
            sets.cc.push(p);
        } else if network.iter().any(|f| f.is_blocking() && f.distance(&p) <= tol) {
            sets.cb.push(p);
        } else {
            sets.ci.push(p);
        }
    }
    for set in [&mut sets.cc, &mut sets.cb, &mut sets.cm_dirichlet, &mut sets.cm_neumann, &mut sets.ci] {
        sort_points(set);
    }
    Ok(sets)
}
