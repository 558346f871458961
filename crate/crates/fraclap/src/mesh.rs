//! Interval and triangulated-disk meshes with boundary grading.
//!
//! Meshes are simplicial and conforming. The disk construction places
//! concentric vertex rings at radii `r_i = 1 - (1 - i/M)^mu` and triangulates
//! each annulus by marching between the two ring vertex sequences; `mu = 1`
//! reproduces the uniform construction. Interval meshes are graded toward
//! both endpoints with the same radial law.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid interval: a={a} must be strictly less than b={b}")]
    InvalidRange { a: f64, b: f64 },
    #[error("grading exponent mu={0} outside [1, 2)")]
    InvalidGrading(f64),
    #[error("ring/subinterval count M={got} too small (need at least {need})")]
    TooFewRings { got: usize, need: usize },
    #[error("element {0} is degenerate (zero measure)")]
    DegenerateElement(usize),
    #[error("mesh is not conforming: {0}")]
    NotConforming(String),
    #[error("element index {0} out of bounds")]
    ElementOutOfBounds(usize),
    #[error("vertex index {0} out of bounds")]
    VertexOutOfBounds(usize),
    #[error("malformed mesh file: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Adjacency class of an unordered element pair. Drives the choice of
/// singular quadrature transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairClass {
    Identical,
    /// 2D only: the pair shares a full edge.
    SharedEdge,
    SharedVertex,
    Disjoint,
}

impl PairClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairClass::Identical => "identical",
            PairClass::SharedEdge => "shared-edge",
            PairClass::SharedVertex => "shared-vertex",
            PairClass::Disjoint => "disjoint",
        }
    }
}

/// Grading parameters: `rings` is the number of rings (2D) or subintervals
/// per side (1D), `mu` the grading exponent. `mu = 1` is uniform; `mu < 2`
/// keeps the node count of the disk construction proportional to `rings^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradingSpec {
    pub rings: usize,
    pub mu: f64,
}

impl GradingSpec {
    pub fn new(rings: usize, mu: f64) -> Result<Self, MeshError> {
        if !(1.0..2.0).contains(&mu) {
            return Err(MeshError::InvalidGrading(mu));
        }
        Ok(GradingSpec { rings, mu })
    }

    pub fn uniform(rings: usize) -> Self {
        GradingSpec { rings, mu: 1.0 }
    }
}

/// Increasing radii `r_i = 1 - (1 - i/M)^mu`, `i = 1..=M`; `r_M = 1` exactly.
pub fn graded_radii(rings: usize, mu: f64) -> Vec<f64> {
    (1..=rings)
        .map(|i| 1.0 - (1.0 - i as f64 / rings as f64).powf(mu))
        .collect()
}

/// Conforming simplicial mesh of an interval (dim 1) or polygonal disk (dim 2).
#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    vertices: Vec<[f64; 2]>,
    /// Flattened element connectivity, stride `dim + 1`.
    element_nodes: Vec<usize>,
    boundary_vertex: Vec<bool>,
    elem_diameter: Vec<f64>,
    /// Mesh size parameter: `max h_T` for uniform meshes, `1/M` for graded.
    pub mesh_parameter: f64,
    /// Measured shape-regularity constant `max_T h_T / rho_T`.
    pub shape_regularity: f64,
    /// Measured local quasi-uniformity constant (max diameter ratio over
    /// vertex-adjacent element pairs).
    pub quasi_uniformity: f64,
    pub grading: GradingSpec,
}

impl Mesh {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_elements(&self) -> usize {
        self.element_nodes.len() / (self.dim + 1)
    }

    pub fn vertex(&self, v: usize) -> [f64; 2] {
        self.vertices[v]
    }

    pub fn element(&self, t: usize) -> &[usize] {
        let k = self.dim + 1;
        &self.element_nodes[t * k..(t + 1) * k]
    }

    pub fn diameter(&self, t: usize) -> f64 {
        self.elem_diameter[t]
    }

    pub fn max_diameter(&self) -> f64 {
        self.elem_diameter.iter().cloned().fold(0.0, f64::max)
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertex[v]
    }

    /// n-dimensional measure (length or area) of element `t`.
    pub fn element_measure(&self, t: usize) -> f64 {
        let e = self.element(t);
        if self.dim == 1 {
            (self.vertices[e[1]][0] - self.vertices[e[0]][0]).abs()
        } else {
            let [p0, p1, p2] = [self.vertices[e[0]], self.vertices[e[1]], self.vertices[e[2]]];
            0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])).abs()
        }
    }

    /// Signed area of a 2D element; positive for counter-clockwise ordering.
    pub fn signed_area(&self, t: usize) -> f64 {
        assert_eq!(self.dim, 2);
        let e = self.element(t);
        let [p0, p1, p2] = [self.vertices[e[0]], self.vertices[e[1]], self.vertices[e[2]]];
        0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]))
    }

    /// Adjacency classification of the unordered pair `(t1, t2)`.
    pub fn classify_pair(&self, t1: usize, t2: usize) -> Result<PairClass, MeshError> {
        let n_elem = self.n_elements();
        if t1 >= n_elem {
            return Err(MeshError::ElementOutOfBounds(t1));
        }
        if t2 >= n_elem {
            return Err(MeshError::ElementOutOfBounds(t2));
        }
        if t1 == t2 {
            return Ok(PairClass::Identical);
        }
        let shared = self.shared_vertex_count(t1, t2);
        Ok(match (self.dim, shared) {
            (2, 2) => PairClass::SharedEdge,
            (_, 1) => PairClass::SharedVertex,
            (_, 0) => PairClass::Disjoint,
            _ => {
                return Err(MeshError::NotConforming(format!(
                    "elements {t1} and {t2} share {shared} vertices"
                )))
            }
        })
    }

    pub fn shared_vertex_count(&self, t1: usize, t2: usize) -> usize {
        let (e1, e2) = (self.element(t1), self.element(t2));
        e1.iter().filter(|v| e2.contains(v)).count()
    }

    /// All elements containing vertex `v`.
    pub fn star(&self, v: usize) -> Result<Vec<usize>, MeshError> {
        if v >= self.n_vertices() {
            return Err(MeshError::VertexOutOfBounds(v));
        }
        Ok((0..self.n_elements())
            .filter(|&t| self.element(t).contains(&v))
            .collect())
    }

    /// Map from interior vertices to dof indices `0..n_dofs`; boundary
    /// vertices carry no dof (zero exterior trace).
    pub fn interior_dof_map(&self) -> DofMap {
        let mut map = vec![None; self.n_vertices()];
        let mut next = 0;
        for (v, slot) in map.iter_mut().enumerate() {
            if !self.boundary_vertex[v] {
                *slot = Some(next);
                next += 1;
            }
        }
        DofMap { map, n_dofs: next }
    }

    /// Interval endpoints (1D meshes).
    pub fn interval(&self) -> (f64, f64) {
        assert_eq!(self.dim, 1);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.vertices {
            lo = lo.min(v[0]);
            hi = hi.max(v[0]);
        }
        (lo, hi)
    }

    /// Boundary polygon of a 2D mesh as a counter-clockwise vertex loop.
    pub fn boundary_polygon(&self) -> Result<Vec<[f64; 2]>, MeshError> {
        assert_eq!(self.dim, 2);
        // Boundary edges appear in exactly one element.
        let mut edge_count: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for t in 0..self.n_elements() {
            let e = self.element(t);
            for k in 0..3 {
                let (a, b) = (e[k], e[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                edge_count
                    .entry(key)
                    .and_modify(|c| c.0 += 1)
                    .or_insert((1, if a < b { 0 } else { 1 }));
            }
        }
        let mut next: HashMap<usize, usize> = HashMap::new();
        for t in 0..self.n_elements() {
            let e = self.element(t);
            for k in 0..3 {
                let (a, b) = (e[k], e[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                if edge_count[&key].0 == 1 {
                    // Elements are CCW, so the boundary is traversed CCW by
                    // following the element-local edge direction.
                    next.insert(a, b);
                }
            }
        }
        if next.is_empty() {
            return Err(MeshError::NotConforming("mesh has no boundary edges".into()));
        }
        let start = *next.keys().min().unwrap();
        let mut loop_ids = vec![start];
        let mut cur = next[&start];
        while cur != start {
            loop_ids.push(cur);
            cur = *next
                .get(&cur)
                .ok_or_else(|| MeshError::NotConforming("boundary loop is not closed".into()))?;
            if loop_ids.len() > next.len() {
                return Err(MeshError::NotConforming("boundary loop does not close".into()));
            }
        }
        if loop_ids.len() != next.len() {
            return Err(MeshError::NotConforming(
                "boundary has more than one connected component".into(),
            ));
        }
        Ok(loop_ids.iter().map(|&v| self.vertices[v]).collect())
    }

    /// Exhaustive pairwise conformity check (intended for desk-scale meshes).
    pub fn verify_conforming(&self) -> Result<(), MeshError> {
        for t in 0..self.n_elements() {
            if self.element_measure(t) <= 0.0 {
                return Err(MeshError::DegenerateElement(t));
            }
        }
        if self.dim == 1 {
            return self.verify_conforming_1d();
        }
        let n = self.n_elements();
        let boxes: Vec<[f64; 4]> = (0..n).map(|t| self.bbox(t)).collect();
        for t1 in 0..n {
            for t2 in (t1 + 1)..n {
                let (b1, b2) = (&boxes[t1], &boxes[t2]);
                let tol = 1e-12 * (self.elem_diameter[t1] + self.elem_diameter[t2]);
                if b1[2] < b2[0] - tol || b2[2] < b1[0] - tol || b1[3] < b2[1] - tol || b2[3] < b1[1] - tol {
                    continue;
                }
                self.check_pair_conformity(t1, t2, tol)?;
            }
        }
        Ok(())
    }

    fn verify_conforming_1d(&self) -> Result<(), MeshError> {
        let n = self.n_elements();
        for t1 in 0..n {
            let e1 = self.element(t1);
            let (a1, b1) = sorted_pair(self.vertices[e1[0]][0], self.vertices[e1[1]][0]);
            for t2 in (t1 + 1)..n {
                let e2 = self.element(t2);
                let (a2, b2) = sorted_pair(self.vertices[e2[0]][0], self.vertices[e2[1]][0]);
                let shared = self.shared_vertex_count(t1, t2);
                let overlap = (b1.min(b2) - a1.max(a2)).max(0.0);
                match shared {
                    0 => {
                        if b1.min(b2) >= a1.max(a2) {
                            return Err(MeshError::NotConforming(format!(
                                "cells {t1} and {t2} touch without a shared vertex"
                            )));
                        }
                    }
                    1 => {
                        if overlap > 0.0 {
                            return Err(MeshError::NotConforming(format!(
                                "cells {t1} and {t2} overlap"
                            )));
                        }
                    }
                    _ => {
                        return Err(MeshError::NotConforming(format!(
                            "duplicate cells {t1} and {t2}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    fn bbox(&self, t: usize) -> [f64; 4] {
        let e = self.element(t);
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for &v in e {
            let p = self.vertices[v];
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }

    fn check_pair_conformity(&self, t1: usize, t2: usize, tol: f64) -> Result<(), MeshError> {
        let shared = self.shared_vertex_count(t1, t2);
        let (e1, e2) = (self.element(t1).to_vec(), self.element(t2).to_vec());
        let tri1: Vec<[f64; 2]> = e1.iter().map(|&v| self.vertices[v]).collect();
        let tri2: Vec<[f64; 2]> = e2.iter().map(|&v| self.vertices[v]).collect();
        match shared {
            0 => {
                if !triangles_strictly_disjoint(&tri1, &tri2, tol) {
                    return Err(MeshError::NotConforming(format!(
                        "elements {t1} and {t2} intersect without shared vertices"
                    )));
                }
            }
            1 => {
                let sv = *e1.iter().find(|v| e2.contains(v)).unwrap();
                // No edge crossings away from the shared vertex, and no
                // vertex containment.
                for i in 0..3 {
                    let (a, b) = (e1[i], e1[(i + 1) % 3]);
                    for j in 0..3 {
                        let (c, d) = (e2[j], e2[(j + 1) % 3]);
                        if a == sv || b == sv || c == sv || d == sv {
                            continue;
                        }
                        if segments_intersect(
                            self.vertices[a],
                            self.vertices[b],
                            self.vertices[c],
                            self.vertices[d],
                            tol,
                        ) {
                            return Err(MeshError::NotConforming(format!(
                                "elements {t1} and {t2} overlap beyond the shared vertex"
                            )));
                        }
                    }
                }
                for &v in e1.iter().filter(|&&v| v != sv) {
                    if point_in_triangle(self.vertices[v], &tri2, -tol) {
                        return Err(MeshError::NotConforming(format!(
                            "vertex of element {t1} lies inside element {t2}"
                        )));
                    }
                }
                for &v in e2.iter().filter(|&&v| v != sv) {
                    if point_in_triangle(self.vertices[v], &tri1, -tol) {
                        return Err(MeshError::NotConforming(format!(
                            "vertex of element {t2} lies inside element {t1}"
                        )));
                    }
                }
            }
            2 => {
                // Shared edge: the opposite vertices must lie strictly on
                // opposite sides of the shared line.
                let shared_ids: Vec<usize> = e1.iter().cloned().filter(|v| e2.contains(v)).collect();
                let p = self.vertices[shared_ids[0]];
                let q = self.vertices[shared_ids[1]];
                let a1 = *e1.iter().find(|v| !shared_ids.contains(v)).unwrap();
                let a2 = *e2.iter().find(|v| !shared_ids.contains(v)).unwrap();
                let s1 = cross(sub(q, p), sub(self.vertices[a1], p));
                let s2 = cross(sub(q, p), sub(self.vertices[a2], p));
                if s1 * s2 >= 0.0 {
                    return Err(MeshError::NotConforming(format!(
                        "elements {t1} and {t2} lie on the same side of their shared edge"
                    )));
                }
            }
            _ => {
                return Err(MeshError::NotConforming(format!(
                    "elements {t1} and {t2} share {shared} vertices"
                )))
            }
        }
        Ok(())
    }

    /// Distance from element `t` to the domain boundary (zero for elements
    /// touching it). For convex domains the infimum is attained at a vertex.
    pub fn element_boundary_distance(&self, t: usize) -> f64 {
        let poly = if self.dim == 2 {
            self.boundary_polygon().expect("boundary polygon")
        } else {
            Vec::new()
        };
        self.element_boundary_distance_with(t, &poly)
    }

    fn element_boundary_distance_with(&self, t: usize, poly: &[[f64; 2]]) -> f64 {
        let e = self.element(t);
        if self.dim == 1 {
            let (a, b) = self.interval();
            e.iter()
                .map(|&v| {
                    let x = self.vertices[v][0];
                    (x - a).abs().min((b - x).abs())
                })
                .fold(f64::INFINITY, f64::min)
        } else {
            e.iter()
                .map(|&v| distance_to_polygon(self.vertices[v], poly))
                .fold(f64::INFINITY, f64::min)
        }
    }

    /// Measured constants of the grading hypothesis: `(C_bnd, C_int)` with
    /// `h_T <= C_bnd h^mu` for boundary-touching elements and
    /// `h_T <= C_int h dist(T, boundary)^((mu-1)/mu)` for the rest.
    pub fn grading_constants(&self) -> (f64, f64) {
        let h = self.mesh_parameter;
        let mu = self.grading.mu;
        let poly = if self.dim == 2 {
            self.boundary_polygon().expect("boundary polygon")
        } else {
            Vec::new()
        };
        let mut c_bnd: f64 = 0.0;
        let mut c_int: f64 = 0.0;
        for t in 0..self.n_elements() {
            let touches = self.element(t).iter().any(|&v| self.boundary_vertex[v]);
            let ht = self.elem_diameter[t];
            if touches {
                c_bnd = c_bnd.max(ht / h.powf(mu));
            } else {
                let dist = self.element_boundary_distance_with(t, &poly);
                c_int = c_int.max(ht / (h * dist.powf((mu - 1.0) / mu)));
            }
        }
        (c_bnd, c_int)
    }

    /// Copy of the mesh with all coordinates scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Mesh {
        assert!(factor > 0.0 && factor.is_finite());
        let mut out = self.clone();
        for v in &mut out.vertices {
            v[0] *= factor;
            v[1] *= factor;
        }
        for d in &mut out.elem_diameter {
            *d *= factor;
        }
        out.mesh_parameter *= factor;
        out
    }

    /// Version-tagged line-oriented text format.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<(), MeshError> {
        let mut s = String::new();
        writeln!(s, "fracmesh 1 {}", self.dim).unwrap();
        writeln!(s, "vertices {}", self.n_vertices()).unwrap();
        for v in &self.vertices {
            if self.dim == 1 {
                writeln!(s, "{:.16e}", v[0]).unwrap();
            } else {
                writeln!(s, "{:.16e} {:.16e}", v[0], v[1]).unwrap();
            }
        }
        writeln!(s, "elements {}", self.n_elements()).unwrap();
        for t in 0..self.n_elements() {
            let e = self.element(t);
            let line: Vec<String> = e.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{}", line.join(" ")).unwrap();
        }
        let flagged: Vec<usize> = (0..self.n_vertices()).filter(|&v| self.boundary_vertex[v]).collect();
        writeln!(s, "boundary {}", flagged.len()).unwrap();
        for v in flagged {
            writeln!(s, "{v}").unwrap();
        }
        writeln!(s, "parameter {:.16e}", self.mesh_parameter).unwrap();
        writeln!(s, "grading {} {:.16e}", self.grading.rings, self.grading.mu).unwrap();
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Mesh, MeshError> {
        let mut lines = r.lines();
        let mut next_line = || -> Result<String, MeshError> {
            lines
                .next()
                .ok_or_else(|| MeshError::MalformedFile("unexpected end of file".into()))?
                .map_err(MeshError::Io)
        };
        let header = next_line()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "fracmesh" || parts[1] != "1" {
            return Err(MeshError::MalformedFile(format!("bad header: {header:?}")));
        }
        let dim: usize = parts[2]
            .parse()
            .map_err(|_| MeshError::MalformedFile("bad dimension".into()))?;
        if dim != 1 && dim != 2 {
            return Err(MeshError::MalformedFile(format!("unsupported dimension {dim}")));
        }
        let expect_count = |line: String, tag: &str| -> Result<usize, MeshError> {
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.len() != 2 || p[0] != tag {
                return Err(MeshError::MalformedFile(format!("expected `{tag} <count>`, got {line:?}")));
            }
            p[1].parse()
                .map_err(|_| MeshError::MalformedFile(format!("bad count in {line:?}")))
        };
        let nv = expect_count(next_line()?, "vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let line = next_line()?;
            let coords: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            let coords = coords.map_err(|_| MeshError::MalformedFile(format!("bad vertex line {line:?}")))?;
            if coords.len() != dim {
                return Err(MeshError::MalformedFile(format!("vertex line has {} coords, expected {dim}", coords.len())));
            }
            vertices.push([coords[0], if dim == 2 { coords[1] } else { 0.0 }]);
        }
        let ne = expect_count(next_line()?, "elements")?;
        let mut element_nodes = Vec::with_capacity(ne * (dim + 1));
        for _ in 0..ne {
            let line = next_line()?;
            let ids: Result<Vec<usize>, _> = line.split_whitespace().map(str::parse).collect();
            let ids = ids.map_err(|_| MeshError::MalformedFile(format!("bad element line {line:?}")))?;
            if ids.len() != dim + 1 {
                return Err(MeshError::MalformedFile(format!("element line has {} ids, expected {}", ids.len(), dim + 1)));
            }
            for &id in &ids {
                if id >= nv {
                    return Err(MeshError::MalformedFile(format!("element references vertex {id} >= {nv}")));
                }
            }
            element_nodes.extend_from_slice(&ids);
        }
        let nb = expect_count(next_line()?, "boundary")?;
        let mut boundary_vertex = vec![false; nv];
        for _ in 0..nb {
            let line = next_line()?;
            let id: usize = line
                .trim()
                .parse()
                .map_err(|_| MeshError::MalformedFile(format!("bad boundary line {line:?}")))?;
            if id >= nv {
                return Err(MeshError::MalformedFile(format!("boundary references vertex {id} >= {nv}")));
            }
            boundary_vertex[id] = true;
        }
        // Trailing metadata lines are optional for forward compatibility.
        let mut mesh_parameter = 0.0;
        let mut grading = GradingSpec { rings: 0, mu: 1.0 };
        while let Some(Ok(line)) = lines.next() {
            let p: Vec<&str> = line.split_whitespace().collect();
            match p.first() {
                Some(&"parameter") if p.len() == 2 => {
                    mesh_parameter = p[1].parse().map_err(|_| MeshError::MalformedFile("bad parameter".into()))?;
                }
                Some(&"grading") if p.len() == 3 => {
                    grading.rings = p[1].parse().map_err(|_| MeshError::MalformedFile("bad grading".into()))?;
                    grading.mu = p[2].parse().map_err(|_| MeshError::MalformedFile("bad grading".into()))?;
                }
                None => {}
                _ => return Err(MeshError::MalformedFile(format!("unexpected line {line:?}"))),
            }
        }
        let mut mesh = Mesh {
            dim,
            vertices,
            element_nodes,
            boundary_vertex,
            elem_diameter: Vec::new(),
            mesh_parameter,
            shape_regularity: 0.0,
            quasi_uniformity: 0.0,
            grading,
        };
        mesh.finalize()?;
        if mesh.mesh_parameter == 0.0 {
            mesh.mesh_parameter = mesh.max_diameter();
        }
        Ok(mesh)
    }

    /// Computes diameters and the recorded regularity constants; rejects
    /// degenerate elements.
    fn finalize(&mut self) -> Result<(), MeshError> {
        let n = self.n_elements();
        self.elem_diameter = (0..n)
            .map(|t| {
                let e = self.element(t);
                let mut d: f64 = 0.0;
                for i in 0..e.len() {
                    for j in (i + 1)..e.len() {
                        d = d.max(norm(sub(self.vertices[e[i]], self.vertices[e[j]])));
                    }
                }
                d
            })
            .collect();
        let mut sigma: f64 = 1.0;
        for t in 0..n {
            let measure = self.element_measure(t);
            if measure <= 0.0 || !measure.is_finite() {
                return Err(MeshError::DegenerateElement(t));
            }
            if self.dim == 2 {
                let e = self.element(t);
                let per: f64 = (0..3)
                    .map(|k| norm(sub(self.vertices[e[k]], self.vertices[e[(k + 1) % 3]])))
                    .sum();
                // Inscribed-ball diameter of a triangle: 4*area/perimeter.
                let rho = 4.0 * measure / per;
                sigma = sigma.max(self.elem_diameter[t] / rho);
            }
        }
        self.shape_regularity = sigma;
        // Local quasi-uniformity via vertex stars.
        let mut stars: Vec<Vec<usize>> = vec![Vec::new(); self.n_vertices()];
        for t in 0..n {
            for &v in self.element(t) {
                stars[v].push(t);
            }
        }
        let mut lambda: f64 = 1.0;
        for star in &stars {
            for (i, &a) in star.iter().enumerate() {
                for &b in &star[i + 1..] {
                    let r = self.elem_diameter[a] / self.elem_diameter[b];
                    lambda = lambda.max(r.max(1.0 / r));
                }
            }
        }
        self.quasi_uniformity = lambda;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DofMap {
    map: Vec<Option<usize>>,
    n_dofs: usize,
}

impl DofMap {
    pub fn dof(&self, vertex: usize) -> Option<usize> {
        self.map[vertex]
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }
}

/// Partition of `[a, b]` into `2 M` subintervals graded symmetrically toward
/// both endpoints: breakpoints sit at `mid +- (b-a)/2 * r_i` with the graded
/// radii `r_i = 1 - (1 - i/M)^mu`, so cell sizes shrink like the mu-th power
/// of the distance to the boundary.
pub fn build_interval_mesh(a: f64, b: f64, spec: GradingSpec) -> Result<Mesh, MeshError> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(MeshError::InvalidRange { a, b });
    }
    if !(1.0..2.0).contains(&spec.mu) {
        return Err(MeshError::InvalidGrading(spec.mu));
    }
    if spec.rings < 1 {
        return Err(MeshError::TooFewRings { got: spec.rings, need: 1 });
    }
    let m = spec.rings;
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let radii = graded_radii(m, spec.mu);
    let mut xs = Vec::with_capacity(2 * m + 1);
    xs.push(a);
    for &r in radii[..m - 1].iter().rev() {
        xs.push(mid - half * r);
    }
    xs.push(mid);
    for &r in &radii[..m - 1] {
        xs.push(mid + half * r);
    }
    xs.push(b);
    let n = xs.len();
    let vertices: Vec<[f64; 2]> = xs.iter().map(|&x| [x, 0.0]).collect();
    let mut element_nodes = Vec::with_capacity(2 * (n - 1));
    for i in 0..n - 1 {
        element_nodes.push(i);
        element_nodes.push(i + 1);
    }
    let mut boundary_vertex = vec![false; n];
    boundary_vertex[0] = true;
    boundary_vertex[n - 1] = true;
    let mut mesh = Mesh {
        dim: 1,
        vertices,
        element_nodes,
        boundary_vertex,
        elem_diameter: Vec::new(),
        mesh_parameter: 0.0,
        shape_regularity: 1.0,
        quasi_uniformity: 1.0,
        grading: spec,
    };
    mesh.finalize()?;
    mesh.mesh_parameter = if spec.mu == 1.0 {
        mesh.max_diameter()
    } else {
        1.0 / m as f64
    };
    Ok(mesh)
}

/// Conforming triangulation of the polygon through `M` concentric vertex
/// rings at the graded radii, with ring `i` carrying about `2 pi r_i / h_i`
/// vertices. The innermost disk is fanned from a center vertex; annuli are
/// triangulated by marching between consecutive rings.
pub fn build_graded_disk_mesh(spec: GradingSpec) -> Result<Mesh, MeshError> {
    if !(1.0..2.0).contains(&spec.mu) {
        return Err(MeshError::InvalidGrading(spec.mu));
    }
    if spec.rings < 2 {
        return Err(MeshError::TooFewRings { got: spec.rings, need: 2 });
    }
    let m = spec.rings;
    let radii = graded_radii(m, spec.mu);
    let mut vertices: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    let mut ring_ids: Vec<Vec<usize>> = Vec::with_capacity(m);
    let mut prev_r = 0.0;
    let mut prev_count = 1usize;
    for &r in &radii {
        let h = r - prev_r;
        let count = ((2.0 * std::f64::consts::PI * r / h).ceil() as usize).max(prev_count.max(6));
        let ids: Vec<usize> = (0..count)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                vertices.push([r * th.cos(), r * th.sin()]);
                vertices.len() - 1
            })
            .collect();
        ring_ids.push(ids);
        prev_r = r;
        prev_count = count;
    }
    let mut element_nodes: Vec<usize> = Vec::new();
    // Innermost fan.
    let first = &ring_ids[0];
    let c0 = first.len();
    for k in 0..c0 {
        element_nodes.extend_from_slice(&[0, first[k], first[(k + 1) % c0]]);
    }
    // Annulus strips.
    for i in 1..m {
        march_annulus(&vertices, &ring_ids[i - 1], &ring_ids[i], &mut element_nodes);
    }
    let nv = vertices.len();
    let mut boundary_vertex = vec![false; nv];
    for &v in &ring_ids[m - 1] {
        boundary_vertex[v] = true;
    }
    let mut mesh = Mesh {
        dim: 2,
        vertices,
        element_nodes,
        boundary_vertex,
        elem_diameter: Vec::new(),
        mesh_parameter: 0.0,
        shape_regularity: 0.0,
        quasi_uniformity: 0.0,
        grading: spec,
    };
    mesh.finalize()?;
    mesh.mesh_parameter = if spec.mu == 1.0 {
        mesh.max_diameter()
    } else {
        1.0 / m as f64
    };
    Ok(mesh)
}

/// Triangulates the strip between two concentric vertex rings by advancing
/// along both rings, at each step choosing the diagonal that maximizes the
/// minimum triangle angle.
fn march_annulus(
    vertices: &[[f64; 2]],
    inner: &[usize],
    outer: &[usize],
    element_nodes: &mut Vec<usize>,
) {
    let (m, n) = (inner.len(), outer.len());
    let (mut i, mut j) = (0usize, 0usize);
    while i < m || j < n {
        let adv_inner_tri = if i < m {
            Some([inner[i % m], outer[j % n], inner[(i + 1) % m]])
        } else {
            None
        };
        let adv_outer_tri = if j < n {
            Some([inner[i % m], outer[j % n], outer[(j + 1) % n]])
        } else {
            None
        };
        let advance_outer = match (adv_inner_tri, adv_outer_tri) {
            (Some(a), Some(b)) => {
                let qa = min_angle(vertices[a[0]], vertices[a[1]], vertices[a[2]]);
                let qb = min_angle(vertices[b[0]], vertices[b[1]], vertices[b[2]]);
                qb >= qa
            }
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (None, None) => unreachable!(),
        };
        let tri = if advance_outer {
            j += 1;
            adv_outer_tri.unwrap()
        } else {
            i += 1;
            adv_inner_tri.unwrap()
        };
        // Normalize to counter-clockwise orientation.
        let area = 0.5
            * ((vertices[tri[1]][0] - vertices[tri[0]][0]) * (vertices[tri[2]][1] - vertices[tri[0]][1])
                - (vertices[tri[2]][0] - vertices[tri[0]][0]) * (vertices[tri[1]][1] - vertices[tri[0]][1]));
        if area >= 0.0 {
            element_nodes.extend_from_slice(&tri);
        } else {
            element_nodes.extend_from_slice(&[tri[0], tri[2], tri[1]]);
        }
    }
}

fn min_angle(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2]) -> f64 {
    let angle = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| {
        let u = sub(b, a);
        let v = sub(c, a);
        let cosv = dot(u, v) / (norm(u) * norm(v));
        cosv.clamp(-1.0, 1.0).acos()
    };
    angle(p0, p1, p2).min(angle(p1, p2, p0)).min(angle(p2, p0, p1))
}

pub(crate) fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub(crate) fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn sorted_pair(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Distance from an interior point to the boundary of a convex polygon given
/// as a CCW vertex loop.
pub(crate) fn distance_to_polygon(x: [f64; 2], poly: &[[f64; 2]]) -> f64 {
    let mut d = f64::INFINITY;
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        let e = sub(q, p);
        let t = (dot(sub(x, p), e) / dot(e, e)).clamp(0.0, 1.0);
        let foot = [p[0] + t * e[0], p[1] + t * e[1]];
        d = d.min(norm(sub(x, foot)));
    }
    d
}

fn triangles_strictly_disjoint(t1: &[[f64; 2]], t2: &[[f64; 2]], tol: f64) -> bool {
    // Separating axis test over both triangles' edge normals.
    let mut axes = Vec::with_capacity(6);
    for tri in [t1, t2] {
        for k in 0..3 {
            let e = sub(tri[(k + 1) % 3], tri[k]);
            axes.push([-e[1], e[0]]);
        }
    }
    for ax in axes {
        let proj = |tri: &[[f64; 2]]| {
            let vals: Vec<f64> = tri.iter().map(|&p| dot(p, ax)).collect();
            (vals.iter().cloned().fold(f64::INFINITY, f64::min), vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        };
        let (min1, max1) = proj(t1);
        let (min2, max2) = proj(t2);
        let scale = norm(ax).max(1e-300);
        if min2 - max1 > tol * scale || min1 - max2 > tol * scale {
            return true;
        }
    }
    false
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2], tol: f64) -> bool {
    let d1 = cross(sub(b, a), sub(c, a));
    let d2 = cross(sub(b, a), sub(d, a));
    let d3 = cross(sub(d, c), sub(a, c));
    let d4 = cross(sub(d, c), sub(b, c));
    let scale = (norm(sub(b, a)) * norm(sub(d, c))).max(1e-300);
    let (t1, t2, t3, t4) = (d1 / scale, d2 / scale, d3 / scale, d4 / scale);
    t1 * t2 < -tol * tol && t3 * t4 < -tol * tol
}

fn point_in_triangle(x: [f64; 2], tri: &[[f64; 2]], tol: f64) -> bool {
    let mut signs = [0.0; 3];
    for k in 0..3 {
        signs[k] = cross(sub(tri[(k + 1) % 3], tri[k]), sub(x, tri[k]));
    }
    let scale: f64 = signs.iter().map(|s| s.abs()).fold(1e-300, f64::max);
    signs.iter().all(|&s| s / scale > tol) || signs.iter().all(|&s| s / scale < -tol)
}
