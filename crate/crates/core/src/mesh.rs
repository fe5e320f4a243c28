//! Coarse simplicial meshes, fine face partitions and element layers.
//!
//! Elements are counter-clockwise triangles. Local edge `k` of an element
//! runs from local vertex `k` to local vertex `(k + 1) % 3`. Every coarse
//! face stores an orientation: its vertices `(a, b)` are listed in the
//! traversal order of the *left* element, and the unit normal `n_F` points
//! out of the left element (out of the domain for boundary faces).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Default bound on circumradius / inradius accepted by the loader.
pub const DEFAULT_SHAPE_BOUND: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn unit() -> Self {
        Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    /// Endpoints in the traversal order of the left element.
    pub vertices: [usize; 2],
    pub left: usize,
    pub right: Option<usize>,
    /// Unit normal pointing out of `left`.
    pub normal: Point,
    pub length: f64,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.right.is_none()
    }

    /// Incident elements, left first.
    pub fn elements(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.left).chain(self.right)
    }

    /// `+1` if the face normal points out of `element`, `-1` if it points in.
    pub fn sign(&self, element: usize) -> f64 {
        if element == self.left {
            1.0
        } else {
            debug_assert_eq!(self.right, Some(element));
            -1.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoarseMesh {
    pub vertices: Vec<Point>,
    pub elements: Vec<[usize; 3]>,
    pub faces: Vec<Face>,
    /// `element_faces[e][k]` is the face on local edge `k` of element `e`.
    pub element_faces: Vec<[usize; 3]>,
    vertex_elements: Vec<Vec<usize>>,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

fn signed_area(p: [Point; 3]) -> f64 {
    let u = sub(p[1], p[0]);
    let v = sub(p[2], p[0]);
    0.5 * (u[0] * v[1] - u[1] * v[0])
}

/// Circumradius over inradius of a triangle.
pub fn shape_ratio(p: [Point; 3]) -> f64 {
    let a = norm(sub(p[1], p[0]));
    let b = norm(sub(p[2], p[1]));
    let c = norm(sub(p[0], p[2]));
    let area = signed_area(p).abs();
    let circum = a * b * c / (4.0 * area);
    let inr = 2.0 * area / (a + b + c);
    circum / inr
}

impl CoarseMesh {
    /// Builds the face structure for a list of triangles and validates it.
    pub fn from_triangles(
        vertices: Vec<Point>,
        mut elements: Vec<[usize; 3]>,
        shape_bound: f64,
    ) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::InvalidMesh("no elements".into()));
        }
        for (e, tri) in elements.iter_mut().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidMesh(format!(
                    "element {e} references a missing vertex"
                )));
            }
            let p = tri.map(|v| vertices[v]);
            let area = signed_area(p);
            let scale = norm(sub(p[1], p[0])).max(norm(sub(p[2], p[0])));
            if area.abs() <= 1e-14 * scale * scale {
                return Err(Error::InvalidMesh(format!("element {e} is degenerate")));
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
            let ratio = shape_ratio(tri.map(|v| vertices[v]));
            if ratio > shape_bound {
                return Err(Error::InvalidMesh(format!(
                    "element {e} has shape ratio {ratio:.3} above bound {shape_bound}"
                )));
            }
        }

        let mut faces: Vec<Face> = Vec::new();
        let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
        let mut element_faces = vec![[usize::MAX; 3]; elements.len()];
        for (e, tri) in elements.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                match lookup.get(&key) {
                    Some(&f) => {
                        let face = &mut faces[f];
                        if face.right.is_some() {
                            return Err(Error::InvalidMesh(format!(
                                "edge ({a}, {b}) is shared by more than two elements"
                            )));
                        }
                        if face.vertices != [b, a] {
                            return Err(Error::InvalidMesh(format!(
                                "inconsistent orientation across edge ({a}, {b})"
                            )));
                        }
                        face.right = Some(e);
                        element_faces[e][k] = f;
                    }
                    None => {
                        let d = sub(vertices[b], vertices[a]);
                        let length = norm(d);
                        faces.push(Face {
                            vertices: [a, b],
                            left: e,
                            right: None,
                            normal: [d[1] / length, -d[0] / length],
                            length,
                        });
                        lookup.insert(key, faces.len() - 1);
                        element_faces[e][k] = faces.len() - 1;
                    }
                }
            }
        }

        let mut vertex_elements = vec![Vec::new(); vertices.len()];
        for (e, tri) in elements.iter().enumerate() {
            for &v in tri {
                vertex_elements[v].push(e);
            }
        }

        let mesh = CoarseMesh {
            vertices,
            elements,
            faces,
            element_faces,
            vertex_elements,
        };
        if !mesh.is_face_connected() {
            return Err(Error::InvalidMesh("mesh is not connected".into()));
        }
        Ok(mesh)
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn element_points(&self, e: usize) -> [Point; 3] {
        self.elements[e].map(|v| self.vertices[v])
    }

    pub fn element_area(&self, e: usize) -> f64 {
        signed_area(self.element_points(e))
    }

    pub fn element_centroid(&self, e: usize) -> Point {
        let p = self.element_points(e);
        [
            (p[0][0] + p[1][0] + p[2][0]) / 3.0,
            (p[0][1] + p[1][1] + p[2][1]) / 3.0,
        ]
    }

    /// Barycentric-style coordinates `(s, t)` of `p` with
    /// `p = v0 + s (v1 - v0) + t (v2 - v0)`.
    pub fn reference_coords(&self, e: usize, p: Point) -> (f64, f64) {
        let [a, b, c] = self.element_points(e);
        let (d1, d2) = ([b[0] - a[0], b[1] - a[1]], [c[0] - a[0], c[1] - a[1]]);
        let det = d1[0] * d2[1] - d1[1] * d2[0];
        let (x, y) = (p[0] - a[0], p[1] - a[1]);
        ((x * d2[1] - y * d2[0]) / det, (d1[0] * y - d1[1] * x) / det)
    }

    /// First element containing `p` up to `tol` in reference coordinates.
    pub fn locate(&self, p: Point, tol: f64) -> Option<usize> {
        (0..self.n_elements()).find(|&e| {
            let (s, t) = self.reference_coords(e, p);
            s >= -tol && t >= -tol && s + t <= 1.0 + tol
        })
    }

    /// Perimeter `|∂τ|`.
    pub fn element_perimeter(&self, e: usize) -> f64 {
        self.element_faces[e]
            .iter()
            .map(|&f| self.faces[f].length)
            .sum()
    }

    /// Largest element diameter (the coarse mesh size `H`).
    pub fn mesh_size(&self) -> f64 {
        self.faces.iter().map(|f| f.length).fold(0.0, f64::max)
    }

    /// Elements sharing a face with `e`.
    pub fn face_neighbors(&self, e: usize) -> impl Iterator<Item = usize> + '_ {
        self.element_faces[e].iter().filter_map(move |&f| {
            let face = &self.faces[f];
            if face.left == e {
                face.right
            } else {
                Some(face.left)
            }
        })
    }

    pub fn touches_boundary(&self, e: usize) -> bool {
        self.element_faces[e]
            .iter()
            .any(|&f| self.faces[f].is_boundary())
    }

    fn is_face_connected(&self) -> bool {
        let n = self.n_elements();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(e) = stack.pop() {
            for nb in self.face_neighbors(e) {
                if !seen[nb] {
                    seen[nb] = true;
                    count += 1;
                    stack.push(nb);
                }
            }
        }
        count == n
    }

    /// Elements whose closure meets the closure of `e` (including `e`).
    pub fn closure_neighbors(&self, e: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.elements[e]
            .iter()
            .flat_map(|&v| self.vertex_elements[v].iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Structured triangulation of a rectangle: each of the `nx × ny` cells is
/// split along its lower-left to upper-right diagonal.
pub fn build_structured_mesh(nx: usize, ny: usize, domain: Rect) -> Result<CoarseMesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid dimensions must be positive, got {nx} x {ny}"
        )));
    }
    if !(domain.width() > 0.0 && domain.height() > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "domain must have positive side lengths, got {domain:?}"
        )));
    }
    let dx = domain.width() / nx as f64;
    let dy = domain.height() / ny as f64;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([domain.x0 + i as f64 * dx, domain.y0 + j as f64 * dy]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut elements = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            elements.push([a, b, c]);
            elements.push([a, c, d]);
        }
    }
    CoarseMesh::from_triangles(vertices, elements, f64::INFINITY)
}

/// Parses the line-oriented mesh format:
///
/// ```text
/// # comment
/// vertices <n>
/// <x> <y>            (n lines)
/// elements <m>
/// <a> <b> <c>        (m lines, zero-based vertex indices)
/// ```
pub fn parse_mesh(text: &str, shape_bound: f64) -> Result<CoarseMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    fn header<'a>(
        lines: &mut impl Iterator<Item = (usize, &'a str)>,
        keyword: &str,
    ) -> Result<usize> {
        let (ln, l) = lines.next().ok_or(Error::MeshFormat {
            line: 0,
            message: format!("missing '{keyword}' section"),
        })?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(keyword) {
            return Err(Error::MeshFormat {
                line: ln,
                message: format!("expected '{keyword} <count>'"),
            });
        }
        parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or(Error::MeshFormat {
                line: ln,
                message: "bad count".into(),
            })
    }

    fn row<'a, T: std::str::FromStr, const N: usize>(
        lines: &mut impl Iterator<Item = (usize, &'a str)>,
    ) -> Result<[T; N]> {
        let (ln, l) = lines.next().ok_or(Error::MeshFormat {
            line: 0,
            message: "unexpected end of file".into(),
        })?;
        let vals: Vec<T> = l
            .split_whitespace()
            .map(|t| t.parse::<T>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::MeshFormat {
                line: ln,
                message: format!("cannot parse '{l}'"),
            })?;
        vals.try_into().map_err(|_| Error::MeshFormat {
            line: ln,
            message: format!("expected {N} values"),
        })
    }

    let nv = header(&mut lines, "vertices")?;
    let vertices = (0..nv)
        .map(|_| row::<f64, 2>(&mut lines))
        .collect::<Result<Vec<_>>>()?;
    let ne = header(&mut lines, "elements")?;
    let elements = (0..ne)
        .map(|_| row::<usize, 3>(&mut lines))
        .collect::<Result<Vec<_>>>()?;
    if let Some((ln, _)) = lines.next() {
        return Err(Error::MeshFormat {
            line: ln,
            message: "trailing content".into(),
        });
    }
    CoarseMesh::from_triangles(vertices, elements, shape_bound)
}

pub fn write_mesh(mesh: &CoarseMesh) -> String {
    let mut out = format!("vertices {}\n", mesh.vertices.len());
    for v in &mesh.vertices {
        out.push_str(&format!("{:.17e} {:.17e}\n", v[0], v[1]));
    }
    out.push_str(&format!("elements {}\n", mesh.elements.len()));
    for t in &mesh.elements {
        out.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
    }
    out
}

/// Uniform barycentric lattice on the reference triangle, `n` segments per
/// edge. Node `(i, j)` sits at `v0 + i/n (v1 - v0) + j/n (v2 - v0)`.
#[derive(Debug, Clone)]
pub struct ReferenceLattice {
    pub n: usize,
    pub nodes: Vec<(usize, usize)>,
    pub cells: Vec<[usize; 3]>,
    /// Node indices along local edge `k`, in traversal order (n + 1 each).
    pub edges: [Vec<usize>; 3],
    pub interior_nodes: Vec<usize>,
}

impl ReferenceLattice {
    pub fn new(level: u32) -> Self {
        let n = 1usize << level;
        let mut index = vec![vec![usize::MAX; n + 1]; n + 1];
        let mut nodes = Vec::new();
        for j in 0..=n {
            for i in 0..=(n - j) {
                index[i][j] = nodes.len();
                nodes.push((i, j));
            }
        }
        let mut cells = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..(n - j) {
                cells.push([index[i][j], index[i + 1][j], index[i][j + 1]]);
                if i + j + 1 < n {
                    cells.push([index[i + 1][j], index[i + 1][j + 1], index[i][j + 1]]);
                }
            }
        }
        let edges = [
            (0..=n).map(|t| index[t][0]).collect(),
            (0..=n).map(|t| index[n - t][t]).collect(),
            (0..=n).map(|t| index[0][n - t]).collect(),
        ];
        let interior_nodes = nodes
            .iter()
            .enumerate()
            .filter(|(_, &(i, j))| i > 0 && j > 0 && i + j < n)
            .map(|(k, _)| k)
            .collect();
        ReferenceLattice {
            n,
            nodes,
            cells,
            edges,
            interior_nodes,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn map(&self, corners: [Point; 3]) -> Vec<Point> {
        let n = self.n as f64;
        self.nodes
            .iter()
            .map(|&(i, j)| {
                let (s, t) = (i as f64 / n, j as f64 / n);
                [
                    corners[0][0]
                        + s * (corners[1][0] - corners[0][0])
                        + t * (corners[2][0] - corners[0][0]),
                    corners[0][1]
                        + s * (corners[1][1] - corners[0][1])
                        + t * (corners[2][1] - corners[0][1]),
                ]
            })
            .collect()
    }
}

/// Where a local fine face of an element lives in the global trace vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFineFace {
    pub global: usize,
    pub face: usize,
    /// Sub-face index along the coarse face, in face orientation.
    pub sub: usize,
    /// `+1` if `n_F` points out of the element.
    pub sign: f64,
}

/// The fine face partition `F_h` and the interior triangulations.
#[derive(Debug, Clone)]
pub struct FinePartition {
    pub face_level: u32,
    pub interior_level: u32,
    pub subfaces: usize,
    pub lattice: ReferenceLattice,
    /// Largest fine sub-face length.
    pub h: f64,
    n_faces: usize,
    /// Per element, `3 * subfaces` entries ordered by local edge, then by
    /// position along the edge in element traversal order.
    local: Vec<Vec<LocalFineFace>>,
}

/// Splits each coarse face into `2^level` fine faces; interiors are refined
/// one level further.
pub fn refine_faces(mesh: &CoarseMesh, level: u32) -> FinePartition {
    FinePartition::new(mesh, level, level + 1).expect("interior level is face level + 1")
}

impl FinePartition {
    pub fn new(mesh: &CoarseMesh, face_level: u32, interior_level: u32) -> Result<Self> {
        if interior_level < face_level + 1 {
            return Err(Error::InvalidArgument(format!(
                "interior level {interior_level} must exceed face level {face_level}"
            )));
        }
        let subfaces = 1usize << face_level;
        let local = (0..mesh.n_elements())
            .map(|e| {
                let mut rows = Vec::with_capacity(3 * subfaces);
                for k in 0..3 {
                    let f = mesh.element_faces[e][k];
                    let face = &mesh.faces[f];
                    let left = face.left == e;
                    for m in 0..subfaces {
                        let sub = if left { m } else { subfaces - 1 - m };
                        rows.push(LocalFineFace {
                            global: f * subfaces + sub,
                            face: f,
                            sub,
                            sign: if left { 1.0 } else { -1.0 },
                        });
                    }
                }
                rows
            })
            .collect();
        let h = mesh.mesh_size() / subfaces as f64;
        Ok(FinePartition {
            face_level,
            interior_level,
            subfaces,
            lattice: ReferenceLattice::new(interior_level),
            h,
            n_faces: mesh.n_faces(),
            local,
        })
    }

    /// Dimension of `Λ_h`.
    pub fn n_fine_faces(&self) -> usize {
        self.n_faces * self.subfaces
    }

    pub fn local_faces(&self, e: usize) -> &[LocalFineFace] {
        &self.local[e]
    }

    pub fn fine_face_length(&self, mesh: &CoarseMesh, global: usize) -> f64 {
        mesh.faces[global / self.subfaces].length / self.subfaces as f64
    }

    /// Endpoints of a fine sub-face, in face orientation.
    pub fn fine_face_endpoints(&self, mesh: &CoarseMesh, global: usize) -> [Point; 2] {
        let face = &mesh.faces[global / self.subfaces];
        let sub = global % self.subfaces;
        let a = mesh.vertices[face.vertices[0]];
        let b = mesh.vertices[face.vertices[1]];
        let lerp = |t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        let n = self.subfaces as f64;
        [lerp(sub as f64 / n), lerp((sub + 1) as f64 / n)]
    }

    /// Physical coordinates of the interior nodes of element `e`.
    pub fn element_nodes(&self, mesh: &CoarseMesh, e: usize) -> Vec<Point> {
        self.lattice.map(mesh.element_points(e))
    }

    /// Lattice segments per fine sub-face.
    pub fn segments_per_subface(&self) -> usize {
        self.lattice.n / self.subfaces
    }
}

/// Seed of a layer neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Seed {
    Element(usize),
    Face(usize),
}

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Seed::Element(e) => write!(f, "element {e}"),
            Seed::Face(k) => write!(f, "face {k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementSet {
    pub seed: Seed,
    pub layers: usize,
    /// Sorted element indices.
    pub elements: Vec<usize>,
    mask: Vec<bool>,
}

impl ElementSet {
    pub fn contains(&self, e: usize) -> bool {
        self.mask.get(e).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn is_subset_of(&self, other: &ElementSet) -> bool {
        self.elements.iter().all(|&e| other.contains(e))
    }

    /// Faces all of whose incident elements lie in the set.
    pub fn enclosed_faces(&self, mesh: &CoarseMesh) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .elements
            .iter()
            .flat_map(|&e| mesh.element_faces[e])
            .filter(|&f| mesh.faces[f].elements().all(|e| self.contains(e)))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// `T_j(seed)`: `T_0 = ∅`, `T_1` is the seed element (or the elements
/// incident to the seed face), and each further layer adds every element
/// whose closure meets the closure of the previous set.
pub fn element_layers(mesh: &CoarseMesh, seed: Seed, j: usize) -> Result<ElementSet> {
    let n = mesh.n_elements();
    let mut mask = vec![false; n];
    if j > 0 {
        match seed {
            Seed::Element(e) if e < n => mask[e] = true,
            Seed::Face(f) if f < mesh.n_faces() => {
                for e in mesh.faces[f].elements() {
                    mask[e] = true;
                }
            }
            _ => {
                return Err(Error::InvalidArgument(format!("unknown seed {seed}")));
            }
        }
        let mut frontier: Vec<usize> = (0..n).filter(|&e| mask[e]).collect();
        for _ in 1..j {
            let mut next = Vec::new();
            for &e in &frontier {
                for nb in mesh.closure_neighbors(e) {
                    if !mask[nb] {
                        mask[nb] = true;
                        next.push(nb);
                    }
                }
            }
            if next.is_empty() {
                break;
            }
            frontier = next;
        }
    } else if !matches!(seed, Seed::Element(e) if e < n)
        && !matches!(seed, Seed::Face(f) if f < mesh.n_faces())
    {
        return Err(Error::InvalidArgument(format!("unknown seed {seed}")));
    }
    let elements = (0..n).filter(|&e| mask[e]).collect();
    Ok(ElementSet {
        seed,
        layers: j,
        elements,
        mask,
    })
}

/// Smallest `j` with `T_j(seed)` equal to the whole mesh.
pub fn saturation_layers(mesh: &CoarseMesh, seed: Seed) -> Result<usize> {
    let mut j = 1;
    loop {
        if element_layers(mesh, seed, j)?.len() == mesh.n_elements() {
            return Ok(j);
        }
        j += 1;
    }
}

/// Smallest `j` that saturates every element and face seed.
pub fn global_saturation(mesh: &CoarseMesh) -> usize {
    let elems = (0..mesh.n_elements()).map(Seed::Element);
    let faces = (0..mesh.n_faces()).map(Seed::Face);
    elems
        .chain(faces)
        .map(|s| saturation_layers(mesh, s).expect("seed exists"))
        .max()
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structured_counts() {
        for (nx, ny, ne, nf) in [(1, 1, 2, 5), (2, 2, 8, 16), (4, 4, 32, 56), (3, 2, 12, 23)] {
            let m = build_structured_mesh(nx, ny, Rect::unit()).unwrap();
            assert_eq!(m.n_elements(), ne);
            assert_eq!(m.n_faces(), nf);
            assert_eq!(nf, 3 * nx * ny + nx + ny);
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(
            build_structured_mesh(0, 2, Rect::unit()),
            Err(Error::InvalidArgument(_))
        ));
        let flat = Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: -1.0,
        };
        assert!(build_structured_mesh(2, 2, flat).is_err());
    }

    #[test]
    fn face_orientation_and_incidence() {
        let m = build_structured_mesh(3, 3, Rect::unit()).unwrap();
        for (f, face) in m.faces.iter().enumerate() {
            assert!((norm(face.normal) - 1.0).abs() < 1e-14);
            let c = m.element_centroid(face.left);
            let a = m.vertices[face.vertices[0]];
            let to_face = sub(a, c);
            assert!(to_face[0] * face.normal[0] + to_face[1] * face.normal[1] > 0.0);
            if let Some(r) = face.right {
                let cr = m.element_centroid(r);
                let to_face = sub(a, cr);
                assert!(to_face[0] * face.normal[0] + to_face[1] * face.normal[1] < 0.0);
            }
            let count = m.element_faces.iter().filter(|fs| fs.contains(&f)).count();
            assert_eq!(count, if face.is_boundary() { 1 } else { 2 });
        }
    }

    #[test]
    fn fine_partition_counts_and_measures() {
        let m = build_structured_mesh(1, 1, Rect::unit()).unwrap();
        let p0 = refine_faces(&m, 0);
        assert_eq!(p0.n_fine_faces(), m.n_faces());
        let p2 = refine_faces(&m, 2);
        assert_eq!(p2.n_fine_faces(), 20);
        for f in 0..m.n_faces() {
            let total: f64 = (0..p2.subfaces)
                .map(|s| p2.fine_face_length(&m, f * p2.subfaces + s))
                .sum();
            assert!((total - m.faces[f].length).abs() <= 1e-12 * m.faces[f].length);
        }
    }

    #[test]
    fn lattice_boundary_matches_fine_faces() {
        let m = build_structured_mesh(2, 2, Rect::unit()).unwrap();
        let p = refine_faces(&m, 3);
        let r = p.segments_per_subface();
        for e in 0..m.n_elements() {
            let nodes = p.element_nodes(&m, e);
            for (row, lf) in p.local_faces(e).iter().enumerate() {
                let (k, pos) = (row / p.subfaces, row % p.subfaces);
                let start = nodes[p.lattice.edges[k][pos * r]];
                let end = nodes[p.lattice.edges[k][(pos + 1) * r]];
                let [a, b] = p.fine_face_endpoints(&m, lf.global);
                let (a, b) = if lf.sign > 0.0 { (a, b) } else { (b, a) };
                assert!(norm(sub(start, a)) < 1e-13 && norm(sub(end, b)) < 1e-13);
            }
        }
    }

    #[test]
    fn lattice_counts() {
        let l = ReferenceLattice::new(2);
        assert_eq!(l.n_nodes(), 15);
        assert_eq!(l.n_cells(), 16);
        assert_eq!(l.interior_nodes.len(), 3);
    }

    fn brute_force_layer(m: &CoarseMesh, prev: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        for e in 0..m.n_elements() {
            let hit = prev
                .iter()
                .any(|&p| m.elements[e].iter().any(|v| m.elements[p].contains(v)));
            if hit {
                out.push(e);
            }
        }
        out
    }

    #[test]
    fn layers_match_brute_force() {
        let m = build_structured_mesh(4, 4, Rect::unit()).unwrap();
        assert!(element_layers(&m, Seed::Element(0), 0).unwrap().is_empty());
        assert_eq!(
            element_layers(&m, Seed::Element(5), 1).unwrap().elements,
            vec![5]
        );
        let t1 = element_layers(&m, Seed::Element(0), 1).unwrap();
        let t2 = element_layers(&m, Seed::Element(0), 2).unwrap();
        assert_eq!(t2.elements, brute_force_layer(&m, &t1.elements));
        let t3 = element_layers(&m, Seed::Element(0), 3).unwrap();
        assert_eq!(t3.elements, brute_force_layer(&m, &t2.elements));
    }

    #[test]
    fn face_seed_first_layer() {
        let m = build_structured_mesh(2, 2, Rect::unit()).unwrap();
        for (f, face) in m.faces.iter().enumerate() {
            let t1 = element_layers(&m, Seed::Face(f), 1).unwrap();
            let mut expect: Vec<usize> = face.elements().collect();
            expect.sort();
            assert_eq!(t1.elements, expect);
        }
        assert!(element_layers(&m, Seed::Face(999), 2).is_err());
        assert!(element_layers(&m, Seed::Element(999), 0).is_err());
    }

    #[test]
    fn layers_nest_and_saturate() {
        let m = build_structured_mesh(4, 4, Rect::unit()).unwrap();
        for seed in [Seed::Element(0), Seed::Element(13), Seed::Face(7)] {
            let js = saturation_layers(&m, seed).unwrap();
            assert!(js <= m.n_elements());
            for j in 0..js + 2 {
                let a = element_layers(&m, seed, j).unwrap();
                let b = element_layers(&m, seed, j + 1).unwrap();
                assert!(a.is_subset_of(&b));
                if j >= 1 && j < js {
                    assert!(b.len() > a.len());
                }
            }
        }
    }

    #[test]
    fn mesh_file_round_trip_and_errors() {
        let m = build_structured_mesh(2, 1, Rect::unit()).unwrap();
        let back = parse_mesh(&write_mesh(&m), DEFAULT_SHAPE_BOUND).unwrap();
        assert_eq!(back.elements, m.elements);
        assert_eq!(back.n_faces(), m.n_faces());

        let bad = "vertices 3\n0 0\n1 0\n2 0\nelements 1\n0 1 2\n";
        assert!(matches!(parse_mesh(bad, 20.0), Err(Error::InvalidMesh(_))));
        let garbled = "vertices 3\n0 0\n1 x\n0 1\nelements 1\n0 1 2\n";
        assert!(matches!(
            parse_mesh(garbled, 20.0),
            Err(Error::MeshFormat { line: 3, .. })
        ));
        // clockwise input is reoriented
        let cw = "vertices 3\n0 0\n0 1\n1 0\nelements 1\n0 1 2\n";
        let tri = parse_mesh(cw, 20.0).unwrap();
        assert!(tri.element_area(0) > 0.0);
        let sliver = "vertices 3\n0 0\n1 0\n0.5 0.01\nelements 1\n0 1 2\n";
        assert!(parse_mesh(sliver, 20.0).is_err());
    }
}
