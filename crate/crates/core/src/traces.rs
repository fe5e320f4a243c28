//! The multiplier space `Λ_h` and its decomposition `Λ⁰ ⊕ Λ̃_h⁰ ⊕ Λ̃_h^f`.
//!
//! A [`TraceVector`] stores one value per global fine face, relative to the
//! face normal `n_F`. The value seen from element `τ` is `sign(τ, F) * value`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BrokenField, PiecewiseConstant};
use crate::linalg::SparseCholesky;
use crate::mesh::{CoarseMesh, FinePartition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceVector {
    pub values: Vec<f64>,
}

impl TraceVector {
    pub fn zeros(n: usize) -> Self {
        TraceVector {
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values in the local fine-face order of `e`, as seen from `e`.
    pub fn element_side(&self, part: &FinePartition, e: usize) -> Vec<f64> {
        part.local_faces(e)
            .iter()
            .map(|lf| lf.sign * self.values[lf.global])
            .collect()
    }

    /// Values in the local fine-face order of `e`, relative to `n_F`.
    pub fn gather(&self, part: &FinePartition, e: usize) -> Vec<f64> {
        part.local_faces(e)
            .iter()
            .map(|lf| self.values[lf.global])
            .collect()
    }

    /// Adds `local` (local order of `e`, relative to `n_F`) into `self`.
    pub fn scatter_add(&mut self, part: &FinePartition, e: usize, local: &[f64]) {
        for (lf, v) in part.local_faces(e).iter().zip(local) {
            self.values[lf.global] += v;
        }
    }

    pub fn dot(&self, other: &TraceVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn axpy(&mut self, a: f64, x: &TraceVector) {
        for (y, v) in self.values.iter_mut().zip(&x.values) {
            *y += a * v;
        }
    }

    pub fn add(&self, other: &TraceVector) -> TraceVector {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &TraceVector) -> TraceVector {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn scaled(&self, s: f64) -> TraceVector {
        TraceVector {
            values: self.values.iter().map(|v| s * v).collect(),
        }
    }

    /// The part of `self` living on coarse face `f` (zero elsewhere).
    pub fn restrict_to_face(&self, part: &FinePartition, f: usize) -> TraceVector {
        let mut out = TraceVector::zeros(self.len());
        let r = f * part.subfaces..(f + 1) * part.subfaces;
        out.values[r.clone()].copy_from_slice(&self.values[r]);
        out
    }

    /// `∫_F μ ds / |F|` for every coarse face.
    pub fn face_means(&self, part: &FinePartition) -> Vec<f64> {
        self.values
            .chunks(part.subfaces)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// CSV with header `index,value`, ordered by global fine-face index.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "index,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{i},{v:e}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split(',');
            let idx: Option<usize> = it.next().and_then(|s| s.trim().parse().ok());
            let val: Option<f64> = it.next().and_then(|s| s.trim().parse().ok());
            match (idx, val) {
                (Some(i), Some(v)) if i == values.len() => values.push(v),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "trace csv line {}: expected '{},<value>'",
                        n + 1,
                        values.len()
                    )))
                }
            }
        }
        Ok(TraceVector { values })
    }

    /// Little-endian `u64` length followed by `f64` values.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let n = u64::from_le_bytes(len) as usize;
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Ok(TraceVector { values })
    }
}

/// Boundary integrals `∫_a v ds` of a P1 function over the local fine faces
/// of `e` (trapezoid rule per lattice segment, exact for P1).
pub fn boundary_integrals(
    mesh: &CoarseMesh,
    part: &FinePartition,
    e: usize,
    v: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; 3 * part.subfaces];
    for_each_segment(mesh, part, e, |row, a, b, w| {
        out[row] += w * (v[a] + v[b]);
    });
    out
}

/// `G_τ`: rows are local fine faces, columns lattice nodes, entries `∫_a φ_i ds`.
pub fn boundary_matrix(mesh: &CoarseMesh, part: &FinePartition, e: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(3 * part.subfaces, part.lattice.n_nodes());
    for_each_segment(mesh, part, e, |row, a, b, w| {
        g[(row, a)] += w;
        g[(row, b)] += w;
    });
    g
}

/// Calls `f(row, node_a, node_b, half_length)` for every boundary lattice segment.
fn for_each_segment(
    mesh: &CoarseMesh,
    part: &FinePartition,
    e: usize,
    mut f: impl FnMut(usize, usize, usize, f64),
) {
    let sps = part.segments_per_subface();
    let n = part.lattice.n;
    for k in 0..3 {
        let len = mesh.faces[mesh.element_faces[e][k]].length;
        let half = 0.5 * len / n as f64;
        let nodes = &part.lattice.edges[k];
        for s in 0..n {
            f(k * part.subfaces + s / sps, nodes[s], nodes[s + 1], half);
        }
    }
}

/// `r` with `(μ, v)_{∂T_H} = μ · r` for every trace `μ`.
pub fn trace_functional(mesh: &CoarseMesh, part: &FinePartition, v: &BrokenField) -> TraceVector {
    let mut r = TraceVector::zeros(part.n_fine_faces());
    for e in 0..mesh.n_elements() {
        let ints = boundary_integrals(mesh, part, e, &v.elements[e]);
        for (lf, i) in part.local_faces(e).iter().zip(ints) {
            r.values[lf.global] += lf.sign * i;
        }
    }
    r
}

/// `(μ, v)_{∂T_H} = Σ_τ (μ, v)_{∂τ}` for a broken P1 function.
pub fn pairing(mesh: &CoarseMesh, part: &FinePartition, mu: &TraceVector, v: &BrokenField) -> f64 {
    (0..mesh.n_elements())
        .map(|e| {
            let ints = boundary_integrals(mesh, part, e, &v.elements[e]);
            mu.element_side(part, e)
                .iter()
                .zip(ints)
                .map(|(m, i)| m * i)
                .sum::<f64>()
        })
        .sum()
}

/// `(μ, v⁰)_{∂T_H}` for a piecewise constant.
pub fn pairing_constant(
    mesh: &CoarseMesh,
    part: &FinePartition,
    mu: &TraceVector,
    v: &PiecewiseConstant,
) -> f64 {
    element_pairings(mesh, part, mu)
        .iter()
        .zip(&v.0)
        .map(|(a, b)| a * b)
        .sum()
}

/// `(μ, 1_τ)_{∂τ}` for every element.
pub fn element_pairings(mesh: &CoarseMesh, part: &FinePartition, mu: &TraceVector) -> Vec<f64> {
    (0..mesh.n_elements())
        .map(|e| {
            part.local_faces(e)
                .iter()
                .map(|lf| lf.sign * mu.values[lf.global] * part.fine_face_length(mesh, lf.global))
                .sum()
        })
        .collect()
}

/// `λ⁰_i`: `+1` on `∂τ_i` seen from `τ_i`, `-1` seen from its neighbours.
pub fn lambda0(mesh: &CoarseMesh, part: &FinePartition, i: usize) -> TraceVector {
    let mut c = vec![0.0; mesh.n_elements()];
    c[i] = 1.0;
    lambda0_combination(mesh, part, &c)
}

pub fn lambda0_basis(mesh: &CoarseMesh, part: &FinePartition) -> Vec<TraceVector> {
    (0..mesh.n_elements())
        .map(|i| lambda0(mesh, part, i))
        .collect()
}

/// `Σ_i c_i λ⁰_i`; constant on every coarse face.
pub fn lambda0_combination(mesh: &CoarseMesh, part: &FinePartition, c: &[f64]) -> TraceVector {
    let values = mesh
        .faces
        .iter()
        .flat_map(|face| {
            let v = c[face.left] - face.right.map_or(0.0, |r| c[r]);
            std::iter::repeat_n(v, part.subfaces)
        })
        .collect();
    TraceVector { values }
}

/// Entries of the symmetric matrix `Z_ij = (λ⁰_i, 1_{τ_j})_{∂T_H}`.
pub fn v0_pairing_entries(mesh: &CoarseMesh) -> Vec<(usize, usize, f64)> {
    let mut entries: Vec<(usize, usize, f64)> = (0..mesh.n_elements())
        .map(|e| (e, e, mesh.element_perimeter(e)))
        .collect();
    for face in &mesh.faces {
        if let Some(r) = face.right {
            entries.push((face.left, r, -face.length));
            entries.push((r, face.left, -face.length));
        }
    }
    entries
}

pub fn v0_pairing_dense(mesh: &CoarseMesh) -> DMatrix<f64> {
    let n = mesh.n_elements();
    let mut z = DMatrix::zeros(n, n);
    for (i, j, v) in v0_pairing_entries(mesh) {
        z[(i, j)] += v;
    }
    z
}

/// Structural report on `Z`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct V0PairingReport {
    pub diagonally_dominant: bool,
    /// Rows of boundary-touching elements are strictly dominant.
    pub strict_on_boundary: bool,
    pub irreducible: bool,
    /// `min_i (|Z_ii| - Σ_{j≠i} |Z_ij|)`.
    pub min_margin: f64,
}

pub fn check_v0_pairing(mesh: &CoarseMesh) -> V0PairingReport {
    let n = mesh.n_elements();
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n];
    let mut adj = vec![Vec::new(); n];
    for (i, j, v) in v0_pairing_entries(mesh) {
        if i == j {
            diag[i] += v;
        } else {
            off[i] += f64::abs(v);
            adj[i].push(j);
        }
    }
    let tol = 1e-12;
    let margin: Vec<f64> = (0..n).map(|i| diag[i].abs() - off[i]).collect();
    let diagonally_dominant = margin.iter().all(|&m| m >= -tol * mesh.mesh_size());
    let strict_on_boundary = (0..n)
        .filter(|&i| mesh.touches_boundary(i))
        .all(|i| margin[i] > tol * mesh.mesh_size());
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    V0PairingReport {
        diagonally_dominant,
        strict_on_boundary,
        irreducible: seen.iter().all(|&s| s),
        min_margin: margin.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// Orthonormal Haar wavelets spanning the zero-mean vectors of length `n`
/// (`n` a power of two); columns ordered coarse to fine.
pub fn haar_basis(n: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n.saturating_sub(1));
    let mut col = 0;
    let mut len = n;
    while len >= 2 {
        let s = 1.0 / (len as f64).sqrt();
        for block in 0..n / len {
            let start = block * len;
            for i in 0..len {
                w[(start + i, col)] = if i < len / 2 { s } else { -s };
            }
            col += 1;
        }
        len /= 2;
    }
    w
}

/// Bases and solvers for `Λ_h = Λ⁰ ⊕ Λ̃_h⁰ ⊕ Λ̃_h^f`.
pub struct SpaceDecomposition {
    z: SparseCholesky,
    /// Columns: per-coarse-face constants spanning `Λ̃_h⁰`.
    pub tilde0: DMatrix<f64>,
    /// Zero-mean basis of one coarse face, in face orientation.
    pub haar: DMatrix<f64>,
    pub n_elements: usize,
    pub n_faces: usize,
    pub subfaces: usize,
}

/// The three components of a trace.
#[derive(Debug, Clone)]
pub struct Decomposed {
    pub lambda0_coeffs: Vec<f64>,
    pub mu0: TraceVector,
    pub tilde0: TraceVector,
    pub fine: TraceVector,
}

impl SpaceDecomposition {
    pub fn new(mesh: &CoarseMesh, part: &FinePartition) -> Result<Self> {
        let n = mesh.n_elements();
        let z = SparseCholesky::new(n, &v0_pairing_entries(mesh))
            .map_err(|e| Error::MeshConnectivity(e.to_string()))?;
        let nf = mesh.n_faces();
        // Constraint D[τ, F] = sign(τ, F) |F|; Λ̃_h⁰ is its null space.
        let mut aug = DMatrix::zeros(nf, n + nf);
        for (f, face) in mesh.faces.iter().enumerate() {
            aug[(f, face.left)] = face.length;
            if let Some(r) = face.right {
                aug[(f, r)] = -face.length;
            }
            aug[(f, n + f)] = 1.0;
        }
        let q = aug.qr().q();
        let tilde0 = q.columns(n, nf - n).into_owned();
        let check = {
            let mut d = DMatrix::zeros(n, nf);
            for (f, face) in mesh.faces.iter().enumerate() {
                d[(face.left, f)] = face.length;
                if let Some(r) = face.right {
                    d[(r, f)] = -face.length;
                }
            }
            (d * &tilde0).amax()
        };
        if nf < n || check > 1e-10 * mesh.mesh_size() {
            return Err(Error::MeshConnectivity(format!(
                "face-constant complement has rank defect (residual {check:e})"
            )));
        }
        Ok(SpaceDecomposition {
            z,
            tilde0,
            haar: haar_basis(part.subfaces),
            n_elements: n,
            n_faces: nf,
            subfaces: part.subfaces,
        })
    }

    /// Solves `Z x = rhs` (`Z` is symmetric, so this also serves the transposed use).
    pub fn solve_v0_pairing(&self, rhs: &[f64]) -> Vec<f64> {
        self.z
            .solve(&DVector::from_column_slice(rhs))
            .as_slice()
            .to_vec()
    }

    pub fn dim_tilde0(&self) -> usize {
        self.tilde0.ncols()
    }

    /// Trace of the `k`-th `Λ̃_h⁰` basis vector.
    pub fn tilde0_vector(&self, k: usize) -> TraceVector {
        self.face_constants(self.tilde0.column(k).as_slice())
    }

    /// Trace equal to `c_F` on every fine face of coarse face `F`.
    pub fn face_constants(&self, c: &[f64]) -> TraceVector {
        TraceVector {
            values: c
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, self.subfaces))
                .collect(),
        }
    }

    pub fn decompose(
        &self,
        mesh: &CoarseMesh,
        part: &FinePartition,
        mu: &TraceVector,
    ) -> Decomposed {
        let rhs = element_pairings(mesh, part, mu);
        let coeffs = self.solve_v0_pairing(&rhs);
        let mu0 = lambda0_combination(mesh, part, &coeffs);
        let rest = mu.sub(&mu0);
        let tilde0 = self.face_constants(&rest.face_means(part));
        let fine = rest.sub(&tilde0);
        Decomposed {
            lambda0_coeffs: coeffs,
            mu0,
            tilde0,
            fine,
        }
    }
}

/// `max_τ |(μ, 1_τ)|` relative to `‖μ‖_∞ · H`.
pub fn tilde_violation(mesh: &CoarseMesh, part: &FinePartition, mu: &TraceVector) -> f64 {
    let scale = mu
        .values
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE)
        * mesh.mesh_size();
    element_pairings(mesh, part, mu)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        / scale
}

pub fn in_lambda_tilde(
    mesh: &CoarseMesh,
    part: &FinePartition,
    mu: &TraceVector,
    tol: f64,
) -> bool {
    tilde_violation(mesh, part, mu) <= tol
}

pub fn in_lambda_fine(part: &FinePartition, mu: &TraceVector, tol: f64) -> bool {
    let scale = mu.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    mu.face_means(part)
        .iter()
        .all(|m| m.abs() <= tol * scale.max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_mesh, refine_faces, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_trace(n: usize, rng: &mut ChaCha8Rng) -> TraceVector {
        TraceVector {
            values: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn haar_is_orthonormal_and_zero_mean() {
        for n in [1, 2, 4, 8, 16] {
            let w = haar_basis(n);
            assert_eq!(w.ncols(), n - 1);
            let g = w.transpose() * &w;
            assert!((g - DMatrix::identity(n - 1, n - 1)).amax() < 1e-14);
            for c in w.column_iter() {
                assert!(c.sum().abs() < 1e-14);
            }
        }
    }

    #[test]
    fn lambda0_pairs_to_perimeter() {
        let m = build_structured_mesh(2, 2, Rect::unit()).unwrap();
        let p = refine_faces(&m, 2);
        let z = v0_pairing_dense(&m);
        for i in 0..m.n_elements() {
            let l = lambda0(&m, &p, i);
            for j in 0..m.n_elements() {
                let mut c = PiecewiseConstant::zeros(m.n_elements());
                c.0[j] = 1.0;
                let v = pairing_constant(&m, &p, &l, &c);
                assert!((v - z[(i, j)]).abs() < 1e-13);
                // broken-field route
                let bf = BrokenField::from_constants(&c, p.lattice.n_nodes());
                assert!((pairing(&m, &p, &l, &bf) - v).abs() < 1e-13);
            }
            assert!((z[(i, i)] - m.element_perimeter(i)).abs() < 1e-14);
        }
    }

    #[test]
    fn neighbours_see_opposite_values() {
        let m = build_structured_mesh(1, 1, Rect::unit()).unwrap();
        let p = refine_faces(&m, 1);
        let f = m.faces.iter().position(|f| f.right.is_some()).unwrap();
        let face = &m.faces[f];
        let (a, b) = (face.left, face.right.unwrap());
        let la = lambda0(&m, &p, a);
        let lb = lambda0(&m, &p, b);
        for s in 0..p.subfaces {
            let g = f * p.subfaces + s;
            assert_eq!(la.values[g], -lb.values[g]);
        }
        // (λ⁰_a + λ⁰_b, v) = 0 for v continuous across F and zero elsewhere
        let sum = la.add(&lb);
        let mut on_f = TraceVector::zeros(sum.len());
        for s in 0..p.subfaces {
            on_f.values[f * p.subfaces + s] = sum.values[f * p.subfaces + s];
        }
        assert!(on_f.norm() < 1e-15);
    }

    #[test]
    fn v0_pairing_structure() {
        for (nx, ny) in [(1, 1), (2, 3), (4, 4)] {
            let m = build_structured_mesh(nx, ny, Rect::unit()).unwrap();
            let r = check_v0_pairing(&m);
            assert!(r.diagonally_dominant && r.strict_on_boundary && r.irreducible);
        }
    }

    #[test]
    fn v0_solve_matches_dense() {
        let m = build_structured_mesh(2, 2, Rect::unit()).unwrap();
        let p = refine_faces(&m, 1);
        let dec = SpaceDecomposition::new(&m, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rhs: Vec<f64> = (0..m.n_elements())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let x = dec.solve_v0_pairing(&rhs);
        let reference = v0_pairing_dense(&m)
            .lu()
            .solve(&DVector::from_vec(rhs.clone()))
            .unwrap();
        for (a, b) in x.iter().zip(reference.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(dec
            .solve_v0_pairing(&vec![0.0; m.n_elements()])
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn pairing_matches_quadrature_oracle() {
        // Oracle: integrate each boundary segment with Simpson's rule using
        // coordinates, with v an affine function per element.
        let m = build_structured_mesh(2, 2, Rect::unit()).unwrap();
        let p = refine_faces(&m, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = random_trace(p.n_fine_faces(), &mut rng);
        let coef: Vec<[f64; 3]> = (0..m.n_elements())
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let v = BrokenField {
            elements: (0..m.n_elements())
                .map(|e| {
                    p.element_nodes(&m, e)
                        .iter()
                        .map(|x| coef[e][0] + coef[e][1] * x[0] + coef[e][2] * x[1])
                        .collect()
                })
                .collect(),
        };
        let mut oracle = 0.0;
        for e in 0..m.n_elements() {
            for lf in p.local_faces(e) {
                let [a, b] = p.fine_face_endpoints(&m, lf.global);
                let f = |x: [f64; 2]| coef[e][0] + coef[e][1] * x[0] + coef[e][2] * x[1];
                let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                oracle += lf.sign * mu.values[lf.global] * len * (f(a) + 4.0 * f(mid) + f(b)) / 6.0;
            }
        }
        let got = pairing(&m, &p, &mu, &v);
        assert!((got - oracle).abs() <= 1e-13 * oracle.abs().max(1.0));
        assert_eq!(
            pairing(
                &m,
                &p,
                &mu,
                &BrokenField::zeros(m.n_elements(), p.lattice.n_nodes())
            ),
            0.0
        );
        let r = trace_functional(&m, &p, &v);
        assert!((mu.dot(&r) - got).abs() < 1e-13);
    }

    #[test]
    fn decomposition_of_lambda0_and_fine_traces() {
        let m = build_structured_mesh(2, 2, Rect::unit()).unwrap();
        let p = refine_faces(&m, 2);
        let dec = SpaceDecomposition::new(&m, &p).unwrap();
        let l = lambda0(&m, &p, 3);
        let d = dec.decompose(&m, &p, &l);
        assert!(d.tilde0.norm() < 1e-12 && d.fine.norm() < 1e-12);
        assert!((d.lambda0_coeffs[3] - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut fine = TraceVector::zeros(p.n_fine_faces());
        for f in 0..m.n_faces() {
            let c = DVector::from_fn(p.subfaces - 1, |_, _| rng.gen_range(-1.0..1.0));
            let v = &dec.haar * c;
            fine.values[f * p.subfaces..(f + 1) * p.subfaces].copy_from_slice(v.as_slice());
        }
        let d = dec.decompose(&m, &p, &fine);
        assert!(d.mu0.norm() < 1e-12 && d.tilde0.norm() < 1e-12);
        assert!(d.fine.sub(&fine).norm() < 1e-12);
    }

    #[test]
    fn tilde0_dimension_and_membership() {
        let m = build_structured_mesh(3, 2, Rect::unit()).unwrap();
        let p = refine_faces(&m, 1);
        let dec = SpaceDecomposition::new(&m, &p).unwrap();
        assert_eq!(dec.dim_tilde0(), m.n_faces() - m.n_elements());
        for k in 0..dec.dim_tilde0() {
            let v = dec.tilde0_vector(k);
            assert!(in_lambda_tilde(&m, &p, &v, 1e-12));
        }
    }

    #[test]
    fn serialization_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_trace(37, &mut rng);
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        assert_eq!(TraceVector::read_binary(&buf[..]).unwrap(), t);
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        assert_eq!(
            TraceVector::read_csv(std::str::from_utf8(&csv).unwrap()).unwrap(),
            t
        );
        assert!(TraceVector::read_csv("index,value\n1,2.0\n").is_err());
    }
}
