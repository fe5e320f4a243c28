//! Broken (element-wise) P1 fields on the interior triangulations.

use serde::{Deserialize, Serialize};

use crate::mesh::{CoarseMesh, FinePartition, Point};

/// Nodal values per element; node order follows [`crate::mesh::ReferenceLattice`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokenField {
    pub elements: Vec<Vec<f64>>,
}

/// One value per coarse element (`V⁰`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant(pub Vec<f64>);

impl BrokenField {
    pub fn zeros(n_elements: usize, n_nodes: usize) -> Self {
        BrokenField {
            elements: vec![vec![0.0; n_nodes]; n_elements],
        }
    }

    /// Samples `f` at the nodes of every element.
    pub fn from_fn(mesh: &CoarseMesh, part: &FinePartition, f: impl Fn(Point) -> f64) -> Self {
        BrokenField {
            elements: (0..mesh.n_elements())
                .map(|e| part.element_nodes(mesh, e).into_iter().map(&f).collect())
                .collect(),
        }
    }

    pub fn from_constants(c: &PiecewiseConstant, n_nodes: usize) -> Self {
        BrokenField {
            elements: c.0.iter().map(|&v| vec![v; n_nodes]).collect(),
        }
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn add_assign(&mut self, other: &BrokenField) {
        for (a, b) in self.elements.iter_mut().zip(&other.elements) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn sub(&self, other: &BrokenField) -> BrokenField {
        BrokenField {
            elements: self
                .elements
                .iter()
                .zip(&other.elements)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> BrokenField {
        BrokenField {
            elements: self
                .elements
                .iter()
                .map(|a| a.iter().map(|x| s * x).collect())
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.elements
            .iter()
            .flatten()
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl BrokenField {
    /// Value of the P1 interpolant on element `e` at `p`, which should lie in
    /// the closure of `e`.
    pub fn evaluate(&self, mesh: &CoarseMesh, part: &FinePartition, e: usize, p: Point) -> f64 {
        let n = part.lattice.n;
        let (s, t) = mesh.reference_coords(e, p);
        let (x, y) = (s * n as f64, t * n as f64);
        let i0 = (x.floor().max(0.0) as usize).min(n - 1);
        let j0 = (y.floor().max(0.0) as usize).min(n - 1 - i0);
        let (a, b) = (x - i0 as f64, y - j0 as f64);
        let node = |i: usize, j: usize| j * (n + 1) - j * j.saturating_sub(1) / 2 + i;
        let v = &self.elements[e];
        if a + b <= 1.0 || i0 + j0 + 1 == n {
            let v00 = v[node(i0, j0)];
            v00 + a * (v[node(i0 + 1, j0)] - v00) + b * (v[node(i0, j0 + 1)] - v00)
        } else {
            let v11 = v[node(i0 + 1, j0 + 1)];
            v11 + (1.0 - a) * (v[node(i0, j0 + 1)] - v11) + (1.0 - b) * (v[node(i0 + 1, j0)] - v11)
        }
    }

    /// Interpolates onto a mesh nested in `mesh`: every target element must
    /// lie inside one source element.
    pub fn prolongate(
        &self,
        mesh: &CoarseMesh,
        part: &FinePartition,
        target: &CoarseMesh,
        target_part: &FinePartition,
    ) -> Option<BrokenField> {
        let elements = (0..target.n_elements())
            .map(|e| {
                let host = mesh.locate(target.element_centroid(e), 1e-12)?;
                Some(
                    target_part
                        .element_nodes(target, e)
                        .into_iter()
                        .map(|p| self.evaluate(mesh, part, host, p))
                        .collect(),
                )
            })
            .collect::<Option<Vec<_>>>()?;
        Some(BrokenField { elements })
    }
}

impl PiecewiseConstant {
    pub fn zeros(n: usize) -> Self {
        PiecewiseConstant(vec![0.0; n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_mesh, refine_faces, FinePartition, Rect};

    fn linear(p: Point) -> f64 {
        1.5 - 2.0 * p[0] + 0.75 * p[1]
    }

    #[test]
    fn evaluation_reproduces_linear_functions() {
        let m = build_structured_mesh(2, 3, Rect::unit()).unwrap();
        let p = refine_faces(&m, 1);
        let u = BrokenField::from_fn(&m, &p, linear);
        for e in 0..m.n_elements() {
            let [a, b, c] = m.element_points(e);
            for (s, t) in [
                (0.0, 0.0),
                (1.0, 0.0),
                (0.0, 1.0),
                (0.3, 0.1),
                (0.49, 0.5),
                (0.2, 0.7),
            ] {
                let q = [
                    a[0] + s * (b[0] - a[0]) + t * (c[0] - a[0]),
                    a[1] + s * (b[1] - a[1]) + t * (c[1] - a[1]),
                ];
                assert!((u.evaluate(&m, &p, e, q) - linear(q)).abs() < 1e-13);
            }
            assert_eq!(m.locate(m.element_centroid(e), 1e-12), Some(e));
        }
    }

    #[test]
    fn evaluation_hits_nodal_values() {
        let m = build_structured_mesh(1, 1, Rect::unit()).unwrap();
        let p = refine_faces(&m, 2);
        let u = BrokenField {
            elements: (0..2)
                .map(|e| {
                    (0..p.lattice.n_nodes())
                        .map(|k| (k * 7 + e) as f64)
                        .collect()
                })
                .collect(),
        };
        for e in 0..2 {
            for (k, q) in p.element_nodes(&m, e).into_iter().enumerate() {
                assert!((u.evaluate(&m, &p, e, q) - u.elements[e][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prolongation_between_nested_meshes() {
        let coarse = build_structured_mesh(2, 2, Rect::unit()).unwrap();
        let fine = build_structured_mesh(4, 4, Rect::unit()).unwrap();
        let cp = refine_faces(&coarse, 2);
        let fp = FinePartition::new(&fine, 1, 2).unwrap();
        let u = BrokenField::from_fn(&coarse, &cp, linear);
        let v = u.prolongate(&coarse, &cp, &fine, &fp).unwrap();
        assert!(v.sub(&BrokenField::from_fn(&fine, &fp, linear)).max_abs() < 1e-13);
        // a bumpy field survives the round trip because the lattices nest
        let w = BrokenField::from_fn(&coarse, &cp, |p| (9.0 * p[0]).sin() * p[1]);
        let back = w.prolongate(&coarse, &cp, &fine, &fp).unwrap();
        let direct = BrokenField::from_fn(&fine, &fp, |p| (9.0 * p[0]).sin() * p[1]);
        assert!(back.sub(&direct).max_abs() < 1e-13);
        let shifted = build_structured_mesh(
            2,
            2,
            Rect {
                x0: 0.5,
                y0: 0.0,
                x1: 1.5,
                y1: 1.0,
            },
        )
        .unwrap();
        assert!(u
            .prolongate(&coarse, &cp, &shifted, &refine_faces(&shifted, 1))
            .is_none());
    }
}
