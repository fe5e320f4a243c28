//! Per-element fine P1 operators: the local solution maps `T` and `T̃`,
//! the boundary flux-energy matrix and its face blocks.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;

use crate::coeff::{CoefficientField, Tensor2, WeightField};
use crate::error::{Error, Result};
use crate::field::BrokenField;
use crate::linalg::symmetrize;
use crate::mesh::{CoarseMesh, FinePartition, Point};
use crate::traces::{boundary_matrix, TraceVector};

/// P1 nodal values on one element's interior triangulation.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFunction {
    pub values: Vec<f64>,
    /// Set when the function was produced by `T` or `T̃`.
    pub zero_average: bool,
}

pub struct ElementCache {
    pub element: usize,
    /// A-weighted P1 stiffness `K_τ`.
    pub stiffness: DMatrix<f64>,
    /// ρ-weighted P1 mass `M_τ`.
    pub mass: DMatrix<f64>,
    /// `m_i = ∫_τ ρ φ_i`.
    pub mean: DVector<f64>,
    /// `G_τ`, local fine faces × nodes.
    pub boundary: DMatrix<f64>,
    /// `T` applied to each unit element-side flux, one column per local fine face.
    pub flux_solutions: DMatrix<f64>,
    /// `B_τ[a, b] = (e_a, T e_b)_{∂τ}` for element-side unit fluxes.
    pub energy: DMatrix<f64>,
    /// `sign(τ, F)` per local fine face.
    pub signs: Vec<f64>,
    pub a_min: f64,
    pub a_max: f64,
    saddle: LU<f64, Dyn, Dyn>,
}

fn cell_matrices(p: [Point; 3], a: Tensor2, rho: f64) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let area2 =
        (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    let area = 0.5 * area2;
    let grads: [Point; 3] = std::array::from_fn(|i| {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        [(p[j][1] - p[k][1]) / area2, (p[k][0] - p[j][0]) / area2]
    });
    let mut k = [[0.0; 3]; 3];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        let ag = a.apply(grads[i]);
        for j in 0..3 {
            k[i][j] = area * (ag[0] * grads[j][0] + ag[1] * grads[j][1]);
            m[i][j] = rho * area / 12.0 * if i == j { 2.0 } else { 1.0 };
        }
    }
    (k, m)
}

impl ElementCache {
    pub fn assemble(
        mesh: &CoarseMesh,
        part: &FinePartition,
        field: &CoefficientField,
        rho: &WeightField,
        e: usize,
    ) -> Result<Self> {
        Self::assemble_with(mesh, part, e, |c| field.cell(e, c), |c| rho.cell(e, c))
    }

    /// Twin cache with `A = I` and the same weight.
    pub fn assemble_harmonic(
        mesh: &CoarseMesh,
        part: &FinePartition,
        rho: &WeightField,
        e: usize,
    ) -> Result<Self> {
        Self::assemble_with(mesh, part, e, |_| Tensor2::scalar(1.0), |c| rho.cell(e, c))
    }

    pub fn assemble_with(
        mesh: &CoarseMesh,
        part: &FinePartition,
        e: usize,
        tensor: impl Fn(usize) -> Tensor2,
        rho: impl Fn(usize) -> f64,
    ) -> Result<Self> {
        let lat = &part.lattice;
        let nodes = part.element_nodes(mesh, e);
        let n = lat.n_nodes();
        let mut stiffness = DMatrix::zeros(n, n);
        let mut mass = DMatrix::zeros(n, n);
        let mut a_min = f64::INFINITY;
        let mut a_max: f64 = 0.0;
        for (c, cell) in lat.cells.iter().enumerate() {
            let t = tensor(c);
            let (lo, hi) = t.eigenvalues();
            a_min = a_min.min(lo);
            a_max = a_max.max(hi);
            let (kc, mc) = cell_matrices(cell.map(|i| nodes[i]), t, rho(c));
            for i in 0..3 {
                for j in 0..3 {
                    stiffness[(cell[i], cell[j])] += kc[i][j];
                    mass[(cell[i], cell[j])] += mc[i][j];
                }
            }
        }
        let mean = DVector::from_fn(n, |i, _| mass.row(i).sum());
        let mut saddle = DMatrix::zeros(n + 1, n + 1);
        saddle.view_mut((0, 0), (n, n)).copy_from(&stiffness);
        saddle.view_mut((0, n), (n, 1)).copy_from(&mean);
        saddle.view_mut((n, 0), (1, n)).copy_from(&mean.transpose());
        let saddle = saddle.lu();
        if !saddle.is_invertible() {
            return Err(Error::SpdViolation {
                element: e,
                detail: "saddle matrix is not invertible".into(),
            });
        }
        let boundary = boundary_matrix(mesh, part, e);
        let nl = boundary.nrows();
        let mut rhs = DMatrix::zeros(n + 1, nl);
        rhs.view_mut((0, 0), (n, nl))
            .copy_from(&boundary.transpose());
        let sol = saddle.solve(&rhs).ok_or_else(|| Error::SpdViolation {
            element: e,
            detail: "saddle solve failed".into(),
        })?;
        let flux_solutions = sol.rows(0, n).into_owned();
        let mut energy = &boundary * &flux_solutions;
        symmetrize(&mut energy);
        if energy.iter().any(|v| !v.is_finite()) {
            return Err(Error::SpdViolation {
                element: e,
                detail: "non-finite flux energy".into(),
            });
        }
        let signs = part.local_faces(e).iter().map(|lf| lf.sign).collect();
        Ok(ElementCache {
            element: e,
            stiffness,
            mass,
            mean,
            boundary,
            flux_solutions,
            energy,
            signs,
            a_min,
            a_max,
            saddle,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.stiffness.nrows()
    }

    pub fn n_local_faces(&self) -> usize {
        self.boundary.nrows()
    }

    /// `∫_τ ρ`.
    pub fn weight_volume(&self) -> f64 {
        self.mean.sum()
    }

    fn solve_saddle(&self, load: DVector<f64>) -> LocalFunction {
        let n = self.n_nodes();
        let mut rhs = DVector::zeros(n + 1);
        rhs.rows_mut(0, n).copy_from(&load);
        let sol = self
            .saddle
            .solve(&rhs)
            .expect("saddle factorization checked at assembly");
        LocalFunction {
            values: sol.rows(0, n).iter().copied().collect(),
            zero_average: true,
        }
    }

    /// `Tμ` for element-side flux values in local fine-face order.
    pub fn apply_t(&self, mu: &[f64]) -> LocalFunction {
        let load = self.boundary.transpose() * DVector::from_column_slice(mu);
        self.solve_saddle(load)
    }

    /// `T̃g` for a P1 nodal `g`.
    pub fn apply_ttilde(&self, g: &[f64]) -> LocalFunction {
        let load = &self.mass * DVector::from_column_slice(g);
        self.solve_saddle(load)
    }

    /// `Tμ` through the cached unit-flux solutions.
    pub fn apply_t_cached(&self, mu: &[f64]) -> Vec<f64> {
        (&self.flux_solutions * DVector::from_column_slice(mu))
            .as_slice()
            .to_vec()
    }

    /// `(A∇u, ∇v)_τ`.
    pub fn energy_product(&self, u: &[f64], v: &[f64]) -> f64 {
        let u = DVector::from_column_slice(u);
        let v = DVector::from_column_slice(v);
        u.dot(&(&self.stiffness * v))
    }

    /// `(ρ u, v)_τ`.
    pub fn mass_product(&self, u: &[f64], v: &[f64]) -> f64 {
        let u = DVector::from_column_slice(u);
        let v = DVector::from_column_slice(v);
        u.dot(&(&self.mass * v))
    }

    pub fn weighted_average(&self, u: &[f64]) -> f64 {
        self.mean.dot(&DVector::from_column_slice(u)) / self.weight_volume()
    }

    /// `(μ, v)_{∂τ}` for element-side `μ`.
    pub fn boundary_pairing(&self, mu: &[f64], v: &[f64]) -> f64 {
        DVector::from_column_slice(mu).dot(&(&self.boundary * DVector::from_column_slice(v)))
    }

    /// `(μ, Tν)_{∂τ}` through `B_τ`, element-side values.
    pub fn flux_energy(&self, mu: &[f64], nu: &[f64]) -> f64 {
        DVector::from_column_slice(mu).dot(&(&self.energy * DVector::from_column_slice(nu)))
    }

    /// `B_τ` in face-normal coordinates: `S B_τ S`.
    pub fn energy_global(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.energy.nrows(), self.energy.ncols(), |i, j| {
            self.signs[i] * self.signs[j] * self.energy[(i, j)]
        })
    }

    /// `Φᵀ S B_τ S Φ` where `Φ` is block diagonal over the three local edges,
    /// block `k` being `bases[k]` (rows in face orientation).
    pub fn reduced_energy(&self, part: &FinePartition, bases: [&DMatrix<f64>; 3]) -> DMatrix<f64> {
        let phi = self.local_basis(part, bases);
        phi.transpose() * self.energy_global() * phi
    }

    /// Expands per-edge face bases to local fine-face rows.
    pub fn local_basis(&self, part: &FinePartition, bases: [&DMatrix<f64>; 3]) -> DMatrix<f64> {
        let ns = part.subfaces;
        let cols: Vec<usize> = bases.iter().map(|b| b.ncols()).collect();
        let total: usize = cols.iter().sum();
        let mut phi = DMatrix::zeros(3 * ns, total);
        let mut off = 0;
        let local = part.local_faces(self.element);
        for k in 0..3 {
            for m in 0..ns {
                let sub = local[k * ns + m].sub;
                for c in 0..cols[k] {
                    phi[(k * ns + m, off + c)] = bases[k][(sub, c)];
                }
            }
            off += cols[k];
        }
        phi
    }

    /// Writes `B_τ` with a header naming the element and configuration hash.
    pub fn spill<W: Write>(&self, config_hash: &[u8; 32], mut out: W) -> Result<()> {
        out.write_all(b"LSDC")?;
        out.write_all(&(self.element as u64).to_le_bytes())?;
        out.write_all(config_hash)?;
        out.write_all(&(self.energy.nrows() as u64).to_le_bytes())?;
        for v in self.energy.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a spilled `B_τ`, checking element id and configuration hash.
    pub fn read_spill<R: Read>(
        element: usize,
        config_hash: &[u8; 32],
        mut input: R,
    ) -> Result<DMatrix<f64>> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let id = u64::from_le_bytes(word) as usize;
        let mut hash = [0u8; 32];
        input.read_exact(&mut hash)?;
        if &magic != b"LSDC" || id != element || &hash != config_hash {
            return Err(Error::InvalidArgument(format!(
                "cache blob does not match element {element} and configuration"
            )));
        }
        input.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            input.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Ok(DMatrix::from_vec(n, n, data))
    }
}

/// The coarse mesh, fine partition, coefficients and all element caches.
pub struct Discretization {
    pub mesh: CoarseMesh,
    pub part: FinePartition,
    pub field: CoefficientField,
    pub rho: WeightField,
    pub caches: Vec<ElementCache>,
}

impl Discretization {
    pub fn new(
        mesh: CoarseMesh,
        part: FinePartition,
        field: CoefficientField,
        rho: WeightField,
    ) -> Result<Self> {
        field.check_covers(&mesh, &part)?;
        let caches = (0..mesh.n_elements())
            .into_par_iter()
            .map(|e| ElementCache::assemble(&mesh, &part, &field, &rho, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Discretization {
            mesh,
            part,
            field,
            rho,
            caches,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.mesh.n_elements()
    }

    pub fn n_nodes(&self) -> usize {
        self.part.lattice.n_nodes()
    }

    pub fn n_fine_faces(&self) -> usize {
        self.part.n_fine_faces()
    }

    /// `Bλ`, so that `(μ, Tλ)_{∂T_H} = μ · Bλ`.
    pub fn apply_energy(&self, lambda: &TraceVector) -> TraceVector {
        let mut out = TraceVector::zeros(lambda.len());
        for (e, c) in self.caches.iter().enumerate() {
            let local = DVector::from_vec(lambda.gather(&self.part, e));
            let y = c.energy_global() * local;
            out.scatter_add(&self.part, e, y.as_slice());
        }
        out
    }

    /// `(μ, Tλ)_{∂T_H}`.
    pub fn energy_pairing(&self, mu: &TraceVector, lambda: &TraceVector) -> f64 {
        (0..self.n_elements())
            .map(|e| {
                self.caches[e].flux_energy(
                    &mu.element_side(&self.part, e),
                    &lambda.element_side(&self.part, e),
                )
            })
            .sum()
    }

    /// `|Tλ|²_{H¹_A(τ)}` per element.
    pub fn element_energies(&self, lambda: &TraceVector) -> Vec<f64> {
        (0..self.n_elements())
            .map(|e| {
                let l = lambda.element_side(&self.part, e);
                self.caches[e].flux_energy(&l, &l)
            })
            .collect()
    }

    /// `Tλ` element by element.
    pub fn apply_t(&self, lambda: &TraceVector) -> BrokenField {
        BrokenField {
            elements: (0..self.n_elements())
                .map(|e| {
                    self.caches[e]
                        .apply_t(&lambda.element_side(&self.part, e))
                        .values
                })
                .collect(),
        }
    }

    /// `T̃g` element by element.
    pub fn apply_ttilde(&self, g: &BrokenField) -> BrokenField {
        BrokenField {
            elements: (0..self.n_elements())
                .map(|e| self.caches[e].apply_ttilde(&g.elements[e]).values)
                .collect(),
        }
    }

    /// Broken energy `Σ_τ (A∇u, ∇u)_τ`.
    pub fn broken_energy(&self, u: &BrokenField) -> f64 {
        self.caches
            .iter()
            .zip(&u.elements)
            .map(|(c, v)| c.energy_product(v, v))
            .sum()
    }

    /// `‖g‖²_{L²_ρ}`.
    pub fn weighted_norm_sq(&self, g: &BrokenField) -> f64 {
        self.caches
            .iter()
            .zip(&g.elements)
            .map(|(c, v)| c.mass_product(v, v))
            .sum()
    }

    /// `∫_τ ρ g` per element.
    pub fn weighted_integrals(&self, g: &BrokenField) -> Vec<f64> {
        self.caches
            .iter()
            .zip(&g.elements)
            .map(|(c, v)| c.mean.dot(&DVector::from_column_slice(v)))
            .collect()
    }
}

/// Blocks of the reduced energy on `Λ̃^F × Λ̃^{F^c_τ}`.
#[derive(Debug, Clone)]
pub struct FaceBlocks {
    pub t_ff: DMatrix<f64>,
    pub t_ffc: DMatrix<f64>,
    pub t_cf: DMatrix<f64>,
    pub t_cc: DMatrix<f64>,
    pub t_hat: DMatrix<f64>,
}

/// Face blocks for the local edge `k` of the cached element, in the
/// zero-mean basis `haar` of every face.
pub fn face_blocks(
    cache: &ElementCache,
    part: &FinePartition,
    k: usize,
    haar: &DMatrix<f64>,
) -> Result<FaceBlocks> {
    let r = cache.reduced_energy(part, [haar, haar, haar]);
    let p = haar.ncols();
    let others: Vec<usize> = (0..3).filter(|&i| i != k).collect();
    let fidx: Vec<usize> = (k * p..(k + 1) * p).collect();
    let cidx: Vec<usize> = others.iter().flat_map(|&i| i * p..(i + 1) * p).collect();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| r[(rows[i], cols[j])])
    };
    let t_ff = pick(&fidx, &fidx);
    let t_ffc = pick(&fidx, &cidx);
    let t_cf = pick(&cidx, &fidx);
    let t_cc = pick(&cidx, &cidx);
    let mut t_hat = t_ff.clone();
    if p > 0 {
        let chol = crate::linalg::cholesky(&t_cc).map_err(|_| Error::SpdViolation {
            element: cache.element,
            detail: format!("complement block of local edge {k} is not positive definite"),
        })?;
        t_hat -= &t_ffc * chol.solve(&t_cf);
        symmetrize(&mut t_hat);
    }
    Ok(FaceBlocks {
        t_ff,
        t_ffc,
        t_cf,
        t_cc,
        t_hat,
    })
}
