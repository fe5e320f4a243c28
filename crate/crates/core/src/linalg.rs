//! Dense and sparse factorization helpers.
//!
//! Dense kernels use `nalgebra`; sparse factorizations use `faer`.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenpairs of `A x = λ B x`, ascending, with `B`-orthonormal columns.
#[derive(Debug, Clone)]
pub struct GenEig {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Dense Cholesky factor; reports the first failing leading minor.
pub fn cholesky(b: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    match Cholesky::new(b.clone()) {
        Some(c) => Ok(c),
        None => {
            let pivot = (1..=b.nrows())
                .find(|&k| Cholesky::new(b.view((0, 0), (k, k)).into_owned()).is_none())
                .map(|k| k - 1)
                .unwrap_or(0);
            Err(Error::NotPositiveDefinite { pivot })
        }
    }
}

/// Dense generalized symmetric eigensolver by Cholesky reduction.
pub fn gensym_eig(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<GenEig> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::InvalidArgument(
            "eigenproblem matrices must be square and equal size".into(),
        ));
    }
    if n == 0 {
        return Ok(GenEig {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let chol = cholesky(b)?;
    let l = chol.l();
    // C = L^{-1} A L^{-T}
    let mut x = a.clone();
    l.solve_lower_triangular_mut(&mut x);
    let mut c = x.transpose();
    l.solve_lower_triangular_mut(&mut c);
    symmetrize(&mut c);
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut y = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        y.set_column(col, &eig.eigenvectors.column(i));
    }
    // x = L^{-T} y
    let lt = l.transpose();
    lt.solve_upper_triangular_mut(&mut y);
    Ok(GenEig { values, vectors: y })
}

fn to_faer(n: usize, entries: &[(usize, usize, f64)]) -> Result<SparseColMat<usize, f64>> {
    let triplets: Vec<Triplet<usize, usize, f64>> = entries
        .iter()
        .map(|&(i, j, v)| Triplet::new(i, j, v))
        .collect();
    SparseColMat::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| Error::InvalidArgument(format!("sparse matrix assembly: {e:?}")))
}

fn solve_with(s: &impl Solve<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let b = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
    let x = s.solve(&b);
    DVector::from_fn(rhs.len(), |i, _| x[(i, 0)])
}

fn solve_many_with(s: &impl Solve<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let b = Mat::<f64>::from_fn(rhs.nrows(), rhs.ncols(), |i, j| rhs[(i, j)]);
    let x = s.solve(&b);
    DMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| x[(i, j)])
}

/// Sparse `L Lᵀ` of a symmetric positive definite matrix given by triplets
/// (duplicates are summed; both triangles may be supplied).
pub struct SparseCholesky {
    n: usize,
    llt: Llt<usize, f64>,
}

impl SparseCholesky {
    pub fn new(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let a = to_faer(n, entries)?;
        let llt = a.sp_cholesky(Side::Lower).map_err(|e| match e {
            faer::sparse::linalg::LltError::Numeric(
                faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index },
            ) => Error::NotPositiveDefinite { pivot: index },
            other => Error::InvalidArgument(format!("sparse cholesky: {other}")),
        })?;
        Ok(SparseCholesky { n, llt })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        solve_with(&self.llt, rhs)
    }

    pub fn solve_many(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        solve_many_with(&self.llt, rhs)
    }
}

/// Sparse LU with partial pivoting, for indefinite systems.
pub struct SparseLu {
    lu: Lu<usize, f64>,
}

impl SparseLu {
    pub fn new(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let a = to_faer(n, entries)?;
        let lu = a
            .sp_lu()
            .map_err(|e| Error::InvalidArgument(format!("sparse lu: {e}")))?;
        Ok(SparseLu { lu })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        solve_with(&self.lu, rhs)
    }
}

/// Symmetric positive definite factorization, dense or sparse by size.
pub enum SpdFactor {
    Dense(Cholesky<f64, Dyn>),
    Sparse(SparseCholesky),
}

/// Systems up to this dimension use a dense factorization.
pub const DENSE_LIMIT: usize = 400;

impl SpdFactor {
    /// `assemble` is only called for the representation that is chosen.
    pub fn new(
        n: usize,
        dense: impl FnOnce() -> DMatrix<f64>,
        sparse: impl FnOnce() -> Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        if n <= DENSE_LIMIT {
            Ok(SpdFactor::Dense(cholesky(&dense())?))
        } else {
            Ok(SpdFactor::Sparse(SparseCholesky::new(n, &sparse())?))
        }
    }

    pub fn solve_many(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SpdFactor::Dense(c) => c.solve(rhs),
            SpdFactor::Sparse(s) => s.solve_many(rhs),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let x = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &x * x.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn equal_pair_has_unit_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_spd(6, &mut rng);
        let e = gensym_eig(&b, &b).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn diagonal_pair() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 8.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 4.0]));
        let e = gensym_eig(&a, &b).unwrap();
        let expect = [0.5, 2.0, 3.0];
        for (v, w) in e.values.iter().zip(expect) {
            assert!((v - w).abs() < 1e-14);
        }
    }

    #[test]
    fn random_pair_residuals_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20;
        let x = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let a = &x + x.transpose();
        let b = random_spd(n, &mut rng);
        let e = gensym_eig(&a, &b).unwrap();
        let anorm = a.norm();
        for k in 0..n {
            let v = e.vectors.column(k);
            let r = &a * v - &b * v * e.values[k];
            assert!(r.norm() <= 1e-10 * anorm, "pair {k}: {}", r.norm());
        }
        let g = e.vectors.transpose() * &b * &e.vectors;
        assert!((g - DMatrix::identity(n, n)).norm() < 1e-10);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn indefinite_mass_reports_pivot() {
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, -1.0]);
        let a = DMatrix::identity(3, 3);
        match gensym_eig(&a, &b) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sparse_solvers_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let a = random_spd(n, &mut rng);
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                // split each entry in two to exercise duplicate summation
                entries.push((i, j, 0.25 * a[(i, j)]));
                entries.push((i, j, 0.75 * a[(i, j)]));
            }
        }
        let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let reference = a.clone().lu().solve(&b).unwrap();
        let x = SparseCholesky::new(n, &entries).unwrap().solve(&b);
        assert!((&x - &reference).norm() < 1e-10 * reference.norm());
        let y = SparseLu::new(n, &entries).unwrap().solve(&b);
        assert!((&y - &reference).norm() < 1e-10 * reference.norm());
    }

    #[test]
    fn sparse_cholesky_rejects_indefinite() {
        let entries = [(0, 0, 1.0), (1, 1, -2.0)];
        assert!(matches!(
            SparseCholesky::new(2, &entries),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
