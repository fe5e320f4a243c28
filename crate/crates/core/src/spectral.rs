//! Face enrichment eigenproblems and element right-hand-side eigenproblems.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::BrokenField;
use crate::linalg::gensym_eig;
use crate::localop::{face_blocks, ElementCache};
use crate::mesh::{CoarseMesh, FinePartition};

pub use crate::linalg::{gensym_eig as generalized_eigen, GenEig};

#[derive(Debug, Clone)]
pub struct FaceSpectrum {
    pub face: usize,
    /// Ascending `α_i^F`.
    pub alphas: Vec<f64>,
    /// Eigenvectors in the zero-mean face basis, orthonormal in the `T̂` form.
    pub vectors: DMatrix<f64>,
    /// Number of `Δ` modes (`α < α_stab`); the rest are `Π` modes.
    pub split: usize,
    /// `Δ` modes as fine-face values on `F`, in face orientation.
    pub delta_basis: DMatrix<f64>,
    /// `Π` modes as fine-face values on `F`.
    pub pi_basis: DMatrix<f64>,
}

impl FaceSpectrum {
    pub fn n_pi(&self) -> usize {
        self.alphas.len() - self.split
    }

    pub fn summary(&self) -> FaceSpectrumSummary {
        FaceSpectrumSummary {
            face: self.face,
            alphas: self.alphas.clone(),
            split: self.split,
        }
    }
}

/// JSON form of a face spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceSpectrumSummary {
    pub face: usize,
    pub alphas: Vec<f64>,
    pub split: usize,
}

/// Sums of `T_FF` and `T̂_FF` over the elements incident to `f`.
pub fn face_pencil(
    mesh: &CoarseMesh,
    part: &FinePartition,
    caches: &[ElementCache],
    haar: &DMatrix<f64>,
    f: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = haar.ncols();
    let mut lhs = DMatrix::zeros(p, p);
    let mut rhs = DMatrix::zeros(p, p);
    for e in mesh.faces[f].elements() {
        let k = mesh.element_faces[e]
            .iter()
            .position(|&x| x == f)
            .expect("face belongs to its elements");
        let b = face_blocks(&caches[e], part, k, haar)?;
        lhs += b.t_ff;
        rhs += b.t_hat;
    }
    Ok((lhs, rhs))
}

pub fn face_spectrum(
    mesh: &CoarseMesh,
    part: &FinePartition,
    caches: &[ElementCache],
    haar: &DMatrix<f64>,
    f: usize,
    alpha_stab: f64,
) -> Result<FaceSpectrum> {
    let (lhs, rhs) = face_pencil(mesh, part, caches, haar, f)?;
    let eig = gensym_eig(&lhs, &rhs)?;
    let split = eig.values.iter().take_while(|&&a| a < alpha_stab).count();
    let fine = haar * &eig.vectors;
    let n = eig.values.len();
    Ok(FaceSpectrum {
        face: f,
        delta_basis: fine.columns(0, split).into_owned(),
        pi_basis: fine.columns(split, n - split).into_owned(),
        alphas: eig.values,
        vectors: eig.vectors,
        split,
    })
}

pub fn face_spectra(
    mesh: &CoarseMesh,
    part: &FinePartition,
    caches: &[ElementCache],
    haar: &DMatrix<f64>,
    alpha_stab: f64,
) -> Result<Vec<FaceSpectrum>> {
    (0..mesh.n_faces())
        .into_par_iter()
        .map(|f| face_spectrum(mesh, part, caches, haar, f, alpha_stab))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ElementSpectrum {
    pub element: usize,
    /// Ascending `σ_i`; `σ_1` is zero up to rounding.
    pub sigmas: Vec<f64>,
    /// Mass-orthonormal eigenvectors.
    pub vectors: DMatrix<f64>,
    /// `J_τ`.
    pub j: usize,
    pub c_j: f64,
}

impl ElementSpectrum {
    /// `σ_{J+1}^{-1}`, zero when every mode is kept.
    pub fn tail_inverse(&self) -> f64 {
        self.sigmas.get(self.j).map_or(0.0, |s| 1.0 / s)
    }
}

/// Smallest `J ≥ 1` with `σ_{J+1}^{-1} ≤ c_J H̃²`.
pub fn select_j(sigmas: &[f64], h_tilde: f64, c_j: f64) -> usize {
    let bound = c_j * h_tilde * h_tilde;
    (1..sigmas.len())
        .find(|&j| 1.0 / sigmas[j] <= bound)
        .unwrap_or(sigmas.len())
}

pub fn element_spectrum(cache: &ElementCache, h_tilde: f64, c_j: f64) -> Result<ElementSpectrum> {
    let eig = gensym_eig(&cache.stiffness, &cache.mass)?;
    let mut vectors = eig.vectors;
    if vectors.column(0).sum() < 0.0 {
        vectors.column_mut(0).neg_mut();
    }
    let j = select_j(&eig.values, h_tilde, c_j);
    Ok(ElementSpectrum {
        element: cache.element,
        sigmas: eig.values,
        vectors,
        j,
        c_j,
    })
}

pub fn element_spectra(
    caches: &[ElementCache],
    h_tilde: f64,
    c_j: f64,
) -> Result<Vec<ElementSpectrum>> {
    caches
        .par_iter()
        .map(|c| element_spectrum(c, h_tilde, c_j))
        .collect()
}

/// `Π_J g` and, per element, `‖g - Π_J g‖_{L²_ρ(τ)}`.
pub fn project_rhs(
    g: &BrokenField,
    caches: &[ElementCache],
    spectra: &[ElementSpectrum],
) -> (BrokenField, Vec<f64>) {
    let mut out = Vec::with_capacity(g.n_elements());
    let mut rem = Vec::with_capacity(g.n_elements());
    for ((ge, c), s) in g.elements.iter().zip(caches).zip(spectra) {
        let gv = DVector::from_column_slice(ge);
        let vj = s.vectors.columns(0, s.j);
        let coeffs = vj.transpose() * (&c.mass * &gv);
        let proj = vj * coeffs;
        let d = &gv - &proj;
        rem.push(d.dot(&(&c.mass * &d)).max(0.0).sqrt());
        out.push(proj.as_slice().to_vec());
    }
    (BrokenField { elements: out }, rem)
}
