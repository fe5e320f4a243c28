//! End-to-end solvers: the λ⁰ solve, the upscaled system, recovery of the
//! localized multiplier, reconstruction, and two reference solvers.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coeff::{local_bounds, make_weight, CoefficientField, Tensor2, WeightChoice};
use crate::error::{Error, Result};
use crate::field::{BrokenField, PiecewiseConstant};
use crate::linalg::{cholesky, symmetrize, SparseCholesky, SparseLu};
use crate::localize::{Localizer, PatchSpace, Variant};
use crate::localop::Discretization;
use crate::mesh::{
    build_structured_mesh, global_saturation, parse_mesh, CoarseMesh, FinePartition, Point, Rect,
    DEFAULT_SHAPE_BOUND,
};
use crate::spectral::{element_spectra, face_spectra, project_rhs, ElementSpectrum, FaceSpectrum};
use crate::traces::{
    check_v0_pairing, in_lambda_tilde, lambda0_combination, trace_functional, SpaceDecomposition,
    TraceVector, V0PairingReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeshSpec {
    Structured { nx: usize, ny: usize, domain: Rect },
    File { path: PathBuf },
}

impl MeshSpec {
    pub fn build(&self) -> Result<CoarseMesh> {
        match self {
            MeshSpec::Structured { nx, ny, domain } => build_structured_mesh(*nx, *ny, *domain),
            MeshSpec::File { path } => {
                parse_mesh(&std::fs::read_to_string(path)?, DEFAULT_SHAPE_BOUND)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Oracles {
    /// Monolithic hybrid saddle-point solve.
    pub monolithic: bool,
    /// Conforming P1 solve on the union fine mesh.
    pub conforming: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative equilibrium residual accepted per element.
    pub equilibrium: f64,
    /// Relative asymmetry accepted in the upscaled matrix.
    pub symmetry: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            equilibrium: 1e-10,
            symmetry: 1e-11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub mesh: MeshSpec,
    pub face_level: u32,
    /// Defaults to `face_level + 1`.
    pub interior_level: Option<u32>,
    pub weight: WeightChoice,
    pub alpha_stab: f64,
    /// Layer count `j`; `None` uses global patches.
    pub layers: Option<usize>,
    pub variant: Variant,
    /// Target precision `H̃`; defaults to the coarse mesh size.
    pub h_tilde: Option<f64>,
    pub c_j: f64,
    pub rhs_reduction: bool,
    pub oracles: Oracles,
    pub tolerances: Tolerances,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mesh: MeshSpec::Structured {
                nx: 4,
                ny: 4,
                domain: Rect::unit(),
            },
            face_level: 2,
            interior_level: None,
            weight: WeightChoice::One,
            alpha_stab: 10.0,
            layers: Some(2),
            variant: Variant::Delta,
            h_tilde: None,
            c_j: 1.0,
            rhs_reduction: false,
            oracles: Oracles::default(),
            tolerances: Tolerances::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == Some(0) {
            return Err(Error::InvalidArgument(
                "layer count j must be at least 1".into(),
            ));
        }
        if !(self.alpha_stab >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha_stab must be at least 1, got {}",
                self.alpha_stab
            )));
        }
        if let Some(h) = self.h_tilde {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "h_tilde must be positive, got {h}"
                )));
            }
        }
        if !(self.c_j > 0.0 && self.c_j.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "c_j must be positive, got {}",
                self.c_j
            )));
        }
        if self.weight == WeightChoice::Custom {
            return Err(Error::InvalidArgument(
                "custom weights are only available through the library interface".into(),
            ));
        }
        Ok(())
    }

    pub fn interior_level(&self) -> u32 {
        self.interior_level.unwrap_or(self.face_level + 1)
    }
}

/// Spaces, spectra and the projection space shared by every solve.
pub struct Setup {
    pub disc: Discretization,
    pub decomposition: SpaceDecomposition,
    pub face_spectra: Vec<FaceSpectrum>,
    pub space: PatchSpace,
    pub variant: Variant,
    pub alpha_stab: f64,
}

impl Setup {
    pub fn new(disc: Discretization, variant: Variant, alpha_stab: f64) -> Result<Self> {
        let decomposition =
            SpaceDecomposition::new(&disc.mesh, &disc.part).map_err(|e| e.at_stage("spaces"))?;
        let face_spectra = face_spectra(
            &disc.mesh,
            &disc.part,
            &disc.caches,
            &decomposition.haar,
            alpha_stab,
        )
        .map_err(|e| e.at_stage("face_spectra"))?;
        let space = match variant {
            Variant::Plain => PatchSpace::plain(&disc, &decomposition.haar),
            Variant::Delta => PatchSpace::delta(&disc, &face_spectra),
        };
        Ok(Setup {
            disc,
            decomposition,
            face_spectra,
            space,
            variant,
            alpha_stab,
        })
    }

    pub fn localizer(&self, layers: Option<usize>) -> Localizer<'_> {
        Localizer::new(&self.disc, &self.space, layers)
    }

    /// `Π` modes of face `f` retained in the upscaled space.
    pub fn pi_basis(&self, f: usize) -> DMatrix<f64> {
        match self.variant {
            Variant::Plain => DMatrix::zeros(self.disc.part.subfaces, 0),
            Variant::Delta => self.face_spectra[f].pi_basis.clone(),
        }
    }

    pub fn n_pi(&self) -> usize {
        (0..self.disc.mesh.n_faces())
            .map(|f| self.pi_basis(f).ncols())
            .sum()
    }

    pub fn max_alpha(&self) -> f64 {
        self.face_spectra
            .iter()
            .flat_map(|s| s.alphas.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_alpha(&self) -> f64 {
        self.face_spectra
            .iter()
            .flat_map(|s| s.alphas.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// `λ⁰` from `(λ⁰, v⁰) = -(ρg, v⁰)`; returns the element coefficients and the trace.
pub fn solve_lambda0(
    disc: &Discretization,
    dec: &SpaceDecomposition,
    g: &BrokenField,
) -> (Vec<f64>, TraceVector) {
    let rhs: Vec<f64> = disc.weighted_integrals(g).iter().map(|v| -v).collect();
    let c = dec.solve_v0_pairing(&rhs);
    let trace = lambda0_combination(&disc.mesh, &disc.part, &c);
    (c, trace)
}

/// The SPD system for `λ̃^{0,Π,j}` and the patch responses it was built from.
pub struct UpscaledSystem {
    /// Basis `μ_i` of `Λ̃_h⁰ ⊕ Λ̃^Π`; the `Λ̃_h⁰` part comes first.
    pub basis: Vec<TraceVector>,
    pub n_tilde0: usize,
    /// `P^{Δ,j}Tμ_i`.
    pub projected: Vec<TraceVector>,
    /// `P^{Δ,j}Tλ⁰`.
    pub lambda0_projected: TraceVector,
    /// `T̃g`.
    pub ttilde_g: BrokenField,
    /// `P̃^{Δ,j}T̃g`.
    pub ttilde_projected: TraceVector,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// `max |G - Gᵀ| / max |G|` before symmetrization.
    pub asymmetry: f64,
}

impl UpscaledSystem {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn solve(&self) -> Result<DVector<f64>> {
        if self.dim() == 0 {
            return Ok(DVector::zeros(0));
        }
        let chol = cholesky(&self.matrix).map_err(|e| e.at_stage("upscaled"))?;
        Ok(chol.solve(&self.rhs))
    }

    /// `Σ c_i μ_i`.
    pub fn combine(&self, coeffs: &DVector<f64>) -> TraceVector {
        combine(&self.basis, coeffs, self.lambda0_projected.len())
    }
}

fn combine(vs: &[TraceVector], coeffs: &DVector<f64>, n: usize) -> TraceVector {
    let mut out = TraceVector::zeros(n);
    for (v, c) in vs.iter().zip(coeffs.iter()) {
        out.axpy(*c, v);
    }
    out
}

fn trace_matrix(vs: &[TraceVector], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, vs.len(), |i, j| vs[j].values[i])
}

fn columns_to_traces(m: &DMatrix<f64>) -> Vec<TraceVector> {
    m.column_iter()
        .map(|c| TraceVector {
            values: c.iter().copied().collect(),
        })
        .collect()
}

/// Builds the upscaled system with the patch operators of `loc`.
///
/// Face-constant traces are handled by linearity: `P^{Δ,j}Tμ = Σ_F μ_F w_F`
/// with `w_F = P^{Δ,F,j}Tχ_F`, so each face needs one patch solve for the
/// constants plus one per `Π` mode.
pub fn assemble_upscaled(
    setup: &Setup,
    loc: &Localizer,
    lambda0: &TraceVector,
    g: &BrokenField,
) -> Result<UpscaledSystem> {
    let disc = &setup.disc;
    let dec = &setup.decomposition;
    let ns = disc.part.subfaces;
    let nf = disc.mesh.n_faces();
    let nfine = disc.n_fine_faces();

    let inputs: Vec<DMatrix<f64>> = (0..nf)
        .map(|f| {
            let pi = setup.pi_basis(f);
            let mut m = DMatrix::zeros(ns, 1 + pi.ncols());
            m.column_mut(0).fill(1.0);
            m.columns_mut(1, pi.ncols()).copy_from(&pi);
            m
        })
        .collect();
    let responses = loc.face_responses(&inputs)?;
    let w = trace_matrix(
        &responses.iter().map(|r| r[0].clone()).collect::<Vec<_>>(),
        nfine,
    );

    let n0 = dec.dim_tilde0();
    let mut basis: Vec<TraceVector> = (0..n0).map(|k| dec.tilde0_vector(k)).collect();
    let mut projected = columns_to_traces(&(&w * &dec.tilde0));
    for (f, input) in inputs.iter().enumerate() {
        for m in 1..input.ncols() {
            let mut mu = TraceVector::zeros(nfine);
            mu.values[f * ns..(f + 1) * ns].copy_from_slice(input.column(m).as_slice());
            basis.push(mu);
            projected.push(responses[f][m].clone());
        }
    }

    let l0_faces = DVector::from_iterator(nf, (0..nf).map(|f| lambda0.values[f * ns]));
    let lambda0_projected = TraceVector {
        values: (&w * l0_faces).as_slice().to_vec(),
    };
    let ttilde_g = disc.apply_ttilde(g);
    let ttilde_projected = loc.apply_pj_tilde(&ttilde_g)?;

    let psi: Vec<TraceVector> = basis
        .iter()
        .zip(&projected)
        .map(|(m, p)| m.sub(p))
        .collect();
    let b_psi: Vec<TraceVector> = psi.iter().map(|p| disc.apply_energy(p)).collect();
    let psi0 = lambda0.sub(&lambda0_projected);
    let r_g = trace_functional(&disc.mesh, &disc.part, &ttilde_g);

    let n = basis.len();
    let psi_m = trace_matrix(&psi, nfine);
    let bpsi_m = trace_matrix(&b_psi, nfine);
    let mut matrix = psi_m.transpose() * &bpsi_m;
    let scale = matrix.amax();
    let asymmetry = if scale > 0.0 {
        (&matrix - matrix.transpose()).amax() / scale
    } else {
        0.0
    };
    symmetrize(&mut matrix);
    let rhs = DVector::from_fn(n, |i, _| {
        -psi[i].dot(&r_g) + b_psi[i].dot(&ttilde_projected) - b_psi[i].dot(&psi0)
    });
    Ok(UpscaledSystem {
        basis,
        n_tilde0: n0,
        projected,
        lambda0_projected,
        ttilde_g,
        ttilde_projected,
        matrix,
        rhs,
        asymmetry,
    })
}

/// `λ̃^{Δ,j} = -P^{Δ,j}T(λ⁰ + λ̃^{0,Π,j}) - P̃^{Δ,j}T̃g`, from the responses
/// stored in `sys`.
pub fn recover_delta(sys: &UpscaledSystem, coeffs: &DVector<f64>) -> TraceVector {
    let n = sys.lambda0_projected.len();
    let mut out = combine(&sys.projected, coeffs, n).scaled(-1.0);
    out.axpy(-1.0, &sys.lambda0_projected);
    out.axpy(-1.0, &sys.ttilde_projected);
    out
}

/// `u⁰` from `(μ⁰, u⁰) = -(μ⁰, w)` for all `μ⁰ ∈ Λ⁰`, where `w = Tλ + T̃g`.
pub fn solve_u0(
    disc: &Discretization,
    dec: &SpaceDecomposition,
    w: &BrokenField,
) -> PiecewiseConstant {
    let r = trace_functional(&disc.mesh, &disc.part, w);
    let ns = disc.part.subfaces;
    let mut rhs = vec![0.0; disc.n_elements()];
    for (f, face) in disc.mesh.faces.iter().enumerate() {
        let total: f64 = r.values[f * ns..(f + 1) * ns].iter().sum();
        rhs[face.left] -= total;
        if let Some(rt) = face.right {
            rhs[rt] += total;
        }
    }
    PiecewiseConstant(dec.solve_v0_pairing(&rhs))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Per element: `max_v |∫σ·∇v - ∫ρgv|` over interior fine hat functions,
    /// relative to `‖|K||w| + |M||g|‖_∞` on the element.
    pub equilibrium_residual: Vec<f64>,
    pub max_equilibrium_residual: f64,
    /// `|u|²_{H¹_A}` (broken).
    pub energy: f64,
    /// `|Σ_τ (λ, Tλ)_{∂τ} - |Tλ|²_{H¹_A}|` relative.
    pub energy_identity_gap: f64,
    /// `max_τ |(λ, 1_τ) + ∫_τ ρg|` relative.
    pub balance_residual: f64,
}

pub struct Solution {
    pub u0: PiecewiseConstant,
    /// `u = u⁰ + Tλ + T̃g`.
    pub u: BrokenField,
    pub lambda: TraceVector,
    pub lambda0: TraceVector,
    pub lambda_tilde0_pi: TraceVector,
    pub lambda_delta: TraceVector,
    /// `A∇(Tλ + T̃g)` per element and fine cell.
    pub flux: Vec<Vec<Point>>,
    pub diagnostics: Diagnostics,
}

fn cell_gradient(p: [Point; 3], v: [f64; 3]) -> Point {
    let area2 =
        (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    let mut g = [0.0; 2];
    for i in 0..3 {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        g[0] += v[i] * (p[j][1] - p[k][1]) / area2;
        g[1] += v[i] * (p[k][0] - p[j][0]) / area2;
    }
    g
}

/// `A∇w` on every fine cell.
pub fn element_flux(disc: &Discretization, w: &BrokenField) -> Vec<Vec<Point>> {
    let lat = &disc.part.lattice;
    (0..disc.n_elements())
        .map(|e| {
            let nodes = disc.part.element_nodes(&disc.mesh, e);
            lat.cells
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    let grad =
                        cell_gradient(cell.map(|i| nodes[i]), cell.map(|i| w.elements[e][i]));
                    disc.field.cell(e, c).apply(grad)
                })
                .collect()
        })
        .collect()
}

/// Per element equilibrium residual of `w = Tλ + T̃g` against the load `g`.
pub fn equilibrium_residuals(disc: &Discretization, w: &BrokenField, g: &BrokenField) -> Vec<f64> {
    let interior = &disc.part.lattice.interior_nodes;
    disc.caches
        .iter()
        .enumerate()
        .map(|(e, c)| {
            let wv = DVector::from_column_slice(&w.elements[e]);
            let gv = DVector::from_column_slice(&g.elements[e]);
            let kw = &c.stiffness * &wv;
            let mg = &c.mass * &gv;
            // componentwise magnitude of the summed terms, |K||w| + |M||g|
            let scale = (c.stiffness.abs() * wv.abs() + c.mass.abs() * gv.abs()).amax();
            if scale == 0.0 {
                return 0.0;
            }
            interior
                .iter()
                .map(|&n| (kw[n] - mg[n]).abs())
                .fold(0.0, f64::max)
                / scale
        })
        .collect()
}

/// `u = u⁰ + Tλ + T̃g`, the flux and the diagnostics.
pub fn reconstruct(
    disc: &Discretization,
    dec: &SpaceDecomposition,
    parts: [TraceVector; 3],
    g: &BrokenField,
) -> Solution {
    let [lambda0, lambda_tilde0_pi, lambda_delta] = parts;
    let lambda = lambda0.add(&lambda_tilde0_pi).add(&lambda_delta);
    let t_lambda = disc.apply_t(&lambda);
    let mut w = t_lambda.clone();
    w.add_assign(&disc.apply_ttilde(g));
    let u0 = solve_u0(disc, dec, &w);
    let mut u = BrokenField::from_constants(&u0, disc.n_nodes());
    u.add_assign(&w);

    let energy = disc.broken_energy(&u);
    let equilibrium_residual = equilibrium_residuals(disc, &w, g);
    let max_equilibrium_residual = equilibrium_residual.iter().copied().fold(0.0, f64::max);
    let t_energy = disc.broken_energy(&t_lambda);
    let pairing = disc.energy_pairing(&lambda, &lambda);
    let energy_identity_gap = if t_energy > 0.0 {
        (pairing - t_energy).abs() / t_energy
    } else {
        pairing.abs()
    };
    let loads = disc.weighted_integrals(g);
    let pair = crate::traces::element_pairings(&disc.mesh, &disc.part, &lambda);
    let load_scale = loads.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let balance = pair
        .iter()
        .zip(&loads)
        .fold(0.0f64, |m, (p, l)| m.max((p + l).abs()));
    let balance_residual = if load_scale > 0.0 {
        balance / load_scale
    } else {
        balance
    };

    Solution {
        flux: element_flux(disc, &w),
        u0,
        u,
        lambda,
        lambda0,
        lambda_tilde0_pi,
        lambda_delta,
        diagnostics: Diagnostics {
            equilibrium_residual,
            max_equilibrium_residual,
            energy,
            energy_identity_gap,
            balance_residual,
        },
    }
}

/// Everything a localized solve produced besides the solution.
pub struct SolveParts {
    pub lambda0_coeffs: Vec<f64>,
    pub system: UpscaledSystem,
    pub coeffs: DVector<f64>,
}

/// Steps four to nine of the method for a prepared setup.
pub fn solve_lsd(
    setup: &Setup,
    layers: Option<usize>,
    g: &BrokenField,
) -> Result<(Solution, SolveParts)> {
    let disc = &setup.disc;
    let dec = &setup.decomposition;
    let (lambda0_coeffs, lambda0) = solve_lambda0(disc, dec, g);
    let loc = setup.localizer(layers);
    let system = assemble_upscaled(setup, &loc, &lambda0, g).map_err(|e| e.at_stage("upscaled"))?;
    let coeffs = system.solve()?;
    let tilde = system.combine(&coeffs);
    let delta = recover_delta(&system, &coeffs);
    let sol = reconstruct(disc, dec, [lambda0, tilde, delta], g);
    Ok((
        sol,
        SolveParts {
            lambda0_coeffs,
            system,
            coeffs,
        },
    ))
}

/// Solution of the full hybrid system over broken P1 × `Λ_h`.
pub struct HybridSolution {
    pub u: BrokenField,
    pub lambda: TraceVector,
    /// `max_F |(e_F, u)_{∂T_H}|` relative to `max |u|` and the face size.
    pub continuity_residual: f64,
}

/// Monolithic direct solve of
/// `(A∇u, ∇v) - (λ, v)_{∂T_H} = (ρg, v)`, `(μ, u)_{∂T_H} = 0`.
pub fn exact_hybrid_solve(disc: &Discretization, g: &BrokenField) -> Result<HybridSolution> {
    let nn = disc.n_nodes();
    let ne = disc.n_elements();
    let nu = nn * ne;
    let nl = disc.n_fine_faces();
    let mut entries = Vec::new();
    let mut rhs = DVector::zeros(nu + nl);
    for (e, c) in disc.caches.iter().enumerate() {
        let off = e * nn;
        for j in 0..nn {
            for i in 0..nn {
                let v = c.stiffness[(i, j)];
                if v != 0.0 {
                    entries.push((off + i, off + j, v));
                }
            }
        }
        let lf = disc.part.local_faces(e);
        for (row, l) in lf.iter().enumerate() {
            for i in 0..nn {
                let v = l.sign * c.boundary[(row, i)];
                if v != 0.0 {
                    entries.push((nu + l.global, off + i, -v));
                    entries.push((off + i, nu + l.global, -v));
                }
            }
        }
        let mg = &c.mass * DVector::from_column_slice(&g.elements[e]);
        rhs.rows_mut(off, nn).copy_from(&mg);
    }
    let lu = SparseLu::new(nu + nl, &entries).map_err(|e| e.at_stage("monolithic"))?;
    let x = lu.solve(&rhs);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stage {
            stage: "monolithic",
            message: "hybrid saddle system is singular".into(),
        });
    }
    let u = BrokenField {
        elements: (0..ne)
            .map(|e| x.as_slice()[e * nn..(e + 1) * nn].to_vec())
            .collect(),
    };
    let lambda = TraceVector {
        values: x.as_slice()[nu..].to_vec(),
    };
    let r = trace_functional(&disc.mesh, &disc.part, &u);
    let umax = u.max_abs();
    let continuity_residual = if umax > 0.0 {
        r.values
            .iter()
            .enumerate()
            .map(|(i, v)| v.abs() / disc.part.fine_face_length(&disc.mesh, i))
            .fold(0.0, f64::max)
            / umax
    } else {
        0.0
    };
    Ok(HybridSolution {
        u,
        lambda,
        continuity_residual,
    })
}

/// Conforming P1 solve with homogeneous Dirichlet data on the union of the
/// element lattices; nodes shared by several elements are merged.
pub fn conforming_solve(disc: &Discretization, g: &BrokenField) -> Result<BrokenField> {
    let mesh = &disc.mesh;
    let lat = &disc.part.lattice;
    let key = |p: Point| -> (i64, i64) {
        let s = 1e9 / mesh.mesh_size();
        ((p[0] * s).round() as i64, (p[1] * s).round() as i64)
    };
    let mut ids: HashMap<(i64, i64), usize> = HashMap::new();
    let mut dirichlet: Vec<bool> = Vec::new();
    let mut maps = Vec::with_capacity(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let pts = disc.part.element_nodes(mesh, e);
        let mut on_boundary = vec![false; pts.len()];
        for k in 0..3 {
            if mesh.faces[mesh.element_faces[e][k]].is_boundary() {
                for &n in &lat.edges[k] {
                    on_boundary[n] = true;
                }
            }
        }
        let map: Vec<usize> = pts
            .iter()
            .zip(&on_boundary)
            .map(|(&p, &b)| {
                let next = ids.len();
                let id = *ids.entry(key(p)).or_insert(next);
                if id == dirichlet.len() {
                    dirichlet.push(false);
                }
                dirichlet[id] |= b;
                id
            })
            .collect();
        maps.push(map);
    }
    let mut free = vec![usize::MAX; ids.len()];
    let mut n_free = 0;
    for (i, d) in dirichlet.iter().enumerate() {
        if !d {
            free[i] = n_free;
            n_free += 1;
        }
    }
    let mut entries = Vec::new();
    let mut rhs = DVector::zeros(n_free);
    for (e, c) in disc.caches.iter().enumerate() {
        let map = &maps[e];
        let mg = &c.mass * DVector::from_column_slice(&g.elements[e]);
        for i in 0..map.len() {
            let fi = free[map[i]];
            if fi == usize::MAX {
                continue;
            }
            rhs[fi] += mg[i];
            for j in 0..map.len() {
                let fj = free[map[j]];
                let v = c.stiffness[(i, j)];
                if fj != usize::MAX && v != 0.0 {
                    entries.push((fi, fj, v));
                }
            }
        }
    }
    let x = if n_free == 0 {
        DVector::zeros(0)
    } else {
        SparseCholesky::new(n_free, &entries)
            .map_err(|e| e.at_stage("conforming"))?
            .solve(&rhs)
    };
    Ok(BrokenField {
        elements: maps
            .iter()
            .map(|m| {
                m.iter()
                    .map(|&i| {
                        if free[i] == usize::MAX {
                            0.0
                        } else {
                            x[free[i]]
                        }
                    })
                    .collect()
            })
            .collect(),
    })
}

/// `|a - b|_{H¹_A}` (broken).
pub fn energy_error(disc: &Discretization, a: &BrokenField, b: &BrokenField) -> f64 {
    disc.broken_energy(&a.sub(b)).max(0.0).sqrt()
}

/// `|u|_{H¹_A}` (broken).
pub fn energy_norm(disc: &Discretization, u: &BrokenField) -> f64 {
    disc.broken_energy(u).max(0.0).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dimensions {
    pub elements: usize,
    pub faces: usize,
    pub fine_faces: usize,
    pub nodes_per_element: usize,
    pub tilde0: usize,
    pub pi_modes: usize,
    pub upscaled: usize,
    pub saturation_layers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RhsReductionReport {
    pub j_min: usize,
    pub j_max: usize,
    pub j_mean: f64,
    /// `max_τ σ_{J_τ+1}^{-1/2}`.
    pub tail_factor: f64,
    /// `‖g - Π_J g‖_{L²_ρ}`.
    pub remainder_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub oracle: String,
    /// `|u_ref - u^{LSD,j}|_{H¹_A}`.
    pub energy_error: f64,
    pub relative_energy_error: f64,
    pub reference_energy: f64,
}

/// One row of the layer-count guidance table: the decay factor
/// `exp(-⌊(j-3)/2⌋ / (1 + d²α_stab))` of the localization estimate, without
/// its unknown constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerGuidance {
    pub j: usize,
    pub decay_factor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SolverConfig,
    pub timings: Vec<StageTiming>,
    pub dimensions: Dimensions,
    pub kappa: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub upscaled_asymmetry: f64,
    pub diagnostics: Diagnostics,
    pub rhs_reduction: Option<RhsReductionReport>,
    pub weighted_rhs_norm: f64,
    pub v0_pairing: V0PairingReport,
    pub delta_in_lambda_tilde: bool,
    pub oracles: Vec<OracleReport>,
    /// `|u - u_h|_{H¹_A} / ‖g‖_{L²_ρ}` with the conforming solve standing in for `u`.
    pub h_tilde_calibration: Option<f64>,
    pub layer_guidance: Vec<LayerGuidance>,
}

struct Clock {
    timings: Vec<StageTiming>,
    last: Instant,
}

impl Clock {
    fn new() -> Self {
        Clock {
            timings: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.into(),
            seconds: (now - self.last).as_secs_f64(),
        });
        self.last = now;
    }
}

fn tag<T>(r: Result<T>, stage: &'static str) -> Result<T> {
    r.map_err(|e| e.at_stage(stage))
}

/// Builds the discretization described by `cfg` for a coefficient function.
pub fn discretize(
    cfg: &SolverConfig,
    a: &(dyn Fn(Point) -> Tensor2 + Sync),
) -> Result<Discretization> {
    let mesh = tag(cfg.mesh.build(), "mesh")?;
    let part = tag(
        FinePartition::new(&mesh, cfg.face_level, cfg.interior_level()),
        "mesh",
    )?;
    let field = tag(CoefficientField::from_fn(&mesh, &part, a), "coefficients")?;
    let rho = tag(make_weight(cfg.weight, &field, None), "weight")?;
    tag(
        Discretization::new(mesh, part, field, rho),
        "element_caches",
    )
}

/// The whole method for one configuration, coefficient and load.
pub fn full_pipeline(
    cfg: &SolverConfig,
    a: &(dyn Fn(Point) -> Tensor2 + Sync),
    g: &(dyn Fn(Point) -> f64 + Sync),
) -> Result<(Solution, RunReport)> {
    tag(cfg.validate(), "config")?;
    let mut clock = Clock::new();
    let disc = discretize(cfg, a)?;
    clock.lap("discretization");
    let kappa = tag(
        local_bounds(&disc.field, &disc.mesh, &disc.part),
        "coefficients",
    )?
    .kappa;
    let g_full = BrokenField::from_fn(&disc.mesh, &disc.part, g);

    let h_tilde = cfg.h_tilde.unwrap_or_else(|| disc.mesh.mesh_size());
    let (g_used, rhs_reduction) = if cfg.rhs_reduction {
        let spectra = tag(
            element_spectra(&disc.caches, h_tilde, cfg.c_j),
            "rhs_reduction",
        )?;
        let (pg, rem) = project_rhs(&g_full, &disc.caches, &spectra);
        clock.lap("rhs_reduction");
        (pg, Some(rhs_report(&spectra, &rem)))
    } else {
        (g_full.clone(), None)
    };

    let setup = Setup::new(disc, cfg.variant, cfg.alpha_stab)?;
    clock.lap("spaces");
    let (sol, parts) = solve_lsd(&setup, cfg.layers, &g_used)?;
    clock.lap("solve");
    let disc = &setup.disc;

    let mut oracles = Vec::new();
    let mut h_tilde_calibration = None;
    if cfg.oracles.monolithic {
        let h = exact_hybrid_solve(disc, &g_full)?;
        oracles.push(oracle_report("monolithic_hybrid", disc, &h.u, &sol.u));
        if cfg.oracles.conforming {
            let c = conforming_solve(disc, &g_full)?;
            let gn = disc.weighted_norm_sq(&g_full).sqrt();
            if gn > 0.0 {
                h_tilde_calibration = Some(energy_error(disc, &c, &h.u) / gn);
            }
            oracles.push(oracle_report("conforming_p1", disc, &c, &sol.u));
        }
        clock.lap("oracles");
    } else if cfg.oracles.conforming {
        let c = conforming_solve(disc, &g_full)?;
        oracles.push(oracle_report("conforming_p1", disc, &c, &sol.u));
        clock.lap("oracles");
    }

    if sol.diagnostics.max_equilibrium_residual > cfg.tolerances.equilibrium {
        return Err(Error::Stage {
            stage: "reconstruct",
            message: format!(
                "equilibrium residual {:e} exceeds {:e}",
                sol.diagnostics.max_equilibrium_residual, cfg.tolerances.equilibrium
            ),
        });
    }
    if parts.system.asymmetry > cfg.tolerances.symmetry {
        return Err(Error::Stage {
            stage: "upscaled",
            message: format!("upscaled matrix asymmetry {:e}", parts.system.asymmetry),
        });
    }

    let saturation = global_saturation(&disc.mesh);
    let d2 = 4.0;
    let layer_guidance = (1..=saturation)
        .map(|j| LayerGuidance {
            j,
            decay_factor: (-((j.saturating_sub(3) / 2) as f64) / (1.0 + d2 * cfg.alpha_stab)).exp(),
        })
        .collect();
    let report = RunReport {
        config: cfg.clone(),
        timings: clock.timings,
        dimensions: Dimensions {
            elements: disc.n_elements(),
            faces: disc.mesh.n_faces(),
            fine_faces: disc.n_fine_faces(),
            nodes_per_element: disc.n_nodes(),
            tilde0: setup.decomposition.dim_tilde0(),
            pi_modes: setup.n_pi(),
            upscaled: parts.system.dim(),
            saturation_layers: saturation,
        },
        kappa,
        alpha_min: setup.min_alpha(),
        alpha_max: setup.max_alpha(),
        upscaled_asymmetry: parts.system.asymmetry,
        diagnostics: sol.diagnostics.clone(),
        rhs_reduction,
        weighted_rhs_norm: disc.weighted_norm_sq(&g_full).sqrt(),
        v0_pairing: check_v0_pairing(&disc.mesh),
        delta_in_lambda_tilde: in_lambda_tilde(&disc.mesh, &disc.part, &sol.lambda_delta, 1e-9),
        oracles,
        h_tilde_calibration,
        layer_guidance,
    };
    Ok((sol, report))
}

fn oracle_report(
    name: &str,
    disc: &Discretization,
    reference: &BrokenField,
    u: &BrokenField,
) -> OracleReport {
    let err = energy_error(disc, reference, u);
    let reference_energy = energy_norm(disc, reference);
    OracleReport {
        oracle: name.into(),
        energy_error: err,
        relative_energy_error: if reference_energy > 0.0 {
            err / reference_energy
        } else {
            err
        },
        reference_energy,
    }
}

fn rhs_report(spectra: &[ElementSpectrum], remainders: &[f64]) -> RhsReductionReport {
    let js: Vec<usize> = spectra.iter().map(|s| s.j).collect();
    RhsReductionReport {
        j_min: js.iter().copied().min().unwrap_or(0),
        j_max: js.iter().copied().max().unwrap_or(0),
        j_mean: js.iter().sum::<usize>() as f64 / js.len().max(1) as f64,
        tail_factor: spectra
            .iter()
            .map(|s| s.tail_inverse().sqrt())
            .fold(0.0, f64::max),
        remainder_norm: remainders.iter().map(|r| r * r).sum::<f64>().sqrt(),
    }
}
