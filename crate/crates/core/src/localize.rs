//! Galerkin projections onto `Λ̃_h^f` (or `Λ̃_h^Δ`) under `(·, T·)`, global
//! and restricted to layer patches, plus ring-energy measurements.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::BrokenField;
use crate::linalg::SpdFactor;
use crate::localop::Discretization;
use crate::mesh::{element_layers, Seed};
use crate::spectral::FaceSpectrum;
use crate::traces::{boundary_integrals, TraceVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Projection onto all of `Λ̃_h^f`.
    Plain,
    /// Projection onto the `Δ` modes only.
    Delta,
}

/// Per-face bases of the projection space and the element energies in them.
pub struct PatchSpace {
    pub variant: Variant,
    /// Per coarse face: fine values (face orientation) × modes.
    pub face_bases: Vec<DMatrix<f64>>,
    /// Per element: local fine faces × the modes of its three faces.
    local_phi: Vec<DMatrix<f64>>,
    /// Per element: `Φᵀ S B S Φ`.
    reduced: Vec<DMatrix<f64>>,
    /// Per element: start of each local edge's block, plus the total.
    block_start: Vec<[usize; 4]>,
    /// Per element: `S B S`.
    energy_global: Vec<DMatrix<f64>>,
}

impl PatchSpace {
    pub fn new(disc: &Discretization, face_bases: Vec<DMatrix<f64>>, variant: Variant) -> Self {
        let mesh = &disc.mesh;
        let per_element: Vec<_> = (0..mesh.n_elements())
            .into_par_iter()
            .map(|e| {
                let c = &disc.caches[e];
                let ef = mesh.element_faces[e];
                let bases = [&face_bases[ef[0]], &face_bases[ef[1]], &face_bases[ef[2]]];
                let phi = c.local_basis(&disc.part, bases);
                let eg = c.energy_global();
                let red = phi.transpose() * &eg * &phi;
                let k: Vec<usize> = bases.iter().map(|b| b.ncols()).collect();
                let starts = [0, k[0], k[0] + k[1], k[0] + k[1] + k[2]];
                (phi, red, starts, eg)
            })
            .collect();
        let mut local_phi = Vec::new();
        let mut reduced = Vec::new();
        let mut block_start = Vec::new();
        let mut energy_global = Vec::new();
        for (p, r, s, g) in per_element {
            local_phi.push(p);
            reduced.push(r);
            block_start.push(s);
            energy_global.push(g);
        }
        PatchSpace {
            variant,
            face_bases,
            local_phi,
            reduced,
            block_start,
            energy_global,
        }
    }

    /// Zero-mean wavelets on every face.
    pub fn plain(disc: &Discretization, haar: &DMatrix<f64>) -> Self {
        Self::new(
            disc,
            vec![haar.clone(); disc.mesh.n_faces()],
            Variant::Plain,
        )
    }

    /// The `Δ` modes of every face.
    pub fn delta(disc: &Discretization, spectra: &[FaceSpectrum]) -> Self {
        Self::new(
            disc,
            spectra.iter().map(|s| s.delta_basis.clone()).collect(),
            Variant::Delta,
        )
    }

    pub fn modes(&self, f: usize) -> usize {
        self.face_bases[f].ncols()
    }
}

/// Active faces of a patch and their offsets in the reduced coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub faces: Vec<usize>,
    offsets: BTreeMap<usize, usize>,
    pub dim: usize,
}

impl ActiveSet {
    pub fn new(space: &PatchSpace, faces: Vec<usize>) -> Self {
        let mut offsets = BTreeMap::new();
        let mut dim = 0;
        for &f in &faces {
            offsets.insert(f, dim);
            dim += space.modes(f);
        }
        ActiveSet {
            faces,
            offsets,
            dim,
        }
    }

    pub fn offset(&self, f: usize) -> Option<usize> {
        self.offsets.get(&f).copied()
    }
}

/// Patch operators `P^{K,j}`, `P^{F,j}` (and `Δ` versions) for a fixed `j`;
/// `j = None` gives the global operators.
pub struct Localizer<'a> {
    pub disc: &'a Discretization,
    pub space: &'a PatchSpace,
    pub layers: Option<usize>,
    global: OnceLock<std::result::Result<SpdFactor, String>>,
}

impl<'a> Localizer<'a> {
    pub fn new(disc: &'a Discretization, space: &'a PatchSpace, layers: Option<usize>) -> Self {
        Localizer {
            disc,
            space,
            layers,
            global: OnceLock::new(),
        }
    }

    /// Faces of the patch seeded at `seed`: those whose incident elements all
    /// lie in `T_j(seed)`.
    pub fn active_set(&self, seed: Seed) -> Result<ActiveSet> {
        let mesh = &self.disc.mesh;
        let faces = match self.layers {
            None => (0..mesh.n_faces()).collect(),
            Some(j) => element_layers(mesh, seed, j)?.enclosed_faces(mesh),
        };
        Ok(ActiveSet::new(self.space, faces))
    }

    pub fn global_set(&self) -> ActiveSet {
        ActiveSet::new(self.space, (0..self.disc.mesh.n_faces()).collect())
    }

    fn contributing_elements(&self, set: &ActiveSet) -> Vec<usize> {
        let mut els: Vec<usize> = set
            .faces
            .iter()
            .flat_map(|&f| self.disc.mesh.faces[f].elements())
            .collect();
        els.sort_unstable();
        els.dedup();
        els
    }

    /// For element `e`: (local block range, reduced offset) of each active edge.
    fn active_blocks(&self, set: &ActiveSet, e: usize) -> Vec<(usize, usize, usize)> {
        let ef = self.disc.mesh.element_faces[e];
        let st = self.space.block_start[e];
        (0..3)
            .filter_map(|k| set.offset(ef[k]).map(|o| (st[k], st[k + 1], o)))
            .collect()
    }

    pub fn factor(&self, set: &ActiveSet) -> Result<SpdFactor> {
        let n = set.dim;
        let els = self.contributing_elements(set);
        SpdFactor::new(
            n,
            || {
                let mut g = DMatrix::zeros(n, n);
                for &e in &els {
                    let r = &self.space.reduced[e];
                    let blocks = self.active_blocks(set, e);
                    for &(a0, a1, oa) in &blocks {
                        for &(b0, b1, ob) in &blocks {
                            for i in a0..a1 {
                                for j in b0..b1 {
                                    g[(oa + i - a0, ob + j - b0)] += r[(i, j)];
                                }
                            }
                        }
                    }
                }
                g
            },
            || {
                let mut t = Vec::new();
                for &e in &els {
                    let r = &self.space.reduced[e];
                    let blocks = self.active_blocks(set, e);
                    for &(a0, a1, oa) in &blocks {
                        for &(b0, b1, ob) in &blocks {
                            for i in a0..a1 {
                                for j in b0..b1 {
                                    t.push((oa + i - a0, ob + j - b0, r[(i, j)]));
                                }
                            }
                        }
                    }
                }
                t
            },
        )
    }

    /// Adds `Φ_eᵀ r_loc` into the reduced vector `out` (active edges only).
    fn reduce_into(&self, set: &ActiveSet, e: usize, r_loc: &DVector<f64>, out: &mut [f64]) {
        let red = self.space.local_phi[e].transpose() * r_loc;
        for (a0, a1, o) in self.active_blocks(set, e) {
            for i in a0..a1 {
                out[o + i - a0] += red[i];
            }
        }
    }

    /// Fine-face values of reduced coefficients.
    pub fn expand(&self, set: &ActiveSet, coeffs: &[f64]) -> TraceVector {
        let ns = self.disc.part.subfaces;
        let mut out = TraceVector::zeros(self.disc.n_fine_faces());
        for &f in &set.faces {
            let o = set.offset(f).expect("active face");
            let k = self.space.modes(f);
            if k == 0 {
                continue;
            }
            let c = DVector::from_column_slice(&coeffs[o..o + k]);
            let v = &self.space.face_bases[f] * c;
            out.values[f * ns..(f + 1) * ns].copy_from_slice(v.as_slice());
        }
        out
    }

    /// Galerkin solves for many seeds. `rhs(i, set)` returns the reduced
    /// right-hand sides (one column each) for seed `i`. Seeds with identical
    /// patches share one factorization.
    pub fn solve_seeds<F>(&self, seeds: &[Seed], rhs: F) -> Result<Vec<Vec<TraceVector>>>
    where
        F: Fn(usize, &ActiveSet) -> DMatrix<f64> + Sync,
    {
        let sets: Vec<ActiveSet> = seeds
            .iter()
            .map(|&s| self.active_set(s))
            .collect::<Result<_>>()?;
        let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for (i, s) in sets.iter().enumerate() {
            groups.entry(s.faces.clone()).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = groups.into_values().collect();
        let solved: Vec<Vec<(usize, Vec<TraceVector>)>> = groups
            .par_iter()
            .map(|members| -> Result<Vec<(usize, Vec<TraceVector>)>> {
                let set = &sets[members[0]];
                let columns = |i: usize| {
                    let b = rhs(i, set);
                    debug_assert_eq!(b.nrows(), set.dim);
                    b
                };
                if set.dim == 0 {
                    return Ok(members
                        .iter()
                        .map(|&i| {
                            let b = columns(i);
                            (
                                i,
                                vec![TraceVector::zeros(self.disc.n_fine_faces()); b.ncols()],
                            )
                        })
                        .collect());
                }
                let is_global = set.faces.len() == self.disc.mesh.n_faces();
                let local;
                let factor = if is_global {
                    self.global_factor()?
                } else {
                    local = self.factor(set).map_err(|_| Error::PatchFactorization {
                        seed: seeds[members[0]].to_string(),
                    })?;
                    &local
                };
                Ok(members
                    .iter()
                    .map(|&i| {
                        let b = columns(i);
                        let x = factor.solve_many(&b);
                        let sols = (0..x.ncols())
                            .map(|c| self.expand(set, x.column(c).as_slice()))
                            .collect();
                        (i, sols)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut out: Vec<Vec<TraceVector>> = vec![Vec::new(); seeds.len()];
        for group in solved {
            for (i, s) in group {
                out[i] = s;
            }
        }
        Ok(out)
    }

    fn global_factor(&self) -> Result<&SpdFactor> {
        let r = self.global.get_or_init(|| {
            let set = self.global_set();
            self.factor(&set).map_err(|e| e.to_string())
        });
        r.as_ref().map_err(|_| Error::PatchFactorization {
            seed: "global".into(),
        })
    }

    /// Reduced right-hand side of `P^{F,j}Tλ^F` for face values `lam`
    /// (columns; rows in face orientation).
    fn face_rhs(&self, set: &ActiveSet, f: usize, lam: &DMatrix<f64>) -> DMatrix<f64> {
        let part = &self.disc.part;
        let ns = part.subfaces;
        let mut out = DMatrix::zeros(set.dim, lam.ncols());
        for e in self.disc.mesh.faces[f].elements() {
            let k = self.disc.mesh.element_faces[e]
                .iter()
                .position(|&x| x == f)
                .expect("incident");
            let local = part.local_faces(e);
            let eg = &self.space.energy_global[e];
            for c in 0..lam.ncols() {
                let mut l = DVector::zeros(3 * ns);
                for m in 0..ns {
                    l[k * ns + m] = lam[(local[k * ns + m].sub, c)];
                }
                let r = eg * l;
                let mut col = vec![0.0; set.dim];
                self.reduce_into(set, e, &r, &mut col);
                for (i, v) in col.into_iter().enumerate() {
                    out[(i, c)] += v;
                }
            }
        }
        out
    }

    /// Reduced right-hand side of `P^{K,j}v` for nodal functions on `K`.
    fn element_rhs(&self, set: &ActiveSet, e: usize, vs: &[Vec<f64>]) -> DMatrix<f64> {
        let part = &self.disc.part;
        let mut out = DMatrix::zeros(set.dim, vs.len());
        for (c, v) in vs.iter().enumerate() {
            let ints = boundary_integrals(&self.disc.mesh, part, e, v);
            let r = DVector::from_iterator(
                ints.len(),
                part.local_faces(e)
                    .iter()
                    .zip(ints)
                    .map(|(lf, i)| lf.sign * i),
            );
            let mut col = vec![0.0; set.dim];
            self.reduce_into(set, e, &r, &mut col);
            out.set_column(c, &DVector::from_vec(col));
        }
        out
    }

    /// `P^{F,j}Tλ^F` for several face value columns per face.
    /// `inputs[f]` has `subfaces` rows (face orientation).
    pub fn face_responses(&self, inputs: &[DMatrix<f64>]) -> Result<Vec<Vec<TraceVector>>> {
        let seeds: Vec<Seed> = (0..self.disc.mesh.n_faces()).map(Seed::Face).collect();
        self.solve_seeds(&seeds, |i, set| self.face_rhs(set, i, &inputs[i]))
    }

    /// `P^{K,j}v_K` for several nodal functions per element.
    pub fn element_responses(&self, inputs: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<TraceVector>>> {
        let seeds: Vec<Seed> = (0..self.disc.n_elements()).map(Seed::Element).collect();
        self.solve_seeds(&seeds, |i, set| self.element_rhs(set, i, &inputs[i]))
    }

    /// `P^j Tλ = Σ_F P^{F,j} Tλ^F`.
    pub fn apply_pj_t(&self, lambda: &TraceVector) -> Result<TraceVector> {
        let ns = self.disc.part.subfaces;
        let inputs: Vec<DMatrix<f64>> = (0..self.disc.mesh.n_faces())
            .map(|f| DMatrix::from_column_slice(ns, 1, &lambda.values[f * ns..(f + 1) * ns]))
            .collect();
        let parts = self.face_responses(&inputs)?;
        Ok(sum_in_order(
            parts.into_iter().flatten(),
            self.disc.n_fine_faces(),
        ))
    }

    /// `P̃^j v = Σ_K P^{K,j} v_K`.
    pub fn apply_pj_tilde(&self, v: &BrokenField) -> Result<TraceVector> {
        let inputs: Vec<Vec<Vec<f64>>> = v.elements.iter().map(|x| vec![x.clone()]).collect();
        let parts = self.element_responses(&inputs)?;
        Ok(sum_in_order(
            parts.into_iter().flatten(),
            self.disc.n_fine_faces(),
        ))
    }

    /// Global Galerkin solve `(μ̃, T x) = μ̃ · r` for all `μ̃` in the space.
    pub fn solve_global_functional(&self, r: &TraceVector) -> Result<TraceVector> {
        let set = self.global_set();
        if set.dim == 0 {
            return Ok(TraceVector::zeros(r.len()));
        }
        let ns = self.disc.part.subfaces;
        let mut b = DMatrix::zeros(set.dim, 1);
        for f in 0..self.disc.mesh.n_faces() {
            let o = set.offset(f).expect("global");
            let k = self.space.modes(f);
            let seg = DVector::from_column_slice(&r.values[f * ns..(f + 1) * ns]);
            let red = self.space.face_bases[f].transpose() * seg;
            for i in 0..k {
                b[(o + i, 0)] = red[i];
            }
        }
        let x = self.global_factor()?.solve_many(&b);
        Ok(self.expand(&set, x.column(0).as_slice()))
    }

    /// Global `P T λ` (or `P^Δ T λ`).
    pub fn apply_p_global_t(&self, lambda: &TraceVector) -> Result<TraceVector> {
        self.solve_global_functional(&self.disc.apply_energy(lambda))
    }

    /// Global `P w` for a broken function `w`.
    pub fn apply_p_global(&self, w: &BrokenField) -> Result<TraceVector> {
        let r = crate::traces::trace_functional(&self.disc.mesh, &self.disc.part, w);
        self.solve_global_functional(&r)
    }
}

/// Sums trace vectors in the given order (deterministic accumulation).
pub fn sum_in_order(parts: impl IntoIterator<Item = TraceVector>, n: usize) -> TraceVector {
    let mut out = TraceVector::zeros(n);
    for p in parts {
        out.axpy(1.0, &p);
    }
    out
}

/// Broken energies of `Tμ` grouped by rings `T_{j+1}(seed) \ T_j(seed)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingProfile {
    pub seed: Seed,
    /// `energies[j]` is the energy on ring `j` (ring 0 is `T_1`).
    pub energies: Vec<f64>,
    pub total: f64,
    /// Geometric ratio fitted on rings `≥ 1`, if at least two are significant.
    pub ratio: Option<f64>,
    /// Number of leading rings without an element touching `∂Ω`.
    pub interior: usize,
}

/// Ring index of every element (`0` for `T_1(seed)`).
pub fn ring_index(disc: &Discretization, seed: Seed) -> Result<Vec<usize>> {
    let n = disc.n_elements();
    let mut ring = vec![usize::MAX; n];
    let mut j = 1;
    let mut assigned = 0;
    while assigned < n {
        let set = element_layers(&disc.mesh, seed, j)?;
        for &e in &set.elements {
            if ring[e] == usize::MAX {
                ring[e] = j - 1;
                assigned += 1;
            }
        }
        j += 1;
    }
    Ok(ring)
}

pub fn ring_energies(disc: &Discretization, mu: &TraceVector, seed: Seed) -> Result<RingProfile> {
    let ring = ring_index(disc, seed)?;
    let per_element = disc.element_energies(mu);
    let n_rings = ring.iter().max().map_or(0, |m| m + 1);
    let mut energies = vec![0.0; n_rings];
    for (e, &r) in ring.iter().enumerate() {
        energies[r] += per_element[e];
    }
    let total: f64 = per_element.iter().sum();
    let ratio = fit_ratio(&energies, 1..n_rings, total);
    let interior = ring
        .iter()
        .enumerate()
        .filter(|&(e, _)| disc.mesh.touches_boundary(e))
        .map(|(_, &r)| r)
        .min()
        .unwrap_or(n_rings);
    Ok(RingProfile {
        seed,
        energies,
        total,
        ratio,
        interior,
    })
}

/// Least-squares geometric ratio of the rings in `rings`, ignoring rings
/// below `1e-14 · total`.
pub fn fit_ratio(energies: &[f64], rings: std::ops::Range<usize>, total: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = energies
        .iter()
        .enumerate()
        .filter(|(j, _)| rings.contains(j))
        .filter(|(_, &e)| e > 1e-14 * total && e > 0.0)
        .map(|(j, &e)| (j as f64, e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

impl RingProfile {
    /// Ratio fitted on rings `skip..interior`, away from the seed and from
    /// the domain boundary.
    pub fn interior_ratio(&self, skip: usize) -> Option<f64> {
        fit_ratio(&self.energies, skip..self.interior, self.total)
    }

    /// Fraction of the total energy outside `T_{j+1}`, i.e. on rings `> j`.
    pub fn tail_fraction(&self, j: usize) -> f64 {
        if self.total == 0.0 {
            return 0.0;
        }
        self.energies.iter().skip(j + 1).sum::<f64>() / self.total
    }

    /// CSV columns `seed,j,energy,cumulative_fraction`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "seed,j,energy,cumulative_fraction")?;
        let mut cum = 0.0;
        for (j, e) in self.energies.iter().enumerate() {
            cum += e;
            let frac = if self.total > 0.0 {
                cum / self.total
            } else {
                0.0
            };
            writeln!(out, "{},{j},{e:e},{frac:e}", seed_label(self.seed))?;
        }
        Ok(())
    }
}

fn seed_label(seed: Seed) -> String {
    match seed {
        Seed::Element(e) => format!("K{e}"),
        Seed::Face(f) => format!("F{f}"),
    }
}
