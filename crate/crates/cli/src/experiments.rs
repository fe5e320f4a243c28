//! Experiment drivers. Each returns typed rows; writing them out is left to
//! the caller.

use lsd_core::coeff::local_bounds;
use lsd_core::field::BrokenField;
use lsd_core::localize::{ring_energies, RingProfile, Variant};
use lsd_core::mesh::{global_saturation, FinePartition, Point, Seed};
use lsd_core::pipeline::{
    conforming_solve, discretize, energy_error, energy_norm, exact_hybrid_solve, full_pipeline,
    solve_lsd, MeshSpec, RunReport, Setup, Solution, SolverConfig,
};
use lsd_core::spectral::{element_spectra, project_rhs};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::presets::Coefficient;
use crate::spec::ExperimentSpec;
use crate::CliError;

pub const MONOLITHIC: &str = "monolithic_hybrid";
pub const CONFORMING: &str = "conforming_p1";

type Rhs<'a> = &'a (dyn Fn(Point) -> f64 + Sync);

fn numerical(stage: &'static str) -> impl Fn(lsd_core::Error) -> CliError {
    move |e| CliError::from(e.at_stage(stage))
}

fn relative(err: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        err / reference
    } else {
        err
    }
}

pub struct SolveOutcome {
    pub solution: Solution,
    pub report: RunReport,
    pub rows: Vec<SolveRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveRow {
    pub elements: usize,
    pub pi_modes: usize,
    pub upscaled_dim: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub max_equilibrium_residual: f64,
    pub energy: f64,
    pub oracle: String,
    pub energy_error: Option<f64>,
    pub relative_energy_error: Option<f64>,
    pub config_hash: String,
}

pub fn solve(spec: &ExperimentSpec, hash: &str) -> Result<SolveOutcome, CliError> {
    let a = spec.coefficient.build()?;
    let g = spec.load.build();
    let (solution, report) = full_pipeline(&spec.solver, &a, &g)?;
    let base = SolveRow {
        elements: report.dimensions.elements,
        pi_modes: report.dimensions.pi_modes,
        upscaled_dim: report.dimensions.upscaled,
        alpha_min: report.alpha_min,
        alpha_max: report.alpha_max,
        max_equilibrium_residual: report.diagnostics.max_equilibrium_residual,
        energy: report.diagnostics.energy,
        oracle: "none".into(),
        energy_error: None,
        relative_energy_error: None,
        config_hash: hash.into(),
    };
    let mut rows: Vec<SolveRow> = report
        .oracles
        .iter()
        .map(|o| SolveRow {
            oracle: o.oracle.clone(),
            energy_error: Some(o.energy_error),
            relative_energy_error: Some(o.relative_energy_error),
            ..base.clone()
        })
        .collect();
    if rows.is_empty() {
        rows.push(base);
    }
    Ok(SolveOutcome {
        solution,
        report,
        rows,
    })
}

/// Ring profile of `T P w` for a linear bump `w` on the element containing
/// `seed_point`, with the global projection of `setup`.
pub fn decay_profile(setup: &Setup, seed_point: Point) -> Result<RingProfile, CliError> {
    let d = &setup.disc;
    let seed = d.mesh.locate(seed_point, 1e-12).ok_or_else(|| {
        CliError::Invalid(format!("seed point {seed_point:?} is outside the mesh"))
    })?;
    let c = d.mesh.element_centroid(seed);
    let h = d.mesh.mesh_size();
    let mut w = BrokenField::zeros(d.n_elements(), d.n_nodes());
    w.elements[seed] = d
        .part
        .element_nodes(&d.mesh, seed)
        .iter()
        .map(|p| (p[0] - c[0]) / h)
        .collect();
    let mu = setup
        .localizer(None)
        .apply_p_global(&w)
        .map_err(numerical("decay"))?;
    ring_energies(d, &mu, Seed::Element(seed)).map_err(numerical("decay"))
}

/// Smallest ring from which the energies are non-increasing.
pub fn monotone_from(energies: &[f64]) -> usize {
    (1..energies.len())
        .rev()
        .find(|&j| energies[j] > energies[j - 1])
        .unwrap_or(0)
}

#[derive(Debug, Clone, Serialize)]
pub struct RingRow {
    pub variant: Variant,
    pub contrast: Option<f64>,
    pub seed_element: usize,
    pub ring: usize,
    pub energy: f64,
    pub relative_energy: f64,
    pub cumulative_fraction: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecaySummary {
    pub variant: Variant,
    pub contrast: Option<f64>,
    pub seed_element: usize,
    pub pi_modes: usize,
    pub alpha_max: f64,
    pub rings: usize,
    pub interior_rings: usize,
    pub ratio: Option<f64>,
    pub interior_ratio: Option<f64>,
    pub tail_fraction: f64,
    pub monotone_from: usize,
}

pub struct DecayOutcome {
    pub rows: Vec<RingRow>,
    pub summaries: Vec<DecaySummary>,
}

fn contrast_cases(
    spec: &ExperimentSpec,
    default: Option<Vec<f64>>,
) -> Result<Vec<(Option<f64>, Coefficient)>, CliError> {
    match spec.sweep.contrasts.clone().or(default) {
        Some(cs) => cs
            .into_iter()
            .map(|c| Ok((Some(c), spec.coefficient.with_contrast(c)?)))
            .collect(),
        None => Ok(vec![(
            spec.coefficient.contrast(),
            spec.coefficient.clone(),
        )]),
    }
}

fn summarize(
    profile: &RingProfile,
    setup: &Setup,
    contrast: Option<f64>,
    spec: &ExperimentSpec,
) -> DecaySummary {
    let Seed::Element(seed_element) = profile.seed else {
        unreachable!("decay profiles are element seeded")
    };
    DecaySummary {
        variant: setup.variant,
        contrast,
        seed_element,
        pi_modes: setup.n_pi(),
        alpha_max: setup.max_alpha(),
        rings: profile.energies.len(),
        interior_rings: profile.interior,
        ratio: profile.ratio,
        interior_ratio: profile.interior_ratio(spec.decay.skip),
        tail_fraction: profile.tail_fraction(spec.decay.tail_ring),
        monotone_from: monotone_from(&profile.energies),
    }
}

pub fn decay(spec: &ExperimentSpec, hash: &str) -> Result<DecayOutcome, CliError> {
    let variants = spec
        .sweep
        .variants
        .clone()
        .unwrap_or(vec![spec.solver.variant]);
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (contrast, coef) in contrast_cases(spec, None)? {
        let a = coef.build()?;
        for &variant in &variants {
            let disc = discretize(&spec.solver, &a)?;
            let setup =
                Setup::new(disc, variant, spec.solver.alpha_stab).map_err(numerical("spaces"))?;
            let profile = decay_profile(&setup, spec.decay.seed_point)?;
            let s = summarize(&profile, &setup, contrast, spec);
            let mut cum = 0.0;
            for (ring, &energy) in profile.energies.iter().enumerate() {
                cum += energy;
                rows.push(RingRow {
                    variant,
                    contrast,
                    seed_element: s.seed_element,
                    ring,
                    energy,
                    relative_energy: relative(energy, profile.total),
                    cumulative_fraction: relative(cum, profile.total),
                    config_hash: hash.into(),
                });
            }
            summaries.push(s);
        }
    }
    Ok(DecayOutcome { rows, summaries })
}

#[derive(Debug, Clone, Serialize)]
pub struct JRow {
    pub j: usize,
    pub energy_error: f64,
    pub relative_energy_error: f64,
    pub max_equilibrium_residual: f64,
    pub oracle: &'static str,
    pub config_hash: String,
}

fn load_field(spec: &ExperimentSpec, setup: &Setup, g: Rhs) -> Result<BrokenField, CliError> {
    let d = &setup.disc;
    let g = BrokenField::from_fn(&d.mesh, &d.part, g);
    if !spec.solver.rhs_reduction {
        return Ok(g);
    }
    let h_tilde = spec.solver.h_tilde.unwrap_or_else(|| d.mesh.mesh_size());
    let spectra =
        element_spectra(&d.caches, h_tilde, spec.solver.c_j).map_err(numerical("rhs_reduction"))?;
    Ok(project_rhs(&g, &d.caches, &spectra).0)
}

pub fn j_sweep(spec: &ExperimentSpec, hash: &str) -> Result<Vec<JRow>, CliError> {
    let a = spec.coefficient.build()?;
    let g = spec.load.build();
    let disc = discretize(&spec.solver, &a)?;
    let setup = Setup::new(disc, spec.solver.variant, spec.solver.alpha_stab)
        .map_err(numerical("spaces"))?;
    let gf = load_field(spec, &setup, &g)?;
    let reference = exact_hybrid_solve(&setup.disc, &gf).map_err(numerical("oracle"))?;
    let norm = energy_norm(&setup.disc, &reference.u);
    let layers = spec
        .sweep
        .layers
        .clone()
        .unwrap_or_else(|| (1..=global_saturation(&setup.disc.mesh)).collect());
    layers
        .into_iter()
        .map(|j| {
            let (sol, _) = solve_lsd(&setup, Some(j), &gf)?;
            let err = energy_error(&setup.disc, &reference.u, &sol.u);
            Ok(JRow {
                j,
                energy_error: err,
                relative_energy_error: relative(err, norm),
                max_equilibrium_residual: sol.diagnostics.max_equilibrium_residual,
                oracle: MONOLITHIC,
                config_hash: hash.into(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ContrastRow {
    pub contrast: Option<f64>,
    pub variant: Variant,
    pub kappa: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub pi_modes: usize,
    pub decay_ratio: Option<f64>,
    pub interior_decay_ratio: Option<f64>,
    pub tail_fraction: f64,
    pub layers: Option<usize>,
    pub max_equilibrium_residual: Option<f64>,
    pub energy_error: Option<f64>,
    pub relative_energy_error: Option<f64>,
    pub oracle: &'static str,
    pub config_hash: String,
}

/// Decay profile and, when the monolithic oracle is enabled, the energy error
/// at the configured layer count, per contrast and variant.
pub fn contrast_sweep(spec: &ExperimentSpec, hash: &str) -> Result<Vec<ContrastRow>, CliError> {
    let variants = spec
        .sweep
        .variants
        .clone()
        .unwrap_or(vec![Variant::Plain, Variant::Delta]);
    let g = spec.load.build();
    let mut rows = Vec::new();
    for (contrast, coef) in contrast_cases(spec, Some(vec![1e2, 1e4, 1e6]))? {
        let a = coef.build()?;
        for &variant in &variants {
            let disc = discretize(&spec.solver, &a)?;
            let kappa = local_bounds(&disc.field, &disc.mesh, &disc.part)
                .map_err(numerical("coefficients"))?
                .kappa;
            let setup =
                Setup::new(disc, variant, spec.solver.alpha_stab).map_err(numerical("spaces"))?;
            let profile = decay_profile(&setup, spec.decay.seed_point)?;
            let s = summarize(&profile, &setup, contrast, spec);
            let mut row = ContrastRow {
                contrast,
                variant,
                kappa,
                alpha_min: setup.min_alpha(),
                alpha_max: s.alpha_max,
                pi_modes: s.pi_modes,
                decay_ratio: s.ratio,
                interior_decay_ratio: s.interior_ratio,
                tail_fraction: s.tail_fraction,
                layers: spec.solver.layers,
                max_equilibrium_residual: None,
                energy_error: None,
                relative_energy_error: None,
                oracle: "none",
                config_hash: hash.into(),
            };
            if spec.solver.oracles.monolithic {
                let gf = load_field(spec, &setup, &g)?;
                let reference =
                    exact_hybrid_solve(&setup.disc, &gf).map_err(numerical("oracle"))?;
                let (sol, _) = solve_lsd(&setup, spec.solver.layers, &gf)?;
                let err = energy_error(&setup.disc, &reference.u, &sol.u);
                row.max_equilibrium_residual = Some(sol.diagnostics.max_equilibrium_residual);
                row.energy_error = Some(err);
                row.relative_energy_error =
                    Some(relative(err, energy_norm(&setup.disc, &reference.u)));
                row.oracle = MONOLITHIC;
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct HRow {
    pub nx: usize,
    pub h: f64,
    pub energy_error: f64,
    pub relative_energy_error: f64,
    pub rate: Option<f64>,
    pub max_equilibrium_residual: f64,
    pub oracle: &'static str,
    pub reference_nx: usize,
    pub reference_interior_level: u32,
    pub config_hash: String,
}

/// Runs the pipeline on nested structured meshes and measures each solution
/// against one conforming solve on a common fine lattice.
pub fn h_convergence(spec: &ExperimentSpec, hash: &str) -> Result<Vec<HRow>, CliError> {
    let MeshSpec::Structured { domain, .. } = spec.solver.mesh else {
        return Err(CliError::Invalid(
            "h_convergence needs a structured mesh".into(),
        ));
    };
    let levels = spec.sweep.levels.clone().unwrap_or(vec![2, 4, 8]);
    let coarsest = *levels.iter().min().expect("levels validated nonempty");
    let finest = *levels.iter().max().expect("levels validated nonempty");
    let ref_nx = spec.reference.nx.unwrap_or(finest);
    let ref_level = spec
        .reference
        .interior_level
        .unwrap_or(spec.solver.interior_level() + (finest / coarsest).ilog2());
    let ref_lattice = ref_nx << ref_level;
    for &n in &levels {
        let lattice = n << spec.solver.interior_level();
        if !ref_lattice.is_multiple_of(lattice) || !ref_nx.is_multiple_of(n) {
            return Err(CliError::Invalid(format!(
                "reference {ref_nx} x {ref_nx} at level {ref_level} does not nest level {n}"
            )));
        }
    }

    let a = spec.coefficient.build()?;
    let g = spec.load.build();
    let ref_cfg = SolverConfig {
        mesh: MeshSpec::Structured {
            nx: ref_nx,
            ny: ref_nx,
            domain,
        },
        face_level: ref_level - 1,
        interior_level: Some(ref_level),
        ..spec.solver.clone()
    };
    let rdisc = discretize(&ref_cfg, &a)?;
    let gr = BrokenField::from_fn(&rdisc.mesh, &rdisc.part, &g);
    let reference = conforming_solve(&rdisc, &gr).map_err(numerical("oracle"))?;
    let ref_norm = energy_norm(&rdisc, &reference);

    let mut rows: Vec<HRow> = Vec::new();
    for &n in &levels {
        let cfg = SolverConfig {
            mesh: MeshSpec::Structured {
                nx: n,
                ny: n,
                domain,
            },
            ..spec.solver.clone()
        };
        let (sol, report) = full_pipeline(&cfg, &a, &g)?;
        let mesh = cfg.mesh.build()?;
        let part = FinePartition::new(&mesh, cfg.face_level, cfg.interior_level())?;
        let u = sol
            .u
            .prolongate(&mesh, &part, &rdisc.mesh, &rdisc.part)
            .ok_or_else(|| {
                CliError::Invalid(format!("level {n} does not nest in the reference mesh"))
            })?;
        let err = energy_error(&rdisc, &reference, &u);
        let h = mesh.mesh_size();
        let rate = rows
            .last()
            .map(|p| (p.energy_error / err).ln() / (p.h / h).ln());
        rows.push(HRow {
            nx: n,
            h,
            energy_error: err,
            relative_energy_error: relative(err, ref_norm),
            rate,
            max_equilibrium_residual: report.diagnostics.max_equilibrium_residual,
            oracle: CONFORMING,
            reference_nx: ref_nx,
            reference_interior_level: ref_level,
            config_hash: hash.into(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct RhsRow {
    pub h_tilde_factor: f64,
    pub h_tilde: f64,
    pub j_min: usize,
    pub j_max: usize,
    pub j_mean: f64,
    pub energy_error: f64,
    pub bound: f64,
    pub bound_holds: bool,
    pub weighted_rhs_norm: f64,
    pub remainder_norm: f64,
    pub poincare_max_ratio: f64,
    pub poincare_samples: usize,
    pub oracle: &'static str,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoincareRow {
    pub h_tilde_factor: f64,
    pub element: usize,
    pub j: usize,
    pub tail_inverse: f64,
    /// `max ‖v‖²_{L²_ρ} / (σ_{J+1}^{-1} |v|²_{H¹_A})` over the samples.
    pub max_ratio: f64,
    pub config_hash: String,
}

pub struct RhsOutcome {
    pub rows: Vec<RhsRow>,
    pub poincare: Vec<PoincareRow>,
}

/// Exact solves with `g` and with `Π_J g`, compared against the spectral
/// bound; also samples the local Poincaré inequality on the complement of
/// the retained modes.
pub fn rhs_reduction(spec: &ExperimentSpec, hash: &str) -> Result<RhsOutcome, CliError> {
    let a = spec.coefficient.build()?;
    let g = spec.load.build();
    let disc = discretize(&spec.solver, &a)?;
    let gf = BrokenField::from_fn(&disc.mesh, &disc.part, &g);
    let full = exact_hybrid_solve(&disc, &gf).map_err(numerical("oracle"))?;
    let gn = disc.weighted_norm_sq(&gf).sqrt();
    let h = disc.mesh.mesh_size();
    let factors = spec.sweep.h_tilde_factors.clone().unwrap_or(vec![1.0, 0.5]);
    let mut rows = Vec::new();
    let mut poincare = Vec::new();
    for (k, &factor) in factors.iter().enumerate() {
        let h_tilde = factor * h;
        let spectra = element_spectra(&disc.caches, h_tilde, spec.solver.c_j)
            .map_err(numerical("rhs_reduction"))?;
        let (pg, rem) = project_rhs(&gf, &disc.caches, &spectra);
        let reduced = exact_hybrid_solve(&disc, &pg).map_err(numerical("oracle"))?;
        let err = energy_error(&disc, &full.u, &reduced.u);
        let tail = spectra
            .iter()
            .map(|s| s.tail_inverse().sqrt())
            .fold(0.0, f64::max);
        let bound = tail * gn;

        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut worst = 0.0f64;
        for (c, s) in disc.caches.iter().zip(&spectra) {
            let mut max_ratio = 0.0f64;
            if s.tail_inverse() > 0.0 {
                let vj = s.vectors.columns(0, s.j);
                for _ in 0..spec.samples {
                    let x = DVector::from_fn(c.mass.nrows(), |_, _| rng.gen_range(-1.0..1.0));
                    let v = &x - vj * (vj.transpose() * (&c.mass * &x));
                    let l2 = v.dot(&(&c.mass * &v));
                    let h1 = v.dot(&(&c.stiffness * &v));
                    max_ratio = max_ratio.max(l2 / (s.tail_inverse() * h1));
                }
            }
            worst = worst.max(max_ratio);
            poincare.push(PoincareRow {
                h_tilde_factor: factor,
                element: c.element,
                j: s.j,
                tail_inverse: s.tail_inverse(),
                max_ratio,
                config_hash: hash.into(),
            });
        }
        let js: Vec<usize> = spectra.iter().map(|s| s.j).collect();
        rows.push(RhsRow {
            h_tilde_factor: factor,
            h_tilde,
            j_min: js.iter().copied().min().unwrap_or(0),
            j_max: js.iter().copied().max().unwrap_or(0),
            j_mean: js.iter().sum::<usize>() as f64 / js.len().max(1) as f64,
            energy_error: err,
            bound,
            bound_holds: err <= bound * (1.0 + 1e-10),
            weighted_rhs_norm: gn,
            remainder_norm: rem.iter().map(|r| r * r).sum::<f64>().sqrt(),
            poincare_max_ratio: worst,
            poincare_samples: spec.samples,
            oracle: MONOLITHIC,
            config_hash: hash.into(),
        });
    }
    Ok(RhsOutcome { rows, poincare })
}
