mod common;

use common::*;
use lsd_core::coeff::{weighted_norm_sq, Tensor2, WeightChoice};
use lsd_core::field::BrokenField;
use lsd_core::localize::Variant;
use lsd_core::mesh::global_saturation;
use lsd_core::pipeline::*;
use lsd_core::traces::{element_pairings, pairing_constant, v0_pairing_dense, TraceVector};
use nalgebra::DVector;

fn identity(_: [f64; 2]) -> Tensor2 {
    Tensor2::scalar(1.0)
}

fn broken(s: &Setup, g: impl Fn([f64; 2]) -> f64) -> BrokenField {
    BrokenField::from_fn(&s.disc.mesh, &s.disc.part, g)
}

fn rel_energy_error(s: &Setup, reference: &BrokenField, u: &BrokenField) -> f64 {
    energy_error(&s.disc, reference, u) / energy_norm(&s.disc, reference)
}

#[test]
fn four_step_solve_reproduces_the_monolithic_solution() {
    let s = setup(4, 2, &identity, Variant::Delta, 1e12);
    assert_eq!(s.n_pi(), 0);
    let g = broken(&s, smooth_g);
    let mono = exact_hybrid_solve(&s.disc, &g).unwrap();
    assert!(mono.continuity_residual < 1e-10);
    for layers in [None, Some(global_saturation(&s.disc.mesh))] {
        let (sol, _) = solve_lsd(&s, layers, &g).unwrap();
        assert!(rel_energy_error(&s, &mono.u, &sol.u) < 1e-9);
        assert!(sol.lambda.sub(&mono.lambda).norm() < 1e-9 * mono.lambda.norm());
        assert!(mono.u.sub(&sol.u).max_abs() < 1e-9 * mono.u.max_abs());
    }
}

#[test]
fn zero_load_gives_zero_everything() {
    let s = setup(3, 1, &smooth_a, Variant::Delta, 2.0);
    let g = BrokenField::zeros(s.disc.n_elements(), s.disc.n_nodes());
    let mono = exact_hybrid_solve(&s.disc, &g).unwrap();
    assert_eq!(mono.u.max_abs(), 0.0);
    assert_eq!(mono.lambda.norm(), 0.0);
    let (sol, parts) = solve_lsd(&s, Some(1), &g).unwrap();
    assert_eq!(parts.system.rhs.amax(), 0.0);
    assert_eq!(sol.lambda.norm(), 0.0);
    assert_eq!(sol.u.max_abs(), 0.0);
    assert!(sol
        .flux
        .iter()
        .flatten()
        .all(|f| f[0] == 0.0 && f[1] == 0.0));
    assert!(sol.u0.0.iter().all(|v| *v == 0.0));
}

#[test]
fn lambda0_matches_a_dense_solve() {
    let s = setup(4, 1, &identity, Variant::Plain, 10.0);
    let g = broken(&s, |_| 1.0);
    let (c, trace) = solve_lambda0(&s.disc, &s.decomposition, &g);
    let z = v0_pairing_dense(&s.disc.mesh);
    let rhs = DVector::from_iterator(
        s.disc.n_elements(),
        (0..s.disc.n_elements()).map(|e| -s.disc.mesh.element_area(e)),
    );
    let dense = z.lu().solve(&rhs).unwrap();
    for (a, b) in c.iter().zip(dense.iter()) {
        assert!((a - b).abs() <= 1e-12 * dense.amax());
    }
    let pairs = element_pairings(&s.disc.mesh, &s.disc.part, &trace);
    for (p, r) in pairs.iter().zip(rhs.iter()) {
        assert!((p - r).abs() <= 1e-12);
    }
    let zero = BrokenField::zeros(s.disc.n_elements(), s.disc.n_nodes());
    assert_eq!(
        solve_lambda0(&s.disc, &s.decomposition, &zero).1.norm(),
        0.0
    );
}

#[test]
fn upscaled_matrix_is_symmetric_and_matches_the_global_one_at_saturation() {
    let s = setup(4, 2, &barrier(4, 1e3), Variant::Delta, 10.0);
    assert!(s.n_pi() > 0);
    let g = broken(&s, smooth_g);
    let (_, l0) = solve_lambda0(&s.disc, &s.decomposition, &g);
    let sat = global_saturation(&s.disc.mesh);
    let local = assemble_upscaled(&s, &s.localizer(Some(sat)), &l0, &g).unwrap();
    let global = assemble_upscaled(&s, &s.localizer(None), &l0, &g).unwrap();
    assert!(local.asymmetry < 1e-11 && global.asymmetry < 1e-11);
    let scale = global.matrix.amax();
    assert!((&local.matrix - &global.matrix).amax() <= 1e-10 * scale);
    assert!((&local.rhs - &global.rhs).amax() <= 1e-10 * global.rhs.amax());
    assert_eq!(global.dim(), s.decomposition.dim_tilde0() + s.n_pi());
}

#[test]
fn delta_recovery_matches_global_formula_and_lies_in_delta_space() {
    let s = setup(4, 2, &barrier(4, 1e3), Variant::Delta, 10.0);
    let g = broken(&s, smooth_g);
    let sat = global_saturation(&s.disc.mesh);
    let (sol, parts) = solve_lsd(&s, Some(sat), &g).unwrap();
    let global = s.localizer(None);
    let tl = sol.lambda0.add(&sol.lambda_tilde0_pi);
    let mut w = s.disc.apply_t(&tl);
    w.add_assign(&parts.system.ttilde_g);
    let expected = global.apply_p_global(&w).unwrap().scaled(-1.0);
    assert!(sol.lambda_delta.sub(&expected).norm() <= 1e-10 * expected.norm());

    let ns = s.disc.part.subfaces;
    for (f, spec) in s.face_spectra.iter().enumerate() {
        let v = DVector::from_column_slice(&sol.lambda_delta.values[f * ns..(f + 1) * ns]);
        let b = &spec.delta_basis;
        if b.ncols() == 0 {
            assert!(v.amax() < 1e-12);
            continue;
        }
        let coeffs = (b.transpose() * b)
            .lu()
            .solve(&(b.transpose() * &v))
            .unwrap();
        assert!((b * coeffs - &v).amax() <= 1e-9 * v.amax().max(1e-300));
    }
}

#[test]
fn u0_matches_the_monolithic_element_averages() {
    let s = setup(4, 2, &smooth_a, Variant::Delta, 1e12);
    let g = broken(&s, smooth_g);
    let mono = exact_hybrid_solve(&s.disc, &g).unwrap();
    let (sol, _) = solve_lsd(&s, None, &g).unwrap();
    for (e, c) in s.disc.caches.iter().enumerate() {
        let avg = c.weighted_average(&mono.u.elements[e]);
        assert!((avg - sol.u0.0[e]).abs() <= 1e-10 * mono.u.max_abs());
    }
}

#[test]
fn constant_load_solution_is_symmetric() {
    let s = setup(4, 1, &identity, Variant::Plain, 10.0);
    let g = broken(&s, |_| 1.0);
    let (sol, _) = solve_lsd(&s, Some(2), &g).unwrap();
    let mesh = &s.disc.mesh;
    let cents: Vec<[f64; 2]> = (0..mesh.n_elements())
        .map(|e| mesh.element_centroid(e))
        .collect();
    for (e, c) in cents.iter().enumerate() {
        let mirror = [c[1], c[0]];
        let m = cents
            .iter()
            .position(|d| (d[0] - mirror[0]).abs() < 1e-12 && (d[1] - mirror[1]).abs() < 1e-12)
            .unwrap();
        assert!((sol.u0.0[e] - sol.u0.0[m]).abs() < 1e-12 * sol.u0.0[e].abs().max(1.0));
    }
}

#[test]
fn equilibrium_and_energy_identity_hold_for_small_layer_counts() {
    for variant in [Variant::Plain, Variant::Delta] {
        let s = setup(5, 2, &barrier(5, 1e4), variant, 10.0);
        let g = broken(&s, smooth_g);
        for j in 1..=2 {
            let (sol, _) = solve_lsd(&s, Some(j), &g).unwrap();
            let d = &sol.diagnostics;
            assert!(d.max_equilibrium_residual <= 1e-10, "{variant:?} j={j}");
            assert!(d.energy_identity_gap <= 1e-10);
            assert!(d.balance_residual <= 1e-10);
            let pairing = pairing_constant(
                &s.disc.mesh,
                &s.disc.part,
                &sol.lambda,
                &lsd_core::field::PiecewiseConstant(vec![1.0; s.disc.n_elements()]),
            );
            let load: f64 = s.disc.weighted_integrals(&g).iter().sum();
            assert!((pairing + load).abs() <= 1e-10 * load.abs());
        }
    }
}

#[test]
fn localized_error_is_monotone_in_layers() {
    let s = setup(5, 2, &barrier(5, 1e4), Variant::Delta, 10.0);
    let g = broken(&s, smooth_g);
    let mono = exact_hybrid_solve(&s.disc, &g).unwrap();
    let sat = global_saturation(&s.disc.mesh);
    let errs: Vec<f64> = (1..=sat)
        .map(|j| rel_energy_error(&s, &mono.u, &solve_lsd(&s, Some(j), &g).unwrap().0.u))
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{errs:?}");
    }
    assert!(errs[sat - 1] <= 1e-9);
}

#[test]
fn conforming_reference_converges_to_the_hybrid_solution() {
    let coarse = setup(2, 1, &identity, Variant::Plain, 10.0);
    let fine = setup(2, 3, &identity, Variant::Plain, 10.0);
    let errs: Vec<f64> = [&coarse, &fine]
        .iter()
        .map(|s| {
            let g = broken(s, smooth_g);
            let c = conforming_solve(&s.disc, &g).unwrap();
            let h = exact_hybrid_solve(&s.disc, &g).unwrap();
            rel_energy_error(s, &c, &h.u)
        })
        .collect();
    assert!(errs[1] < 0.5 * errs[0], "{errs:?}");
}

#[test]
fn conforming_solution_vanishes_on_the_boundary() {
    let s = setup(3, 1, &smooth_a, Variant::Plain, 10.0);
    let g = broken(&s, smooth_g);
    let c = conforming_solve(&s.disc, &g).unwrap();
    for e in 0..s.disc.n_elements() {
        let pts = s.disc.part.element_nodes(&s.disc.mesh, e);
        for (p, v) in pts.iter().zip(&c.elements[e]) {
            let on = p[0].abs() < 1e-12
                || p[1].abs() < 1e-12
                || (p[0] - 1.0).abs() < 1e-12
                || (p[1] - 1.0).abs() < 1e-12;
            if on {
                assert_eq!(*v, 0.0);
            }
        }
    }
}

#[test]
fn low_contrast_threshold_reproduces_the_plain_method() {
    let mut cfg = config(4, 2);
    cfg.alpha_stab = 1e9;
    let a = barrier(4, 1e2);
    let (delta, _) = full_pipeline(&cfg, &a, &smooth_g).unwrap();
    cfg.variant = Variant::Plain;
    let (plain, _) = full_pipeline(&cfg, &a, &smooth_g).unwrap();
    let diff = delta.u.sub(&plain.u).max_abs();
    assert!(diff <= 1e-10 * plain.u.max_abs());
}

#[test]
fn reduction_is_inert_for_loads_already_in_the_reduced_space() {
    let mut cfg = config(3, 2);
    let g = |_: [f64; 2]| 2.5;
    let (off, _) = full_pipeline(&cfg, &smooth_a, &g).unwrap();
    cfg.rhs_reduction = true;
    let (on, report) = full_pipeline(&cfg, &smooth_a, &g).unwrap();
    assert!(report.rhs_reduction.unwrap().remainder_norm < 1e-12);
    assert!(on.u.sub(&off.u).max_abs() <= 1e-12 * off.u.max_abs());
}

#[test]
fn reduction_error_obeys_the_spectral_bound() {
    let s = setup(4, 2, &barrier(4, 1e3), Variant::Delta, 1e12);
    let g = broken(&s, |p| (7.0 * p[0]).sin() * (5.0 * p[1]).cos() + p[0]);
    for h_tilde in [0.35, 0.18] {
        let spectra = lsd_core::spectral::element_spectra(&s.disc.caches, h_tilde, 1.0).unwrap();
        let (pg, _) = lsd_core::spectral::project_rhs(&g, &s.disc.caches, &spectra);
        let full = exact_hybrid_solve(&s.disc, &g).unwrap();
        let reduced = exact_hybrid_solve(&s.disc, &pg).unwrap();
        let err = energy_error(&s.disc, &full.u, &reduced.u);
        let factor = spectra
            .iter()
            .map(|sp| sp.tail_inverse().sqrt())
            .fold(0.0, f64::max);
        let gn = s.disc.weighted_norm_sq(&g).sqrt();
        assert!(
            err <= factor * gn * (1.0 + 1e-10),
            "{err} > {factor} * {gn}"
        );
    }
}

#[test]
fn weighted_norms_are_dual() {
    let cfg = SolverConfig {
        weight: WeightChoice::APlus,
        ..config(3, 1)
    };
    let disc = discretize(&cfg, &barrier(3, 50.0)).unwrap();
    let g = BrokenField::from_fn(&disc.mesh, &disc.part, smooth_g);
    let a = disc.weighted_norm_sq(&g);
    let b = weighted_norm_sq(&disc.mesh, &disc.part, &disc.rho, &g);
    assert!((a - b).abs() <= 1e-12 * a);
    // ‖ρg‖²_{L²_{1/ρ}} with ρ constant per cell
    let mut dual = 0.0;
    for e in 0..disc.n_elements() {
        let nodes = disc.part.element_nodes(&disc.mesh, e);
        for (c, cell) in disc.part.lattice.cells.iter().enumerate() {
            let r = disc.rho.cell(e, c);
            let p = cell.map(|k| nodes[k]);
            let area = 0.5
                * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                    - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]));
            let f = cell.map(|k| r * g.elements[e][k]);
            let s =
                f[0] * f[0] + f[1] * f[1] + f[2] * f[2] + f[0] * f[1] + f[1] * f[2] + f[0] * f[2];
            dual += area * s / 6.0 / r;
        }
    }
    assert!((dual - a).abs() <= 1e-12 * a);
}

#[test]
fn full_pipeline_reports_oracles_and_tags_stage_errors() {
    let mut cfg = config(3, 1);
    cfg.oracles = Oracles {
        monolithic: true,
        conforming: true,
    };
    cfg.layers = None;
    cfg.alpha_stab = 1e12;
    let (_, report) = full_pipeline(&cfg, &smooth_a, &smooth_g).unwrap();
    assert_eq!(report.oracles.len(), 2);
    assert!(report.oracles[0].relative_energy_error < 1e-9);
    assert!(report.h_tilde_calibration.unwrap() > 0.0);
    assert!(report.v0_pairing.irreducible);
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("\"timings\""));

    cfg.layers = Some(0);
    let err = full_pipeline(&cfg, &smooth_a, &smooth_g).err().unwrap();
    assert!(err.to_string().starts_with("config:"));
    let _ = TraceVector::zeros(0);
}
