#![allow(dead_code)]

use lsd_core::coeff::Tensor2;
use lsd_core::field::BrokenField;
use lsd_core::localize::Variant;
use lsd_core::mesh::Rect;
use lsd_core::pipeline::{discretize, MeshSpec, Setup, SolverConfig};
use lsd_core::traces::TraceVector;
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn config(n: usize, face_level: u32) -> SolverConfig {
    SolverConfig {
        mesh: MeshSpec::Structured {
            nx: n,
            ny: n,
            domain: Rect::unit(),
        },
        face_level,
        ..SolverConfig::default()
    }
}

pub fn smooth_a(p: [f64; 2]) -> Tensor2 {
    Tensor2::scalar(1.0 + 0.5 * (2.0 * std::f64::consts::PI * p[0]).sin() * (3.0 * p[1]).cos())
}

/// Thin horizontal strip of conductivity `1/contrast` through the element row above `y = 1/2`.
pub fn barrier(n: usize, contrast: f64) -> impl Fn([f64; 2]) -> Tensor2 + Sync {
    let h = 1.0 / n as f64;
    move |p| {
        let y0 = 0.5 + 0.25 * h;
        if p[1] > y0 && p[1] < y0 + 0.5 * h {
            Tensor2::scalar(1.0 / contrast)
        } else {
            Tensor2::scalar(1.0)
        }
    }
}

pub fn setup(
    n: usize,
    face_level: u32,
    a: &(dyn Fn([f64; 2]) -> Tensor2 + Sync),
    variant: Variant,
    alpha_stab: f64,
) -> Setup {
    let disc = discretize(&config(n, face_level), a).unwrap();
    Setup::new(disc, variant, alpha_stab).unwrap()
}

pub fn smooth_g(p: [f64; 2]) -> f64 {
    (std::f64::consts::PI * p[0]).sin() * (1.0 + p[1] * p[1]) + 0.3
}

/// Random element of the projection space of `setup`.
pub fn random_fine(setup: &Setup, rng: &mut ChaCha8Rng) -> TraceVector {
    let ns = setup.disc.part.subfaces;
    let mut out = TraceVector::zeros(setup.disc.n_fine_faces());
    for f in 0..setup.disc.mesh.n_faces() {
        let b = &setup.space.face_bases[f];
        let c = DVector::from_fn(b.ncols(), |_, _| rng.gen_range(-1.0..1.0));
        out.values[f * ns..(f + 1) * ns].copy_from_slice((b * c).as_slice());
    }
    out
}

pub fn random_trace(n: usize, rng: &mut ChaCha8Rng) -> TraceVector {
    TraceVector {
        values: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

pub fn random_broken(setup: &Setup, rng: &mut ChaCha8Rng) -> BrokenField {
    BrokenField {
        elements: (0..setup.disc.n_elements())
            .map(|_| {
                (0..setup.disc.n_nodes())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect(),
    }
}

/// `|Tμ|_{H¹_A}`.
pub fn t_norm(setup: &Setup, mu: &TraceVector) -> f64 {
    setup.disc.energy_pairing(mu, mu).max(0.0).sqrt()
}
