use lsd_cli::presets::{count_components, Coefficient, Load};
use lsd_cli::spec::{ExperimentKind, ExperimentSpec};
use lsd_core::coeff::{Raster, RasterValues};
use lsd_core::mesh::Rect;

fn grid() -> Vec<[f64; 2]> {
    let n = 37;
    (0..n)
        .flat_map(|j| {
            (0..n).map(move |i| [(i as f64 + 0.3) / n as f64, (j as f64 + 0.6) / n as f64])
        })
        .collect()
}

#[test]
fn unit_contrast_channel_is_the_constant_field() {
    let c = Coefficient::Channel {
        contrast: 1.0,
        y0: 0.3,
        y1: 0.6,
        conducting: false,
    }
    .build()
    .unwrap();
    let one = Coefficient::Constant { value: 1.0 }.build().unwrap();
    for p in grid() {
        assert_eq!(c(p), one(p));
    }
}

#[test]
fn channel_barrier_and_conductor_are_reciprocal() {
    let make = |conducting| {
        Coefficient::Channel {
            contrast: 1e3,
            y0: 0.4,
            y1: 0.5,
            conducting,
        }
        .build()
        .unwrap()
    };
    let (b, c) = (make(false), make(true));
    let inside = [0.2, 0.45];
    assert_eq!(b(inside).eigenvalues().1, 1e-3);
    assert_eq!(c(inside).eigenvalues().1, 1e3);
    assert_eq!(b([0.2, 0.7]).eigenvalues().1, 1.0);
}

#[test]
fn inclusions_give_exactly_k_components() {
    for (k, seed) in [(1, 0), (3, 1), (5, 7), (8, 3), (12, 11)] {
        let c = Coefficient::Inclusions {
            k,
            contrast: 50.0,
            radius: 0.05,
            placement_seed: seed,
        };
        let r = c.raster(200, 200, &Rect::unit()).unwrap();
        assert_eq!(count_components(&r, 1.0), k, "k = {k}");
        let centres = c.inclusion_centres().unwrap();
        assert_eq!(centres.len(), k);
        for (i, a) in centres.iter().enumerate() {
            assert!(a.iter().all(|&x| (0.1..=0.9).contains(&x)));
            for b in &centres[..i] {
                assert!(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() > 0.15);
            }
        }
    }
}

#[test]
fn inclusion_placement_depends_only_on_the_seed() {
    let c = |s| Coefficient::Inclusions {
        k: 4,
        contrast: 10.0,
        radius: 0.05,
        placement_seed: s,
    };
    assert_eq!(
        c(5).inclusion_centres().unwrap(),
        c(5).inclusion_centres().unwrap()
    );
    assert_ne!(
        c(5).inclusion_centres().unwrap(),
        c(6).inclusion_centres().unwrap()
    );
    let crowded = Coefficient::Inclusions {
        k: 200,
        contrast: 10.0,
        radius: 0.2,
        placement_seed: 0,
    };
    assert!(crowded.inclusion_centres().is_err());
}

#[test]
fn checkerboard_alternates_and_hits_the_contrast() {
    let a = Coefficient::Checkerboard {
        contrast: 1e4,
        cells: 8,
    }
    .build()
    .unwrap();
    let r = Coefficient::Checkerboard {
        contrast: 1e4,
        cells: 8,
    }
    .raster(8, 8, &Rect::unit())
    .unwrap();
    let RasterValues::Tensor { values } = &r.values else {
        panic!()
    };
    for j in 0..8 {
        for i in 0..8 {
            let v = values[j * 8 + i].eigenvalues().1;
            assert_eq!(v, if (i + j) % 2 == 1 { 1e4 } else { 1.0 });
        }
    }
    let vals: Vec<f64> = grid().into_iter().map(|p| a(p).eigenvalues().1).collect();
    let (lo, hi) = vals
        .iter()
        .fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    assert_eq!(hi / lo, 1e4);
}

#[test]
fn raster_preset_reads_back_an_exported_field() {
    let dir = tempfile::tempdir().unwrap();
    let smooth = Coefficient::Smooth { amplitude: 0.4 };
    let r = smooth.raster(16, 12, &Rect::unit()).unwrap();
    let RasterValues::Tensor { values } = &r.values else {
        panic!()
    };
    let json = dir.path().join("smooth.json");
    std::fs::write(&json, serde_json::to_string(&r).unwrap()).unwrap();
    let text = dir.path().join("smooth.txt");
    std::fs::write(&text, r.to_text()).unwrap();
    for path in [json, text] {
        let back = Coefficient::Raster {
            path,
            domain: Rect::unit(),
        }
        .build()
        .unwrap();
        for j in 0..12 {
            for i in 0..16 {
                let p = [(i as f64 + 0.5) / 16.0, (j as f64 + 0.5) / 12.0];
                assert_eq!(back(p), values[j * 16 + i]);
            }
        }
    }
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "2 2 scalar\n1 1 1\n").unwrap();
    assert!(Coefficient::Raster {
        path: bad,
        domain: Rect::unit()
    }
    .build()
    .is_err());
}

#[test]
fn text_rasters_parse_and_count() {
    let r = Raster::parse_text("4 3 scalar\n1 9 1 1\n1 9 1 9\n1 1 1 9\n").unwrap();
    assert_eq!(count_components(&r, 1.0), 2);
}

#[test]
fn contrast_replacement_only_for_contrast_presets() {
    let c = Coefficient::Channel {
        contrast: 10.0,
        y0: 0.1,
        y1: 0.2,
        conducting: true,
    };
    assert_eq!(c.with_contrast(1e6).unwrap().contrast(), Some(1e6));
    assert!(Coefficient::Smooth { amplitude: 0.1 }
        .with_contrast(2.0)
        .is_err());
    assert!(Coefficient::Smooth { amplitude: 1.5 }.validate().is_err());
}

#[test]
fn loads_match_their_formulas() {
    let g = Load::Smooth.build();
    assert!((g([0.5, 1.0]) - 2.3).abs() < 1e-15);
    let o = Load::Oscillatory { frequency: 2.0 }.build();
    assert!(o([0.25, 0.3]).abs() < 1e-12);
    assert_eq!(Load::Constant { value: 3.0 }.build()([0.1, 0.9]), 3.0);
}

#[test]
fn spec_defaults_and_hash() {
    let s = ExperimentSpec::parse("{ \"experiment\": \"decay\" }").unwrap();
    assert_eq!(s.experiment, ExperimentKind::Decay);
    assert_eq!(s.samples, 20);
    assert_eq!(s.decay.skip, 3);
    assert_eq!(s, ExperimentSpec::new(ExperimentKind::Decay));
    let mut t = s.clone();
    t.output = "elsewhere".into();
    assert_eq!(s.hash(), t.hash());
    t.seed = 1;
    assert_ne!(s.hash(), t.hash());
    let back = ExperimentSpec::parse(&serde_json::to_string(&s).unwrap()).unwrap();
    assert_eq!(back, s);
}
