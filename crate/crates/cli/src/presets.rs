//! Bundled coefficient and load scenarios.
//!
//! Every coefficient preset is an analytic function on the domain; `raster`
//! samples it at pixel centres, so the same generator can be exported and
//! read back through the raster preset.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::path::PathBuf;

use lsd_core::coeff::{Raster, RasterValues, Tensor2};
use lsd_core::mesh::{Point, Rect};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub type CoefficientFn = Box<dyn Fn(Point) -> Tensor2 + Send + Sync>;
pub type LoadFn = Box<dyn Fn(Point) -> f64 + Send + Sync>;

fn one() -> f64 {
    1.0
}

fn default_contrast() -> f64 {
    1e4
}

fn default_amplitude() -> f64 {
    0.5
}

fn default_cells() -> usize {
    8
}

fn default_y0() -> f64 {
    0.515625
}

fn default_y1() -> f64 {
    0.546875
}

fn default_k() -> usize {
    5
}

fn default_radius() -> f64 {
    0.06
}

fn default_placement_seed() -> u64 {
    7
}

fn unit() -> Rect {
    Rect::unit()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum Coefficient {
    /// `A = value · I`.
    Constant {
        #[serde(default = "one")]
        value: f64,
    },
    /// `A = 1 + amplitude · sin(2πx) cos(3y)`.
    Smooth {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// `cells × cells` board on the unit square, `contrast` on the cells
    /// with odd `i + j` and 1 elsewhere.
    Checkerboard {
        #[serde(default = "default_contrast")]
        contrast: f64,
        #[serde(default = "default_cells")]
        cells: usize,
    },
    /// Horizontal strip `y0 < y < y1` crossing the domain. By default the
    /// strip is a barrier with value `1/contrast`; with `conducting` it
    /// carries `contrast` instead.
    Channel {
        #[serde(default = "default_contrast")]
        contrast: f64,
        #[serde(default = "default_y0")]
        y0: f64,
        #[serde(default = "default_y1")]
        y1: f64,
        #[serde(default)]
        conducting: bool,
    },
    /// `k` disjoint discs of value `contrast` on a unit background, placed by
    /// rejection sampling from `placement_seed`.
    Inclusions {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default = "default_contrast")]
        contrast: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_placement_seed")]
        placement_seed: u64,
    },
    /// Pixel raster read from a text (`.txt`) or JSON (`.json`) file and
    /// stretched over `domain`.
    Raster {
        path: PathBuf,
        #[serde(default = "unit")]
        domain: Rect,
    },
}

impl Default for Coefficient {
    fn default() -> Self {
        Coefficient::Smooth {
            amplitude: default_amplitude(),
        }
    }
}

impl Coefficient {
    pub fn name(&self) -> &'static str {
        match self {
            Coefficient::Constant { .. } => "constant",
            Coefficient::Smooth { .. } => "smooth",
            Coefficient::Checkerboard { .. } => "checkerboard",
            Coefficient::Channel { .. } => "channel",
            Coefficient::Inclusions { .. } => "inclusions",
            Coefficient::Raster { .. } => "raster",
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Invalid(format!("{} preset: {m}", self.name())));
        let positive = |v: f64| v > 0.0 && v.is_finite();
        match *self {
            Coefficient::Constant { value } if !positive(value) => bad("value must be positive"),
            Coefficient::Smooth { amplitude } if !(amplitude.abs() < 1.0) => {
                bad("|amplitude| must be below 1")
            }
            Coefficient::Checkerboard { contrast, cells } if !positive(contrast) || cells == 0 => {
                bad("contrast must be positive and cells at least 1")
            }
            Coefficient::Channel {
                contrast, y0, y1, ..
            } if !positive(contrast) || !(y0 < y1) => bad("contrast must be positive and y0 < y1"),
            Coefficient::Inclusions {
                contrast, radius, ..
            } if !positive(contrast) || !(radius > 0.0 && radius < 0.25) => {
                bad("contrast must be positive and radius in (0, 0.25)")
            }
            _ => Ok(()),
        }
    }

    pub fn contrast(&self) -> Option<f64> {
        match *self {
            Coefficient::Checkerboard { contrast, .. }
            | Coefficient::Channel { contrast, .. }
            | Coefficient::Inclusions { contrast, .. } => Some(contrast),
            _ => None,
        }
    }

    /// Copy with the contrast parameter replaced.
    pub fn with_contrast(&self, c: f64) -> Result<Coefficient, CliError> {
        let mut out = self.clone();
        match &mut out {
            Coefficient::Checkerboard { contrast, .. }
            | Coefficient::Channel { contrast, .. }
            | Coefficient::Inclusions { contrast, .. } => *contrast = c,
            _ => {
                return Err(CliError::Invalid(format!(
                    "the {} preset has no contrast parameter",
                    self.name()
                )))
            }
        }
        Ok(out)
    }

    pub fn build(&self) -> Result<CoefficientFn, CliError> {
        self.validate()?;
        Ok(match *self {
            Coefficient::Constant { value } => Box::new(move |_| Tensor2::scalar(value)),
            Coefficient::Smooth { amplitude } => Box::new(move |p| {
                Tensor2::scalar(1.0 + amplitude * (2.0 * PI * p[0]).sin() * (3.0 * p[1]).cos())
            }),
            Coefficient::Checkerboard { contrast, cells } => Box::new(move |p| {
                let n = cells as f64;
                let i = (p[0] * n).floor().clamp(0.0, n - 1.0) as usize;
                let j = (p[1] * n).floor().clamp(0.0, n - 1.0) as usize;
                Tensor2::scalar(if (i + j) % 2 == 1 { contrast } else { 1.0 })
            }),
            Coefficient::Channel {
                contrast,
                y0,
                y1,
                conducting,
            } => {
                let inside = if conducting { contrast } else { 1.0 / contrast };
                Box::new(move |p| {
                    Tensor2::scalar(if p[1] > y0 && p[1] < y1 { inside } else { 1.0 })
                })
            }
            Coefficient::Inclusions {
                contrast, radius, ..
            } => {
                let centres = self.inclusion_centres()?;
                Box::new(move |p| {
                    let hit = centres
                        .iter()
                        .any(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) < radius * radius);
                    Tensor2::scalar(if hit { contrast } else { 1.0 })
                })
            }
            Coefficient::Raster { ref path, domain } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                let raster = if path.extension().is_some_and(|x| x == "json") {
                    Raster::parse_json(&text)
                } else {
                    Raster::parse_text(&text)
                }
                .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
                Box::new(move |p| raster.sample(&domain, p))
            }
        })
    }

    /// Disc centres on the unit square, at least one radius apart from each
    /// other's rims and from the boundary.
    pub fn inclusion_centres(&self) -> Result<Vec<Point>, CliError> {
        let Coefficient::Inclusions {
            k,
            radius,
            placement_seed,
            ..
        } = *self
        else {
            return Ok(Vec::new());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(placement_seed);
        let lo = 2.0 * radius;
        let mut centres: Vec<Point> = Vec::with_capacity(k);
        let mut tries = 0;
        while centres.len() < k {
            tries += 1;
            if tries > 100_000 {
                return Err(CliError::Invalid(format!(
                    "cannot place {k} inclusions of radius {radius}"
                )));
            }
            let c = [rng.gen_range(lo..1.0 - lo), rng.gen_range(lo..1.0 - lo)];
            if centres
                .iter()
                .all(|d| ((c[0] - d[0]).powi(2) + (c[1] - d[1]).powi(2)).sqrt() > 3.0 * radius)
            {
                centres.push(c);
            }
        }
        Ok(centres)
    }

    /// Samples the preset at the centres of an `nx × ny` pixel grid over `domain`.
    pub fn raster(&self, nx: usize, ny: usize, domain: &Rect) -> Result<Raster, CliError> {
        let a = self.build()?;
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let p = [
                    domain.x0 + (i as f64 + 0.5) / nx as f64 * domain.width(),
                    domain.y0 + (j as f64 + 0.5) / ny as f64 * domain.height(),
                ];
                values.push(a(p));
            }
        }
        Ok(Raster {
            nx,
            ny,
            values: RasterValues::Tensor { values },
        })
    }
}

/// 4-connected components of pixels whose largest eigenvalue differs from
/// `background`.
pub fn count_components(raster: &Raster, background: f64) -> usize {
    let (nx, ny) = (raster.nx, raster.ny);
    let marked: Vec<bool> = match &raster.values {
        RasterValues::Scalar { values } => values.iter().map(|&v| v != background).collect(),
        RasterValues::Tensor { values } => values
            .iter()
            .map(|t| t.eigenvalues().1 != background)
            .collect(),
    };
    let mut seen = vec![false; nx * ny];
    let mut count = 0;
    for start in 0..nx * ny {
        if !marked[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p % nx, p / nx);
            let mut visit = |q: usize| {
                if marked[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if i > 0 {
                visit(p - 1);
            }
            if i + 1 < nx {
                visit(p + 1);
            }
            if j > 0 {
                visit(p - nx);
            }
            if j + 1 < ny {
                visit(p + nx);
            }
        }
    }
    count
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Load {
    /// `g = sin(πx)(1 + y²) + 0.3`.
    #[default]
    Smooth,
    Constant {
        #[serde(default = "one")]
        value: f64,
    },
    /// `g = sin(2πkx) sin(2πky)`.
    Oscillatory { frequency: f64 },
}

impl Load {
    pub fn build(&self) -> LoadFn {
        match *self {
            Load::Smooth => Box::new(|p| (PI * p[0]).sin() * (1.0 + p[1] * p[1]) + 0.3),
            Load::Constant { value } => Box::new(move |_| value),
            Load::Oscillatory { frequency } => Box::new(move |p| {
                (2.0 * PI * frequency * p[0]).sin() * (2.0 * PI * frequency * p[1]).sin()
            }),
        }
    }
}
