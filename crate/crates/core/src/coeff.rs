//! Coefficient tensors, contrast statistics and the weight `ρ`.
//!
//! Both `A` and `ρ` are piecewise constant on the fine interior cells.
//! Fine cell `c` of element `e` has global index `e * cells_per_element + c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{CoarseMesh, FinePartition, Point, Rect};

/// Symmetric 2×2 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Tensor2 {
    pub fn scalar(a: f64) -> Self {
        Tensor2 {
            xx: a,
            xy: 0.0,
            yy: a,
        }
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Tensor2 {
            xx: a,
            xy: 0.0,
            yy: b,
        }
    }

    /// `(a_-, a_+)`: smallest and largest eigenvalue.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mean = 0.5 * (self.xx + self.yy);
        let rad = (0.5 * (self.xx - self.yy)).hypot(self.xy);
        (mean - rad, mean + rad)
    }

    pub fn is_spd(&self) -> bool {
        self.xx.is_finite()
            && self.xy.is_finite()
            && self.yy.is_finite()
            && self.xx > 0.0
            && self.xx * self.yy - self.xy * self.xy > 0.0
    }

    pub fn apply(&self, v: Point) -> Point {
        [
            self.xx * v[0] + self.xy * v[1],
            self.xy * v[0] + self.yy * v[1],
        ]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Tensor2 {
            xx: s * self.xx,
            xy: s * self.xy,
            yy: s * self.yy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoefficientField {
    cells_per_element: usize,
    values: Vec<Tensor2>,
    pub a_min: f64,
    pub a_max: f64,
}

impl CoefficientField {
    pub fn from_cells(cells_per_element: usize, values: Vec<Tensor2>) -> Result<Self> {
        if cells_per_element == 0
            || values.is_empty()
            || !values.len().is_multiple_of(cells_per_element)
        {
            return Err(Error::IncompleteField(format!(
                "{} cell values for {cells_per_element} cells per element",
                values.len()
            )));
        }
        let mut a_min = f64::INFINITY;
        let mut a_max: f64 = 0.0;
        for (i, t) in values.iter().enumerate() {
            if !t.is_spd() {
                return Err(Error::InvalidArgument(format!(
                    "cell {i} tensor {t:?} is not symmetric positive definite"
                )));
            }
            let (lo, hi) = t.eigenvalues();
            a_min = a_min.min(lo);
            a_max = a_max.max(hi);
        }
        Ok(CoefficientField {
            cells_per_element,
            values,
            a_min,
            a_max,
        })
    }

    /// Samples `coefficient` at every fine cell centroid.
    pub fn from_fn(
        mesh: &CoarseMesh,
        part: &FinePartition,
        coefficient: impl Fn(Point) -> Tensor2,
    ) -> Result<Self> {
        let values = cell_centroids(mesh, part)
            .into_iter()
            .map(coefficient)
            .collect();
        Self::from_cells(part.lattice.n_cells(), values)
    }

    pub fn constant(mesh: &CoarseMesh, part: &FinePartition, a: Tensor2) -> Result<Self> {
        Self::from_fn(mesh, part, |_| a)
    }

    pub fn cells_per_element(&self) -> usize {
        self.cells_per_element
    }

    pub fn n_elements(&self) -> usize {
        self.values.len() / self.cells_per_element
    }

    pub fn cell(&self, e: usize, c: usize) -> Tensor2 {
        self.values[e * self.cells_per_element + c]
    }

    pub fn element_cells(&self, e: usize) -> &[Tensor2] {
        &self.values[e * self.cells_per_element..(e + 1) * self.cells_per_element]
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::from_cells(
            self.cells_per_element,
            self.values.iter().map(|t| t.scaled(s)).collect(),
        )
    }

    /// Fails unless the field has one value per fine cell of the mesh.
    pub fn check_covers(&self, mesh: &CoarseMesh, part: &FinePartition) -> Result<()> {
        if self.cells_per_element != part.lattice.n_cells()
            || self.n_elements() != mesh.n_elements()
        {
            return Err(Error::IncompleteField(format!(
                "mesh with {} elements x {} cells (field has {} x {})",
                mesh.n_elements(),
                part.lattice.n_cells(),
                self.n_elements(),
                self.cells_per_element
            )));
        }
        Ok(())
    }
}

/// Centroids of all fine cells, element-major.
pub fn cell_centroids(mesh: &CoarseMesh, part: &FinePartition) -> Vec<Point> {
    let mut out = Vec::with_capacity(mesh.n_elements() * part.lattice.n_cells());
    for e in 0..mesh.n_elements() {
        let nodes = part.element_nodes(mesh, e);
        for cell in &part.lattice.cells {
            let [a, b, c] = cell.map(|k| nodes[k]);
            out.push([(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementContrast {
    pub a_min: f64,
    pub a_max: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastStats {
    pub per_element: Vec<ElementContrast>,
    /// `max_τ κ^τ`.
    pub kappa: f64,
    /// `1 + log(H/h)`.
    pub beta: f64,
}

pub fn local_bounds(
    field: &CoefficientField,
    mesh: &CoarseMesh,
    part: &FinePartition,
) -> Result<ContrastStats> {
    field.check_covers(mesh, part)?;
    let per_element: Vec<ElementContrast> = (0..mesh.n_elements())
        .map(|e| {
            let (lo, hi) =
                field
                    .element_cells(e)
                    .iter()
                    .fold((f64::INFINITY, 0.0f64), |(lo, hi), t| {
                        let (a, b) = t.eigenvalues();
                        (lo.min(a), hi.max(b))
                    });
            ElementContrast {
                a_min: lo,
                a_max: hi,
                kappa: hi / lo,
            }
        })
        .collect();
    let kappa = per_element.iter().map(|c| c.kappa).fold(1.0, f64::max);
    let beta = 1.0 + (mesh.mesh_size() / part.h).ln();
    Ok(ContrastStats {
        per_element,
        kappa,
        beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightChoice {
    One,
    Amin,
    AMinus,
    APlus,
    Amax,
    Custom,
}

#[derive(Debug, Clone)]
pub struct WeightField {
    cells_per_element: usize,
    values: Vec<f64>,
    pub rho_min: f64,
    pub rho_max: f64,
    pub choice: WeightChoice,
}

impl WeightField {
    pub fn cell(&self, e: usize, c: usize) -> f64 {
        self.values[e * self.cells_per_element + c]
    }

    pub fn element_cells(&self, e: usize) -> &[f64] {
        &self.values[e * self.cells_per_element..(e + 1) * self.cells_per_element]
    }
}

/// Realizes `ρ` for `choice`. `custom` supplies one value per fine cell and
/// is only read for [`WeightChoice::Custom`].
pub fn make_weight(
    choice: WeightChoice,
    field: &CoefficientField,
    custom: Option<&[f64]>,
) -> Result<WeightField> {
    let values: Vec<f64> = match choice {
        WeightChoice::One => vec![1.0; field.values.len()],
        WeightChoice::Amin => vec![field.a_min; field.values.len()],
        WeightChoice::Amax => vec![field.a_max; field.values.len()],
        WeightChoice::AMinus => field.values.iter().map(|t| t.eigenvalues().0).collect(),
        WeightChoice::APlus => field.values.iter().map(|t| t.eigenvalues().1).collect(),
        WeightChoice::Custom => {
            let raw = custom.ok_or_else(|| {
                Error::InvalidArgument("custom weight requires cell values".into())
            })?;
            if raw.len() != field.values.len() {
                return Err(Error::InvalidArgument(format!(
                    "custom weight has {} values, expected {}",
                    raw.len(),
                    field.values.len()
                )));
            }
            if let Some(bad) = raw.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(format!(
                    "custom weight value {bad} is not positive"
                )));
            }
            raw.to_vec()
        }
    };
    let rho_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let rho_max = values.iter().copied().fold(0.0, f64::max);
    Ok(WeightField {
        cells_per_element: field.cells_per_element,
        values,
        rho_min,
        rho_max,
        choice,
    })
}

/// Cell values of a pixel raster laid over a rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RasterValues {
    Scalar { values: Vec<f64> },
    Tensor { values: Vec<Tensor2> },
}

/// Row-major pixel raster; row 0 is the bottom row (smallest `y`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub nx: usize,
    pub ny: usize,
    #[serde(flatten)]
    pub values: RasterValues,
}

impl Raster {
    pub fn scalar(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        let r = Raster {
            nx,
            ny,
            values: RasterValues::Scalar { values },
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        let len = match &self.values {
            RasterValues::Scalar { values } => values.len(),
            RasterValues::Tensor { values } => values.len(),
        };
        if self.nx == 0 || self.ny == 0 || len != self.nx * self.ny {
            return Err(Error::Raster(format!(
                "{} values for a {} x {} raster",
                len, self.nx, self.ny
            )));
        }
        Ok(())
    }

    /// Text form: a header `nx ny scalar|tensor`, then `nx*ny` scalars or
    /// `nx*ny` triples `xx xy yy`, whitespace separated, row-major.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let mut next_usize = |what: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Raster(format!("bad or missing {what}")))
        };
        let nx = next_usize("nx")?;
        let ny = next_usize("ny")?;
        let kind = tokens
            .next()
            .ok_or_else(|| Error::Raster("missing kind".into()))?;
        let nums: Vec<f64> = tokens
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Raster(format!("bad value: {e}")))?;
        let values = match kind {
            "scalar" => RasterValues::Scalar { values: nums },
            "tensor" => {
                if !nums.len().is_multiple_of(3) {
                    return Err(Error::Raster("tensor values come in triples".into()));
                }
                RasterValues::Tensor {
                    values: nums
                        .chunks(3)
                        .map(|c| Tensor2 {
                            xx: c[0],
                            xy: c[1],
                            yy: c[2],
                        })
                        .collect(),
                }
            }
            other => return Err(Error::Raster(format!("unknown kind '{other}'"))),
        };
        let r = Raster { nx, ny, values };
        r.validate()?;
        Ok(r)
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        let r: Raster = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match &self.values {
            RasterValues::Scalar { values } => {
                out.push_str(&format!("{} {} scalar\n", self.nx, self.ny));
                for row in values.chunks(self.nx) {
                    let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                    out.push_str(&line.join(" "));
                    out.push('\n');
                }
            }
            RasterValues::Tensor { values } => {
                out.push_str(&format!("{} {} tensor\n", self.nx, self.ny));
                for row in values.chunks(self.nx) {
                    let line: Vec<String> = row
                        .iter()
                        .map(|t| format!("{:e} {:e} {:e}", t.xx, t.xy, t.yy))
                        .collect();
                    out.push_str(&line.join(" "));
                    out.push('\n');
                }
            }
        }
        out
    }

    /// Tensor of the pixel containing `p` (clamped to the raster).
    pub fn sample(&self, domain: &Rect, p: Point) -> Tensor2 {
        let fx = (p[0] - domain.x0) / domain.width() * self.nx as f64;
        let fy = (p[1] - domain.y0) / domain.height() * self.ny as f64;
        let i = (fx.floor().max(0.0) as usize).min(self.nx - 1);
        let j = (fy.floor().max(0.0) as usize).min(self.ny - 1);
        match &self.values {
            RasterValues::Scalar { values } => Tensor2::scalar(values[j * self.nx + i]),
            RasterValues::Tensor { values } => values[j * self.nx + i],
        }
    }
}

/// `‖g‖²_{L²_ρ}` for a broken P1 field, by exact per-cell quadrature of `ρ g²`.
pub fn weighted_norm_sq(
    mesh: &CoarseMesh,
    part: &FinePartition,
    rho: &WeightField,
    g: &crate::field::BrokenField,
) -> f64 {
    let mut total = 0.0;
    for e in 0..mesh.n_elements() {
        let nodes = part.element_nodes(mesh, e);
        for (c, cell) in part.lattice.cells.iter().enumerate() {
            let p = cell.map(|k| nodes[k]);
            let area = 0.5
                * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
                    - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]));
            let v = cell.map(|k| g.elements[e][k]);
            // ∫ v² over a P1 triangle
            let s =
                v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[0] * v[1] + v[1] * v[2] + v[0] * v[2];
            total += rho.cell(e, c) * area * s / 6.0;
        }
    }
    total
}
