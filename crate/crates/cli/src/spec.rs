//! Experiment specification files.
//!
//! A spec is one JSON document. Unknown fields are rejected so that typos
//! surface as parse errors with a position instead of being ignored.

use std::path::{Path, PathBuf};

use lsd_core::localize::Variant;
use lsd_core::pipeline::{MeshSpec, SolverConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::presets::{Coefficient, Load};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExperimentKind {
    Solve,
    Decay,
    JSweep,
    ContrastSweep,
    HConvergence,
    RhsReduction,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Solve => "solve",
            ExperimentKind::Decay => "decay",
            ExperimentKind::JSweep => "j_sweep",
            ExperimentKind::ContrastSweep => "contrast_sweep",
            ExperimentKind::HConvergence => "h_convergence",
            ExperimentKind::RhsReduction => "rhs_reduction",
        }
    }
}

/// Lists swept by the experiments; each experiment reads only its own and
/// falls back to a default when the list is absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub layers: Option<Vec<usize>>,
    pub contrasts: Option<Vec<f64>>,
    pub variants: Option<Vec<Variant>>,
    /// Elements per side of the structured meshes in `h_convergence`.
    pub levels: Option<Vec<usize>>,
    /// `H̃` as multiples of the coarse mesh size.
    pub h_tilde_factors: Option<Vec<f64>>,
}

/// Fine reference for `h_convergence`; unset fields are derived from the
/// finest level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Reference {
    pub nx: Option<usize>,
    pub interior_level: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayOptions {
    /// The seed element is the one containing this point.
    pub seed_point: [f64; 2],
    /// Rings skipped at the seed before fitting the interior ratio.
    pub skip: usize,
    /// Ring beyond which the tail fraction is reported.
    pub tail_ring: usize,
}

impl Default for DecayOptions {
    fn default() -> Self {
        DecayOptions {
            seed_point: [0.52, 0.505],
            skip: 3,
            tail_ring: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub coefficient: Coefficient,
    #[serde(default)]
    pub load: Load,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default)]
    pub decay: DecayOptions,
    /// Random vectors per element in the Poincaré sampling.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_samples() -> usize {
    20
}

fn default_output() -> PathBuf {
    PathBuf::from("lsd-out")
}

impl ExperimentSpec {
    pub fn new(experiment: ExperimentKind) -> Self {
        ExperimentSpec {
            experiment,
            solver: SolverConfig::default(),
            coefficient: Coefficient::default(),
            load: Load::default(),
            sweep: Sweep::default(),
            reference: Reference::default(),
            decay: DecayOptions::default(),
            samples: default_samples(),
            seed: 0,
            output: default_output(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Reads a spec and resolves relative mesh and raster paths against the
    /// directory of the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut spec = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            spec.resolve_paths(dir);
        }
        Ok(spec)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        if let MeshSpec::File { path } = &mut self.solver.mesh {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
        if let Coefficient::Raster { path, .. } = &mut self.coefficient {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Invalid(m));
        if let Err(e) = self.solver.validate() {
            return invalid(e.to_string());
        }
        self.coefficient.validate()?;
        let s = &self.sweep;
        let empty = [
            ("layers", s.layers.as_ref().map(Vec::len)),
            ("contrasts", s.contrasts.as_ref().map(Vec::len)),
            ("variants", s.variants.as_ref().map(Vec::len)),
            ("levels", s.levels.as_ref().map(Vec::len)),
            ("h_tilde_factors", s.h_tilde_factors.as_ref().map(Vec::len)),
        ];
        for (name, len) in empty {
            if len == Some(0) {
                return invalid(format!("sweep list '{name}' is empty"));
            }
        }
        if s.layers.iter().flatten().any(|&j| j == 0) {
            return invalid("sweep layers must be at least 1".into());
        }
        if s.contrasts
            .iter()
            .flatten()
            .any(|&c| !(c > 0.0 && c.is_finite()))
        {
            return invalid("contrasts must be positive".into());
        }
        if s.levels.iter().flatten().any(|&n| n == 0) {
            return invalid("levels must be at least 1".into());
        }
        if s.h_tilde_factors
            .iter()
            .flatten()
            .any(|&f| !(f > 0.0 && f.is_finite()))
        {
            return invalid("h_tilde_factors must be positive".into());
        }
        if self.samples == 0 {
            return invalid("samples must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. The seed is included, the output
    /// directory is not.
    pub fn hash(&self) -> String {
        let mut bare = self.clone();
        bare.output = PathBuf::new();
        let canonical = serde_json::to_vec(&bare).expect("spec serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
