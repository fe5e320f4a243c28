//! Command-line front end for the LSD solver: experiment specs, bundled
//! presets and the experiment drivers.

pub mod experiments;
pub mod presets;
pub mod spec;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;
use serde_json::json;

use crate::experiments::{CONFORMING, MONOLITHIC};
use crate::spec::{ExperimentKind, ExperimentSpec};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config parse error: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("numerical failure in stage '{stage}': {message}")]
    Numerical { stage: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse { .. } | CliError::Invalid(_) => 2,
            CliError::Numerical { .. } => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<lsd_core::Error> for CliError {
    fn from(e: lsd_core::Error) -> Self {
        use lsd_core::Error as E;
        match e {
            // Failures while reading the mesh or sampling the coefficient come
            // from the inputs, not from the numerics.
            E::Stage {
                stage: stage @ ("config" | "mesh" | "coefficients"),
                message,
            } => CliError::Invalid(format!("{stage}: {message}")),
            E::Stage { stage, message } => CliError::Numerical {
                stage: stage.into(),
                message,
            },
            E::Io(e) => CliError::Io(e.to_string()),
            e @ (E::InvalidArgument(_)
            | E::MeshFormat { .. }
            | E::InvalidMesh(_)
            | E::Raster(_)
            | E::IncompleteField(_)) => CliError::Invalid(e.to_string()),
            other => CliError::Numerical {
                stage: "solve".into(),
                message: other.to_string(),
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Runs one experiment and writes CSV tables plus a JSON summary.
///
/// Every flag can also be given through an `LSD_`-prefixed environment
/// variable; flags win over the spec file.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "lsd", version, about)]
pub struct Args {
    /// Experiment spec (JSON). Without it the defaults of `--experiment` are used.
    #[arg(long, env = "LSD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the spec's `output`.
    #[arg(long, env = "LSD_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise-reproducible output.
    #[arg(long, env = "LSD_THREADS")]
    pub threads: Option<usize>,
    /// Seed for random test vectors; overrides the spec's `seed`.
    #[arg(long, env = "LSD_SEED")]
    pub seed: Option<u64>,
    /// Experiment kind; overrides the spec's `experiment`.
    #[arg(long, env = "LSD_EXPERIMENT", value_enum)]
    pub experiment: Option<ExperimentKind>,
}

impl Args {
    pub fn resolve(&self) -> Result<ExperimentSpec, CliError> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::new(self.experiment.unwrap_or(ExperimentKind::Solve)),
        };
        if let Some(kind) = self.experiment {
            spec.experiment = kind;
        }
        if let Some(out) = &self.out {
            spec.output = out.clone();
        }
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub fn run(args: &Args) -> Result<Vec<PathBuf>, CliError> {
    let spec = args.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| execute(&spec))
}

/// Runs `spec` on the current thread pool and returns the files written.
pub fn execute(spec: &ExperimentSpec) -> Result<Vec<PathBuf>, CliError> {
    let hash = spec.hash();
    let dir = &spec.output;
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let name = spec.experiment.name();
    let table = dir.join(format!("{name}.csv"));
    let summary = match spec.experiment {
        ExperimentKind::Solve => {
            let out = experiments::solve(spec, &hash)?;
            write_csv(&table, &out.rows)?;
            files.extend(write_solution(dir, &out.solution, spec)?);
            json!({ "oracles": out.report.oracles.iter().map(|o| &o.oracle).collect::<Vec<_>>(), "report": out.report })
        }
        ExperimentKind::Decay => {
            let out = experiments::decay(spec, &hash)?;
            write_csv(&table, &out.rows)?;
            json!({ "profiles": out.summaries })
        }
        ExperimentKind::JSweep => {
            let rows = experiments::j_sweep(spec, &hash)?;
            write_csv(&table, &rows)?;
            json!({ "oracles": [MONOLITHIC], "rows": rows })
        }
        ExperimentKind::ContrastSweep => {
            let rows = experiments::contrast_sweep(spec, &hash)?;
            write_csv(&table, &rows)?;
            let oracles: Vec<&str> = if spec.solver.oracles.monolithic {
                vec![MONOLITHIC]
            } else {
                vec![]
            };
            json!({ "oracles": oracles, "rows": rows })
        }
        ExperimentKind::HConvergence => {
            let rows = experiments::h_convergence(spec, &hash)?;
            write_csv(&table, &rows)?;
            let min_rate = rows
                .iter()
                .filter_map(|r| r.rate)
                .fold(f64::INFINITY, f64::min);
            json!({ "oracles": [CONFORMING], "rows": rows, "min_rate": min_rate.is_finite().then_some(min_rate) })
        }
        ExperimentKind::RhsReduction => {
            let out = experiments::rhs_reduction(spec, &hash)?;
            write_csv(&table, &out.rows)?;
            let poincare = dir.join("poincare.csv");
            write_csv(&poincare, &out.poincare)?;
            files.push(poincare);
            json!({ "oracles": [MONOLITHIC], "rows": out.rows })
        }
    };
    files.insert(0, table);
    let path = dir.join("summary.json");
    let doc = json!({
        "experiment": name,
        "config_hash": hash,
        "seed": spec.seed,
        "spec": spec,
        "results": summary,
    });
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&doc).expect("summary serializes"),
    )?;
    files.push(path);
    Ok(files)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Nodal field, element fluxes and the multiplier in binary form.
fn write_solution(
    dir: &Path,
    sol: &lsd_core::pipeline::Solution,
    spec: &ExperimentSpec,
) -> Result<Vec<PathBuf>, CliError> {
    let mesh = spec.solver.mesh.build()?;
    let part = lsd_core::mesh::FinePartition::new(
        &mesh,
        spec.solver.face_level,
        spec.solver.interior_level(),
    )?;

    let nodes = dir.join("solution.csv");
    let mut w = BufWriter::new(File::create(&nodes)?);
    writeln!(w, "element,node,x,y,u")?;
    for (e, values) in sol.u.elements.iter().enumerate() {
        for (k, (p, v)) in part.element_nodes(&mesh, e).iter().zip(values).enumerate() {
            writeln!(w, "{e},{k},{},{},{v}", p[0], p[1])?;
        }
    }
    w.flush()?;

    let flux = dir.join("flux.csv");
    let mut w = BufWriter::new(File::create(&flux)?);
    writeln!(w, "element,cell,sx,sy")?;
    for (e, cells) in sol.flux.iter().enumerate() {
        for (c, s) in cells.iter().enumerate() {
            writeln!(w, "{e},{c},{},{}", s[0], s[1])?;
        }
    }
    w.flush()?;

    let lambda = dir.join("lambda.bin");
    sol.lambda
        .write_binary(BufWriter::new(File::create(&lambda)?))?;
    Ok(vec![nodes, flux, lambda])
}
