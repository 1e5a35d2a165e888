//! Experiment configs, validation, artefact writers and the runner
//! behind the `steinlab` binary.
//!
//! A run is one experiment per process: parse the JSON config, validate,
//! dispatch to the dynamics/diagnostics/continuum/compare layers, and
//! write CSV/JSON/SVG artefacts plus a manifest sufficient to reproduce
//! the run bit-identically (config echo, config hash, seed, version).
//!
//! CSV conventions: `.` decimal separator, LF line endings, 17
//! significant digits. Files are written atomically (temp + rename).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compare::{
    fixed_point_comparison, ksd_sweep, positions_to_csv, sweep_to_csv, FixedPointConfig,
};
use crate::continuum::{path_functionals, solve_stein_pde, stein_fisher_continuum,
    tangent_norm_continuum, DensityGrid, GaussianPath, DEFAULT_DOMAIN, DEFAULT_GRID_SIZE};
use crate::diagnostics::{
    drift_rkhs_norm_squared, generator_apply, hamiltonian, ksd_squared, rate_functional,
    CylinderFunction, InnerFunction, KsdEstimator, OuterKind,
};
use crate::dynamics::{
    ergodic_average, run_trajectory, Ensemble, IntegratorConfig, TiltField, Trajectory,
};
use crate::kernels::Kernel;
use crate::targets::Target;
use crate::{Error, Result};

/// Experiment selector, mirrored one-to-one by CLI subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    RunOde,
    RunSde,
    RunTilted,
    Ksd,
    Rate,
    Compare,
    ContinuumIdentities,
    ReproduceFig1,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::RunOde => "run-ode",
            ExperimentKind::RunSde => "run-sde",
            ExperimentKind::RunTilted => "run-tilted",
            ExperimentKind::Ksd => "ksd",
            ExperimentKind::Rate => "rate",
            ExperimentKind::Compare => "compare",
            ExperimentKind::ContinuumIdentities => "continuum-identities",
            ExperimentKind::ReproduceFig1 => "reproduce-fig1",
        }
    }
}

/// Initial-ensemble specification: a deterministic grid (the default) or
/// a seeded Gaussian draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum InitialEnsemble {
    Grid {
        n: usize,
        dim: usize,
        extent: f64,
    },
    Gaussian {
        n: usize,
        dim: usize,
        mean: Vec<f64>,
        std: f64,
        seed: u64,
    },
}

impl InitialEnsemble {
    pub fn dim(&self) -> usize {
        match self {
            InitialEnsemble::Grid { dim, .. } => *dim,
            InitialEnsemble::Gaussian { dim, .. } => *dim,
        }
    }

    pub fn build(&self) -> Result<Ensemble> {
        match self {
            InitialEnsemble::Grid { n, dim, extent } => {
                if *n == 0 || *dim == 0 || !(extent.is_finite() && *extent > 0.0) {
                    return Err(Error::ConfigInvalid("invalid grid ensemble".into()));
                }
                Ok(Ensemble::grid(*n, *dim, *extent))
            }
            InitialEnsemble::Gaussian {
                n,
                dim,
                mean,
                std,
                seed,
            } => {
                if *n == 0 || mean.len() != *dim || !(std.is_finite() && *std > 0.0) {
                    return Err(Error::ConfigInvalid("invalid gaussian ensemble".into()));
                }
                Ok(Ensemble::gaussian_draw(*n, *dim, mean, *std, *seed))
            }
        }
    }
}

/// Which diagnostics to evaluate along a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsFlags {
    #[serde(default)]
    pub ksd: bool,
    #[serde(default)]
    pub rate: bool,
    #[serde(default)]
    pub hamiltonian: bool,
    #[serde(default)]
    pub generator_check: bool,
}

/// Output artefact formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json, OutputFormat::Svg]
}

/// Settings for the continuum-identities experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuumConfig {
    #[serde(default = "default_path")]
    pub path: GaussianPath,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
}

fn default_path() -> GaussianPath {
    GaussianPath {
        mean_poly: vec![0.8, -0.8],
        std_poly: vec![1.2, -0.2],
        horizon: 1.0,
    }
}

fn default_timesteps() -> usize {
    32
}

fn default_grid_size() -> usize {
    DEFAULT_GRID_SIZE
}

impl Default for ContinuumConfig {
    fn default() -> Self {
        ContinuumConfig {
            path: default_path(),
            timesteps: default_timesteps(),
            grid_size: default_grid_size(),
        }
    }
}

/// Settings for the compare experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default = "default_sweep_count")]
    pub sweep_count: usize,
    /// Seed for the sweep's measure generator.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fixed_point: Option<FixedPointSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointSection {
    pub initial: InitialEnsemble,
    #[serde(default)]
    pub settings: FixedPointConfig,
}

fn default_sweep_count() -> usize {
    16
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            sweep_count: default_sweep_count(),
            seed: 0,
            fixed_point: None,
        }
    }
}

/// Full experiment configuration. Unknown fields are a hard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Target>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Kernel>,
    /// Kernel list for `compare` (and optional override for
    /// `reproduce-fig1`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<Vec<Kernel>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<IntegratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialEnsemble>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tilt: Option<TiltField>,
    #[serde(default)]
    pub diagnostics: DiagnosticsFlags,
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuum: Option<ContinuumConfig>,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(json)?;
        Ok(config)
    }

    /// Semantic validation beyond the schema; returns one human-readable
    /// diagnostic per problem (empty means valid).
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let needs_dynamics = matches!(
            self.experiment,
            ExperimentKind::RunOde
                | ExperimentKind::RunSde
                | ExperimentKind::RunTilted
                | ExperimentKind::Rate
        );
        let needs_kernel = !matches!(
            self.experiment,
            ExperimentKind::Compare | ExperimentKind::ReproduceFig1
        );

        if needs_kernel && self.kernel.is_none() && self.kernels.is_none() {
            problems.push("field `kernel`: required for this experiment".into());
        }
        if self.target.is_none() && !matches!(self.experiment, ExperimentKind::ReproduceFig1) {
            problems.push("field `target`: required for this experiment".into());
        }
        if let Some(dyn_cfg) = &self.dynamics {
            if !(dyn_cfg.dt.is_finite() && dyn_cfg.dt > 0.0) {
                problems.push(format!(
                    "field `dynamics.dt`: must be positive, got {}",
                    dyn_cfg.dt
                ));
            }
            if dyn_cfg.record_every == 0 {
                problems.push("field `dynamics.record_every`: must be ≥ 1".into());
            }
        } else if needs_dynamics {
            problems.push("field `dynamics`: required for this experiment".into());
        }
        if (needs_dynamics || matches!(self.experiment, ExperimentKind::Ksd))
            && self.initial.is_none()
        {
            problems.push("field `initial`: required for this experiment".into());
        }

        if let (Some(target), Some(initial)) = (&self.target, &self.initial) {
            if target.dim() != initial.dim() {
                problems.push(format!(
                    "dimension mismatch: target is {}-dimensional, initial ensemble is {}-dimensional",
                    target.dim(),
                    initial.dim()
                ));
            }
        }
        if matches!(self.experiment, ExperimentKind::RunTilted) {
            match (&self.tilt, &self.target) {
                (None, _) => problems.push("field `tilt`: required for run-tilted".into()),
                (Some(tilt), Some(target)) => {
                    if let Err(e) = tilt.validate(target.dim()) {
                        problems.push(format!("field `tilt`: {e}"));
                    }
                }
                _ => {}
            }
        }
        if matches!(self.experiment, ExperimentKind::Compare) {
            let count = self.kernels.as_ref().map(|k| k.len()).unwrap_or(0);
            if count < 2 {
                problems.push("field `kernels`: compare needs at least two kernels".into());
            }
            if let Some(t) = &self.target {
                if t.dim() != 1 {
                    problems.push("compare sweeps require a one-dimensional target".into());
                }
            }
        }
        if matches!(self.experiment, ExperimentKind::ContinuumIdentities) {
            if let Some(t) = &self.target {
                if t.dim() != 1 {
                    problems.push("continuum identities require a one-dimensional target".into());
                }
            }
            if let Some(c) = &self.continuum {
                if c.timesteps < 2 || c.timesteps % 2 != 0 {
                    problems.push("field `continuum.timesteps`: must be even and ≥ 2".into());
                }
                if c.grid_size < 5 || c.grid_size % 2 == 0 {
                    problems.push("field `continuum.grid_size`: must be odd and ≥ 5".into());
                }
            }
        }
        // the diagonal rule: a V-statistic KSD cannot be formed for
        // exp-power kernels with p < 2 under an erroring convention,
        // because ∇_x·∇_y k has no limit on the diagonal
        if self.diagnostics.ksd || matches!(self.experiment, ExperimentKind::Ksd) {
            if let Some(kernel) = &self.kernel {
                if kernel.diagonal_cross_undefined()
                    && kernel.diag_cross_convention
                        != crate::kernels::DiagCrossConvention::Zero
                {
                    problems.push(
                        "kernel/diagnostics conflict: v-statistic KSD needs ∇_x·∇_y k on the \
                         diagonal, which does not exist for exp-power kernels with p < 2; use \
                         the u-statistic, the zero diagonal convention, or a C² kernel"
                            .into(),
                    );
                }
            }
        }
        if self.output.directory.as_os_str().is_empty() {
            problems.push("field `output.directory`: must not be empty".into());
        }
        problems
    }

    fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn config_hash(&self) -> Result<String> {
        let json = self.canonical_json()?;
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

// ---------------------------------------------------------------------
// artefact writers

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Trajectory CSV: `step,t,particle,x0,...,x{d-1}`.
pub fn trajectory_to_csv(trajectory: &Trajectory) -> String {
    let d = trajectory.ensembles[0].dim();
    let mut out = String::from("step,t,particle");
    for a in 0..d {
        let _ = write!(out, ",x{a}");
    }
    out.push('\n');
    for (ensemble, step) in trajectory.ensembles.iter().zip(&trajectory.steps) {
        for i in 0..ensemble.n_particles() {
            let _ = write!(out, "{step},{},{i}", fmt17(ensemble.time));
            for a in 0..d {
                let _ = write!(out, ",{}", fmt17(ensemble.positions[(a, i)]));
            }
            out.push('\n');
        }
    }
    out
}

/// Velocity CSV mirroring the trajectory layout (one fewer row group).
pub fn velocities_to_csv(trajectory: &Trajectory) -> String {
    let d = trajectory.ensembles[0].dim();
    let mut out = String::from("step,t,particle");
    for a in 0..d {
        let _ = write!(out, ",x{a}");
    }
    out.push('\n');
    for (n, v) in trajectory.velocities.iter().enumerate() {
        let step = trajectory.steps[n];
        let t = trajectory.ensembles[n].time;
        for i in 0..v.ncols() {
            let _ = write!(out, "{step},{},{i}", fmt17(t));
            for a in 0..d {
                let _ = write!(out, ",{}", fmt17(v[(a, i)]));
            }
            out.push('\n');
        }
    }
    out
}

/// Per-step diagnostics CSV:
/// `step,t,ksd2_vstat,ksd2_ustat,drift_norm2,rate_increment`.
pub fn diagnostics_csv(
    kernel: &Kernel,
    target: &Target,
    trajectory: &Trajectory,
) -> Result<String> {
    let mut out = String::from("step,t,ksd2_vstat,ksd2_ustat,drift_norm2,rate_increment\n");
    for (n, ensemble) in trajectory.ensembles.iter().enumerate() {
        let vstat = ksd_squared(kernel, target, ensemble, KsdEstimator::VStat)?;
        let ustat = if ensemble.n_particles() > 1 {
            ksd_squared(kernel, target, ensemble, KsdEstimator::UStat)?
        } else {
            f64::NAN
        };
        let drift2 = drift_rkhs_norm_squared(kernel, target, ensemble)?;
        let rate_inc = if n < trajectory.velocities.len() {
            let u = &trajectory.velocities[n];
            let b = crate::dynamics::svgd_drift(kernel, target, ensemble)?;
            let gap = (trajectory.steps[n + 1] - trajectory.steps[n]) as f64;
            0.25 * gap
                * trajectory.dt
                * crate::diagnostics::tangent_norm_squared(kernel, ensemble, &(u - b))?
        } else {
            0.0
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            trajectory.steps[n],
            fmt17(ensemble.time),
            fmt17(vstat),
            fmt17(ustat),
            fmt17(drift2),
            fmt17(rate_inc)
        );
    }
    Ok(out)
}

/// Scatter SVG of the final recorded ensemble in a trajectory CSV; a pure
/// function of the CSV text so that replotting reproduces the bytes.
/// Axes are fixed to `[-4,4]²`.
pub fn scatter_svg_from_csv(csv: &str, title: &str) -> Result<String> {
    let mut rows: Vec<(usize, f64, f64)> = Vec::new();
    for (idx, line) in csv.lines().enumerate() {
        if idx == 0 {
            let cols = line.split(',').count();
            if cols < 5 {
                return Err(Error::ConfigInvalid(
                    "scatter plots need a two-dimensional trajectory CSV".into(),
                ));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let step: usize = fields[0]
            .parse()
            .map_err(|_| Error::ConfigInvalid("malformed trajectory CSV".into()))?;
        let x: f64 = fields[3]
            .parse()
            .map_err(|_| Error::ConfigInvalid("malformed trajectory CSV".into()))?;
        let y: f64 = fields[4]
            .parse()
            .map_err(|_| Error::ConfigInvalid("malformed trajectory CSV".into()))?;
        rows.push((step, x, y));
    }
    let last = rows
        .iter()
        .map(|(s, _, _)| *s)
        .max()
        .ok_or_else(|| Error::ConfigInvalid("empty trajectory CSV".into()))?;
    let (w, h, margin) = (480.0, 480.0, 40.0);
    let map = |v: f64, flip: bool| -> f64 {
        let unit = (v + 4.0) / 8.0;
        let unit = if flip { 1.0 - unit } else { unit };
        margin + unit * (w - 2.0 * margin)
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{m}" y="{m}" width="{iw}" height="{ih}" fill="none" stroke="black" stroke-width="1"/>"#,
        m = margin,
        iw = w - 2.0 * margin,
        ih = h - 2.0 * margin
    );
    // zero axes
    let zx = map(0.0, false);
    let zy = map(0.0, true);
    let _ = writeln!(
        svg,
        r##"<line x1="{zx}" y1="{margin}" x2="{zx}" y2="{y2}" stroke="#cccccc" stroke-width="0.5"/>"##,
        y2 = h - margin
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{margin}" y1="{zy}" x2="{x2}" y2="{zy}" stroke="#cccccc" stroke-width="0.5"/>"##,
        x2 = w - margin
    );
    let _ = writeln!(
        svg,
        r#"<text x="{tx}" y="24" font-family="monospace" font-size="13" text-anchor="middle">{title}</text>"#,
        tx = w / 2.0
    );
    for (s, x, y) in rows.iter().filter(|(s, _, _)| *s == last) {
        let _ = s;
        if x.abs() > 4.0 || y.abs() > 4.0 {
            continue;
        }
        let _ = writeln!(
            svg,
            r##"<circle cx="{:.3}" cy="{:.3}" r="2.4" fill="#1f4e8c" fill-opacity="0.75"/>"##,
            map(*x, false),
            map(*y, true)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Grid diagnostics CSV: `t,kl,stein_fisher,tangent_norm2,ede_running`.
pub fn grid_diagnostics_csv(samples: &[crate::continuum::PathSample]) -> String {
    let mut out = String::from("t,kl,stein_fisher,tangent_norm2,ede_running\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt17(s.t),
            fmt17(s.kl),
            fmt17(s.fisher),
            fmt17(s.tangent_sq),
            fmt17(s.ede_running)
        );
    }
    out
}

// ---------------------------------------------------------------------
// the runner

/// Everything a finished run reports back.
#[derive(Debug, Serialize)]
pub struct RunArtifacts {
    pub experiment: String,
    pub files: Vec<String>,
    pub summary: serde_json::Value,
}

fn want(config: &ExperimentConfig, f: OutputFormat) -> bool {
    config.output.formats.contains(&f)
}

/// Execute one experiment; returns the written artefact list and summary.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(Error::ConfigInvalid(problems.join("; ")));
    }
    fs::create_dir_all(&config.output.directory)?;
    let mut files: Vec<String> = Vec::new();
    let mut summary = serde_json::Map::new();
    summary.insert(
        "experiment".into(),
        serde_json::Value::String(config.experiment.name().into()),
    );

    match config.experiment {
        ExperimentKind::RunOde
        | ExperimentKind::RunSde
        | ExperimentKind::RunTilted
        | ExperimentKind::Rate => {
            let kernel = config.kernel.as_ref().unwrap();
            let target = config.target.as_ref().unwrap();
            let dynamics = config.dynamics.as_ref().unwrap();
            let initial = config.initial.as_ref().unwrap().build()?;
            let trajectory =
                run_trajectory(dynamics, kernel, target, &initial, config.tilt.as_ref())?;

            if want(config, OutputFormat::Csv) {
                let path = config.output.directory.join("trajectory.csv");
                atomic_write(&path, &trajectory_to_csv(&trajectory))?;
                files.push("trajectory.csv".into());
                let vpath = config.output.directory.join("velocities.csv");
                atomic_write(&vpath, &velocities_to_csv(&trajectory))?;
                files.push("velocities.csv".into());
                if config.diagnostics.ksd || config.diagnostics.rate {
                    let dpath = config.output.directory.join("diagnostics.csv");
                    atomic_write(&dpath, &diagnostics_csv(kernel, target, &trajectory)?)?;
                    files.push("diagnostics.csv".into());
                }
            }

            let final_e = trajectory.ensembles.last().unwrap();
            let (mean, cov) = final_e.moments();
            summary.insert("steps".into(), serde_json::json!(dynamics.steps));
            summary.insert(
                "final_mean".into(),
                serde_json::json!(mean.iter().copied().collect::<Vec<f64>>()),
            );
            summary.insert(
                "final_cov_diag".into(),
                serde_json::json!(cov.diagonal().iter().copied().collect::<Vec<f64>>()),
            );
            if config.diagnostics.ksd || matches!(config.experiment, ExperimentKind::Rate) {
                summary.insert(
                    "final_ksd2_vstat".into(),
                    serde_json::json!(ksd_squared(
                        kernel,
                        target,
                        final_e,
                        KsdEstimator::VStat
                    )?),
                );
            }
            if config.diagnostics.rate || matches!(config.experiment, ExperimentKind::Rate) {
                summary.insert(
                    "rate_functional".into(),
                    serde_json::json!(rate_functional(kernel, target, &trajectory)?),
                );
            }
            if config.diagnostics.hamiltonian {
                if let Some(tilt) = &config.tilt {
                    summary.insert(
                        "hamiltonian_final".into(),
                        serde_json::json!(hamiltonian(kernel, target, final_e, tilt)?),
                    );
                }
            }
            if config.diagnostics.generator_check {
                let f = CylinderFunction::new(
                    OuterKind::Quadratic,
                    vec![InnerFunction::Linear {
                        coefficients: vec![1.0; final_e.dim()],
                    }],
                )?;
                let g = generator_apply(kernel, target, &f, final_e)?;
                summary.insert(
                    "generator_quadratic_cylinder".into(),
                    serde_json::json!({
                        "transport": g.transport,
                        "exchange": g.exchange,
                        "diagonal": g.diagonal,
                        "total": g.total(),
                    }),
                );
            }
            if matches!(config.experiment, ExperimentKind::RunSde) {
                let burn = dynamics.steps / 2;
                let avg = ergodic_average(&trajectory, burn)?;
                summary.insert(
                    "ergodic_mean".into(),
                    serde_json::json!(avg.mean.iter().copied().collect::<Vec<f64>>()),
                );
                summary.insert(
                    "ergodic_cov_diag".into(),
                    serde_json::json!(avg
                        .covariance
                        .diagonal()
                        .iter()
                        .copied()
                        .collect::<Vec<f64>>()),
                );
            }
        }
        ExperimentKind::Ksd => {
            let kernel = config.kernel.as_ref().unwrap();
            let target = config.target.as_ref().unwrap();
            let ensemble = config
                .initial
                .as_ref()
                .ok_or_else(|| Error::ConfigInvalid("ksd needs an initial ensemble".into()))?
                .build()?;
            let vstat = ksd_squared(kernel, target, &ensemble, KsdEstimator::VStat)?;
            let rkhs = drift_rkhs_norm_squared(kernel, target, &ensemble)?;
            summary.insert("ksd2_vstat".into(), serde_json::json!(vstat));
            summary.insert("drift_rkhs_norm2".into(), serde_json::json!(rkhs));
            summary.insert(
                "identity_gap".into(),
                serde_json::json!((vstat - rkhs).abs()),
            );
            if ensemble.n_particles() > 1 {
                summary.insert(
                    "ksd2_ustat".into(),
                    serde_json::json!(ksd_squared(
                        kernel,
                        target,
                        &ensemble,
                        KsdEstimator::UStat
                    )?),
                );
            }
        }
        ExperimentKind::Compare => {
            let target = config.target.as_ref().unwrap();
            let kernels = config.kernels.as_ref().unwrap();
            let compare_cfg = config.compare.clone().unwrap_or_default();
            let report =
                ksd_sweep(&kernels[0], &kernels[1], target, compare_cfg.seed, compare_cfg.sweep_count)?;
            if want(config, OutputFormat::Json) {
                let path = config.output.directory.join("comparison_report.json");
                atomic_write(&path, &serde_json::to_string_pretty(&report)?)?;
                files.push("comparison_report.json".into());
            }
            if want(config, OutputFormat::Csv) {
                let path = config.output.directory.join("sweep.csv");
                atomic_write(&path, &sweep_to_csv(&report))?;
                files.push("sweep.csv".into());
            }
            summary.insert("verdict".into(), serde_json::json!(report.verdict));
            summary.insert(
                "gram_dominance_min_eig".into(),
                serde_json::json!(report.gram_dominance_min_eig),
            );
            if let Some(fp) = &compare_cfg.fixed_point {
                let initial = fp.initial.build()?;
                let rows = fixed_point_comparison(kernels, target, &initial, &fp.settings)?;
                let mut table = Vec::new();
                for (i, row) in rows.iter().enumerate() {
                    if want(config, OutputFormat::Csv) {
                        let name = format!("fixed_point_{i}.csv");
                        atomic_write(
                            &config.output.directory.join(&name),
                            &positions_to_csv(&row.ensemble),
                        )?;
                        files.push(name);
                    }
                    table.push(serde_json::json!({
                        "kernel": row.kernel,
                        "steps": row.steps_taken,
                        "final_drift_norm": row.final_drift_norm,
                        "reference_ksd": row.reference_ksd,
                        "covariance_error": row.covariance_error,
                    }));
                }
                summary.insert("fixed_point_table".into(), serde_json::Value::Array(table));
            }
        }
        ExperimentKind::ContinuumIdentities => {
            let kernel = config.kernel.as_ref().unwrap();
            let target = config.target.as_ref().unwrap();
            let continuum_cfg = config.continuum.clone().unwrap_or_default();
            let path = GaussianPath::new(
                continuum_cfg.path.mean_poly.clone(),
                continuum_cfg.path.std_poly.clone(),
                continuum_cfg.path.horizon,
            )?;
            let f = path_functionals(
                kernel,
                target,
                &path,
                continuum_cfg.timesteps,
                DEFAULT_DOMAIN.0,
                DEFAULT_DOMAIN.1,
                continuum_cfg.grid_size,
            )?;
            if want(config, OutputFormat::Csv) {
                let cpath = config.output.directory.join("grid_diagnostics.csv");
                atomic_write(&cpath, &grid_diagnostics_csv(&f.samples))?;
                files.push("grid_diagnostics.csv".into());
            }
            let rev = path.reversed();
            let f_rev = path_functionals(
                kernel,
                target,
                &rev,
                continuum_cfg.timesteps,
                DEFAULT_DOMAIN.0,
                DEFAULT_DOMAIN.1,
                continuum_cfg.grid_size,
            )?;
            let grid_end = path.grid_at(
                path.horizon,
                DEFAULT_DOMAIN.0,
                DEFAULT_DOMAIN.1,
                continuum_cfg.grid_size,
            )?;
            let fisher = stein_fisher_continuum(kernel, target, &grid_end)?;
            let delta_kl = f.kl_end - f.kl_start;
            summary.insert("ede_residual".into(), serde_json::json!(f.ede_residual()));
            summary.insert("rate".into(), serde_json::json!(f.rate));
            summary.insert(
                "decomposition_rhs".into(),
                serde_json::json!(f.decomposition_rhs()),
            );
            summary.insert(
                "decomposition_gap_rel".into(),
                serde_json::json!(
                    (f.rate - f.decomposition_rhs()).abs() / f.rate.abs().max(1e-30)
                ),
            );
            summary.insert(
                "time_reversal_gap".into(),
                serde_json::json!((f.rate - f_rev.rate - delta_kl).abs()),
            );
            summary.insert(
                "fisher_forms_gap_rel".into(),
                serde_json::json!(fisher.relative_gap()),
            );

            // method-of-lines solution as the optimal-path probe
            let init = DensityGrid::gaussian(
                DEFAULT_DOMAIN.0,
                DEFAULT_DOMAIN.1,
                continuum_cfg.grid_size,
                1.0,
                1.2,
            )?;
            let states = solve_stein_pde(kernel, target, &init, 5e-3, 100, 20)?;
            let mut mol_ede = 0.0;
            let m = states.len();
            for (j, s) in states.iter().enumerate() {
                let fisher_t = stein_fisher_continuum(kernel, target, &s.grid)?.value();
                let tangent_t = tangent_norm_continuum(kernel, &s.grid, &s.dt_density)?;
                let w = if j == 0 || j == m - 1 { 0.5 } else { 1.0 };
                mol_ede += w * 0.1 * (0.5 * tangent_t + 0.5 * fisher_t);
            }
            mol_ede += crate::continuum::kl_divergence(&states[m - 1].grid, target)?
                - crate::continuum::kl_divergence(&states[0].grid, target)?;
            summary.insert("mol_ede_residual".into(), serde_json::json!(mol_ede));
        }
        ExperimentKind::ReproduceFig1 => {
            let target = config
                .target
                .clone()
                .unwrap_or_else(|| Target::standard_gaussian(2));
            if target.dim() != 2 {
                return Err(Error::ConfigInvalid(
                    "reproduce-fig1 approximates a two-dimensional target".into(),
                ));
            }
            let kernels = config.kernels.clone().unwrap_or_else(|| {
                vec![
                    Kernel::exp_power(2.0, 1.0).expect("valid"),
                    Kernel::exp_power(1.0, 1.0).expect("valid"),
                ]
            });
            let initial = match &config.initial {
                Some(spec) => spec.build()?,
                None => Ensemble::grid(100, 2, 2.0),
            };
            // the N=100 lattice relaxes slowly and non-monotonically in
            // its final rearrangement phase; the larger stable RK4 step
            // and a generous budget get the drift below threshold
            let settings = config
                .compare
                .as_ref()
                .and_then(|c| c.fixed_point.as_ref().map(|f| f.settings.clone()))
                .unwrap_or(FixedPointConfig {
                    dt: 1.6,
                    max_steps: 150_000,
                    drift_tol: 1e-6,
                });
            let rows = fixed_point_comparison(&kernels, &target, &initial, &settings)?;
            let mut table = Vec::new();
            for (i, row) in rows.iter().enumerate() {
                let label = match (row.kernel.family, row.kernel.p) {
                    (crate::kernels::KernelFamily::ExpPower, Some(p)) => {
                        format!("p{}", p.round() as i64)
                    }
                    _ => format!("kernel{i}"),
                };
                // write the converged configuration as a one-group
                // trajectory CSV, then plot from the CSV bytes
                let tr = Trajectory::from_states(
                    vec![row.ensemble.clone()],
                    Vec::new(),
                    settings.dt,
                );
                let csv = trajectory_to_csv(&tr);
                if want(config, OutputFormat::Csv) {
                    let name = format!("fig1_{label}.csv");
                    atomic_write(&config.output.directory.join(&name), &csv)?;
                    files.push(name);
                }
                if want(config, OutputFormat::Svg) {
                    let title = format!(
                        "SVGD fixed point, {} kernel",
                        serde_json::to_string(&row.kernel.family)?.trim_matches('"')
                    );
                    let svg = scatter_svg_from_csv(&csv, &title)?;
                    let name = format!("fig1_{label}.svg");
                    atomic_write(&config.output.directory.join(&name), &svg)?;
                    files.push(name);
                }
                table.push(serde_json::json!({
                    "kernel": row.kernel,
                    "steps": row.steps_taken,
                    "final_drift_norm": row.final_drift_norm,
                    "reference_ksd": row.reference_ksd,
                    "covariance_error": row.covariance_error,
                }));
            }
            summary.insert("kernels".into(), serde_json::Value::Array(table));
        }
    }

    // summary + manifest
    let summary_value = serde_json::Value::Object(summary);
    if want(config, OutputFormat::Json) {
        let spath = config.output.directory.join("summary.json");
        atomic_write(&spath, &serde_json::to_string_pretty(&summary_value)?)?;
        files.push("summary.json".into());
    }
    let manifest = serde_json::json!({
        "code_version": env!("CARGO_PKG_VERSION"),
        "experiment": config.experiment.name(),
        "seed": config.dynamics.as_ref().map(|d| d.seed),
        "config_sha256": config.config_hash()?,
        "config": config,
        "artefacts": files,
    });
    let mpath = config.output.directory.join("manifest.json");
    atomic_write(&mpath, &serde_json::to_string_pretty(&manifest)?)?;
    files.push("manifest.json".into());

    Ok(RunArtifacts {
        experiment: config.experiment.name().into(),
        files,
        summary: summary_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::IntegratorMode;

    fn base_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            experiment: ExperimentKind::RunOde,
            target: Some(Target::standard_gaussian(1)),
            kernel: Some(Kernel::gaussian(1.0).unwrap()),
            kernels: None,
            dynamics: Some(IntegratorConfig {
                mode: IntegratorMode::OdeEuler,
                dt: 0.05,
                steps: 10,
                seed: 7,
                record_every: 1,
            }),
            initial: Some(InitialEnsemble::Grid {
                n: 4,
                dim: 1,
                extent: 1.0,
            }),
            tilt: None,
            diagnostics: DiagnosticsFlags::default(),
            output: OutputConfig {
                directory: dir.to_path_buf(),
                formats: default_formats(),
            },
            compare: None,
            continuum: None,
        }
    }

    #[test]
    fn validate_catches_problems() {
        let dir = tempfile::tempdir().unwrap();
        let good = base_config(dir.path());
        assert!(good.validate().is_empty());

        let mut bad_dt = good.clone();
        bad_dt.dynamics.as_mut().unwrap().dt = -0.5;
        let problems = bad_dt.validate();
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("dynamics.dt"));

        // p<2 + v-stat KSD + erroring diagonal convention
        let mut diag = good.clone();
        diag.kernel = Some(
            Kernel::exp_power(1.0, 1.0)
                .unwrap()
                .with_diag_cross(crate::kernels::DiagCrossConvention::UndefinedError),
        );
        diag.diagnostics.ksd = true;
        let problems = diag.validate();
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("diagonal"));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let config = base_config(dir.path());
        let json = serde_json::to_string(&config).unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.config_hash().unwrap(), back.config_hash().unwrap());

        let with_unknown = json.replace("\"experiment\"", "\"mystery\":1,\"experiment\"");
        assert!(ExperimentConfig::from_json(&with_unknown).is_err());
    }

    #[test]
    fn run_ode_zero_steps_writes_initial_group() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(dir.path());
        config.dynamics.as_mut().unwrap().steps = 0;
        let artifacts = run(&config).unwrap();
        assert!(artifacts.files.iter().any(|f| f == "trajectory.csv"));
        let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        // header + one row per particle
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.starts_with("step,t,particle,x0\n"));
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn identical_seeds_give_byte_identical_artefacts() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config_a = base_config(dir_a.path());
        config_a.experiment = ExperimentKind::RunSde;
        config_a.dynamics.as_mut().unwrap().mode = IntegratorMode::SdeEulerMaruyama;
        config_a.dynamics.as_mut().unwrap().steps = 20;
        let mut config_b = config_a.clone();
        config_b.output.directory = dir_b.path().to_path_buf();

        run(&config_a).unwrap();
        run(&config_b).unwrap();
        for name in ["trajectory.csv", "velocities.csv", "summary.json"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn svg_is_a_pure_function_of_the_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(dir.path());
        config.target = Some(Target::standard_gaussian(2));
        config.initial = Some(InitialEnsemble::Grid {
            n: 9,
            dim: 2,
            extent: 1.5,
        });
        config.dynamics.as_mut().unwrap().steps = 5;
        let _ = run(&config).unwrap();
        let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        let svg1 = scatter_svg_from_csv(&csv, "t").unwrap();
        let svg2 = scatter_svg_from_csv(&csv, "t").unwrap();
        assert_eq!(svg1, svg2);
        assert!(svg1.contains("<circle"));
    }

    #[test]
    fn ksd_experiment_reports_identity_gap() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = base_config(dir.path());
        config.experiment = ExperimentKind::Ksd;
        let artifacts = run(&config).unwrap();
        let gap = artifacts.summary["identity_gap"].as_f64().unwrap();
        assert!(gap < 1e-12);
    }
}
