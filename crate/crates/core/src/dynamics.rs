//! Time steppers for the deterministic particle ODE, the stochastic variant
//! with kernel-correlated noise, and tilted dynamics, plus trajectory and
//! ergodic-average recording.
//!
//! The deterministic drift of particle `i` is
//!
//! ```text
//! b_i = (1/N) Σ_j [ -k(x_i,x_j) ∇V(x_j) + ∇_{x_j} k(x_i,x_j) ]
//! ```
//!
//! and the stochastic stepper adds, per dimension `a`, the correlated
//! increment `√dt · √(2/N) · √K̃ · z_a` with `z_a` a standard normal
//! N-vector — the per-dimension realisation of the block square root
//! `√(2K(x̄)) = √((2/N)K̃) ⊗ I_d`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::Kernel;
use crate::targets::Target;
use crate::{Error, Result};

/// Particle ensemble: `N` positions in `d` dimensions at a point in time.
///
/// Positions are stored one particle per column (`d × N`), so a particle is
/// a contiguous slice. The empirical measure `(1/N) Σ δ_{x_i}` is the
/// measure-level reading of this state.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    /// `d × N` position matrix, one particle per column.
    pub positions: DMatrix<f64>,
    /// Current time `t ≥ 0`.
    pub time: f64,
}

impl Ensemble {
    pub fn new(positions: DMatrix<f64>) -> Ensemble {
        Ensemble {
            positions,
            time: 0.0,
        }
    }

    /// Particles on a deterministic equispaced grid.
    ///
    /// For `d = 1` this is `n` points on `[-extent, extent]`; for higher
    /// dimensions the grid is the largest hypercube lattice with at most
    /// `n` nodes, padded with lattice points revisited in order when `n`
    /// is not a perfect power.
    pub fn grid(n: usize, dim: usize, extent: f64) -> Ensemble {
        assert!(n >= 1 && dim >= 1);
        let per_axis = (n as f64).powf(1.0 / dim as f64).round().max(1.0) as usize;
        let axis = |i: usize| -> f64 {
            if per_axis == 1 {
                0.0
            } else {
                -extent + 2.0 * extent * i as f64 / (per_axis - 1) as f64
            }
        };
        let mut positions = DMatrix::zeros(dim, n);
        for p in 0..n {
            let mut idx = p % per_axis.pow(dim as u32);
            for a in 0..dim {
                positions[(a, p)] = axis(idx % per_axis);
                idx /= per_axis;
            }
            // offset duplicate sweeps slightly so particles stay distinct
            if p >= per_axis.pow(dim as u32) {
                let sweep = (p / per_axis.pow(dim as u32)) as f64;
                positions[(0, p)] += sweep * extent * 1e-3;
            }
        }
        Ensemble::new(positions)
    }

    /// Seeded Gaussian initial draw, `x_i ~ N(mean, std² I)`.
    pub fn gaussian_draw(n: usize, dim: usize, mean: &[f64], std: f64, seed: u64) -> Ensemble {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut positions = DMatrix::zeros(dim, n);
        for p in 0..n {
            for a in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                positions[(a, p)] = mean[a] + std * z;
            }
        }
        Ensemble::new(positions)
    }

    pub fn n_particles(&self) -> usize {
        self.positions.ncols()
    }

    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        self.positions.column(i).data.into_slice()
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().all(|v| v.is_finite())
    }

    fn check_finite(&self) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "ensemble contains NaN/Inf at t = {}",
                self.time
            )))
        }
    }

    /// Empirical mean and covariance over particles.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        moments_of_columns(&self.positions)
    }
}

pub(crate) fn moments_of_columns(cols: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (d, n) = (cols.nrows(), cols.ncols());
    let mut mean = DVector::zeros(d);
    for j in 0..n {
        mean += cols.column(j);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for j in 0..n {
        let delta = cols.column(j) - &mean;
        cov += &delta * delta.transpose();
    }
    cov /= n as f64;
    (mean, cov)
}

/// Deterministic integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OdeScheme {
    Euler,
    Rk4,
}

/// Integrator mode, mirrored in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorMode {
    OdeEuler,
    OdeRk4,
    SdeEulerMaruyama,
    TiltedOde,
}

/// Time discretisation of a run. `dt · steps` is the horizon; identical
/// seeds reproduce trajectories bit-for-bit on one platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub mode: IntegratorMode,
    pub dt: f64,
    pub steps: usize,
    /// RNG seed; only consumed by the SDE mode.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    1
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.record_every == 0 {
            return Err(Error::ConfigInvalid("record_every must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// A tilt potential `ξ` with gradient, either linear `ξ(x) = a·x` or a
/// radial-basis expansion `ξ(x) = Σ_m w_m exp(-|x-c_m|²/(2 width²))`.
///
/// The tilt enters the dynamics as the extra drift
/// `+2 (1/N) Σ_j k(x_i,x_j) ∇ξ(x_j)`; a piecewise-constant schedule scales
/// `ξ` by a factor per time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "representation")]
pub enum TiltField {
    Linear {
        coefficients: Vec<f64>,
        #[serde(default)]
        schedule: TiltSchedule,
    },
    RadialBasis {
        /// One center per entry, each of dimension `d`.
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
        width: f64,
        #[serde(default)]
        schedule: TiltSchedule,
    },
}

/// Time dependence of the tilt amplitude.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum TiltSchedule {
    #[default]
    Constant,
    /// Amplitude `factors[i]` on `[knots[i], knots[i+1])`; the last factor
    /// extends to infinity.
    PiecewiseConstant { knots: Vec<f64>, factors: Vec<f64> },
}

impl TiltSchedule {
    fn amplitude(&self, t: f64) -> f64 {
        match self {
            TiltSchedule::Constant => 1.0,
            TiltSchedule::PiecewiseConstant { knots, factors } => {
                let mut amp = factors.first().copied().unwrap_or(1.0);
                for (k, f) in knots.iter().zip(factors) {
                    if t >= *k {
                        amp = *f;
                    }
                }
                amp
            }
        }
    }
}

impl TiltField {
    pub fn linear(coefficients: Vec<f64>) -> TiltField {
        TiltField::Linear {
            coefficients,
            schedule: TiltSchedule::Constant,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            TiltField::Linear { coefficients, .. } => {
                if coefficients.len() != dim {
                    return Err(Error::ConfigInvalid(format!(
                        "linear tilt has {} coefficients for dimension {dim}",
                        coefficients.len()
                    )));
                }
                if coefficients.iter().any(|c| !c.is_finite()) {
                    return Err(Error::ConfigInvalid("tilt coefficients must be finite".into()));
                }
            }
            TiltField::RadialBasis {
                centers,
                weights,
                width,
                ..
            } => {
                if centers.len() != weights.len() || centers.is_empty() {
                    return Err(Error::ConfigInvalid(
                        "radial-basis tilt needs one weight per center".into(),
                    ));
                }
                if centers.iter().any(|c| c.len() != dim) {
                    return Err(Error::ConfigInvalid("tilt center dimension mismatch".into()));
                }
                if !(width.is_finite() && *width > 0.0) {
                    return Err(Error::ConfigInvalid("tilt width must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// `ξ_t(x)`.
    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        match self {
            TiltField::Linear {
                coefficients,
                schedule,
            } => {
                schedule.amplitude(t)
                    * coefficients.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            }
            TiltField::RadialBasis {
                centers,
                weights,
                width,
                schedule,
            } => {
                let mut acc = 0.0;
                for (c, w) in centers.iter().zip(weights) {
                    let r2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    acc += w * (-r2 / (2.0 * width * width)).exp();
                }
                schedule.amplitude(t) * acc
            }
        }
    }

    /// `∇ξ_t(x)`.
    pub fn grad(&self, x: &[f64], t: f64) -> Vec<f64> {
        match self {
            TiltField::Linear {
                coefficients,
                schedule,
            } => {
                let amp = schedule.amplitude(t);
                coefficients.iter().map(|a| amp * a).collect()
            }
            TiltField::RadialBasis {
                centers,
                weights,
                width,
                schedule,
            } => {
                let amp = schedule.amplitude(t);
                let w2 = width * width;
                let mut grad = vec![0.0; x.len()];
                for (c, w) in centers.iter().zip(weights) {
                    let r2: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    let e = w * (-r2 / (2.0 * w2)).exp();
                    for (g, (xi, ci)) in grad.iter_mut().zip(x.iter().zip(c)) {
                        *g += e * (ci - xi) / w2;
                    }
                }
                for g in &mut grad {
                    *g *= amp;
                }
                grad
            }
        }
    }
}

/// The SVGD drift, one column per particle (`d × N`).
pub fn svgd_drift(kernel: &Kernel, target: &Target, ensemble: &Ensemble) -> Result<DMatrix<f64>> {
    let n = ensemble.n_particles();
    let d = ensemble.dim();
    let scores: Vec<Vec<f64>> = (0..n).map(|j| target.score(ensemble.particle(j))).collect();
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = ensemble.particle(i);
            let mut acc = vec![0.0; d];
            for j in 0..n {
                let xj = ensemble.particle(j);
                let r = xi
                    .iter()
                    .zip(xj)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let (k, b) = kernel.value_and_b(r);
                for a in 0..d {
                    // -k ∇V(x_j) + ∇_{x_j} k(x_i, x_j)
                    acc[a] += -k * scores[j][a] + b * (xi[a] - xj[a]);
                }
            }
            for v in &mut acc {
                *v /= n as f64;
            }
            acc
        })
        .collect();
    let mut drift = DMatrix::zeros(d, n);
    for (i, col) in cols.iter().enumerate() {
        for a in 0..d {
            drift[(a, i)] = col[a];
        }
    }
    Ok(drift)
}

/// Extra tilt drift `2 (1/N) Σ_j k(x_i,x_j) ∇ξ_t(x_j)`, one column per
/// particle.
pub fn tilt_drift(
    kernel: &Kernel,
    ensemble: &Ensemble,
    tilt: &TiltField,
    t: f64,
) -> DMatrix<f64> {
    let n = ensemble.n_particles();
    let d = ensemble.dim();
    let grads: Vec<Vec<f64>> = (0..n)
        .map(|j| tilt.grad(ensemble.particle(j), t))
        .collect();
    let mut drift = DMatrix::zeros(d, n);
    for i in 0..n {
        let xi = ensemble.particle(i);
        for j in 0..n {
            let k = kernel.eval(xi, ensemble.particle(j));
            for a in 0..d {
                drift[(a, i)] += 2.0 * k * grads[j][a] / n as f64;
            }
        }
    }
    drift
}

/// One explicit deterministic step (Euler or classical RK4).
pub fn step_deterministic(
    kernel: &Kernel,
    target: &Target,
    ensemble: &Ensemble,
    dt: f64,
    scheme: OdeScheme,
) -> Result<Ensemble> {
    let next = match scheme {
        OdeScheme::Euler => {
            let b = svgd_drift(kernel, target, ensemble)?;
            Ensemble {
                positions: &ensemble.positions + b * dt,
                time: ensemble.time + dt,
            }
        }
        OdeScheme::Rk4 => {
            let at = |positions: DMatrix<f64>| Ensemble {
                positions,
                time: ensemble.time,
            };
            let k1 = svgd_drift(kernel, target, ensemble)?;
            let k2 = svgd_drift(kernel, target, &at(&ensemble.positions + &k1 * (dt / 2.0)))?;
            let k3 = svgd_drift(kernel, target, &at(&ensemble.positions + &k2 * (dt / 2.0)))?;
            let k4 = svgd_drift(kernel, target, &at(&ensemble.positions + &k3 * dt))?;
            Ensemble {
                positions: &ensemble.positions
                    + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0),
                time: ensemble.time + dt,
            }
        }
    };
    next.check_finite()?;
    Ok(next)
}

/// One Euler step of the tilted dynamics `dX/dt = b + 2 T_ρ ∇ξ_t`.
pub fn step_tilted(
    kernel: &Kernel,
    target: &Target,
    ensemble: &Ensemble,
    tilt: &TiltField,
    dt: f64,
) -> Result<Ensemble> {
    let b = svgd_drift(kernel, target, ensemble)?;
    let g = tilt_drift(kernel, ensemble, tilt, ensemble.time);
    let next = Ensemble {
        positions: &ensemble.positions + (b + g) * dt,
        time: ensemble.time + dt,
    };
    next.check_finite()?;
    Ok(next)
}

/// One Euler–Maruyama step of the stochastic dynamics.
///
/// Noise: per dimension `a`, add `√dt √(2/N) √K̃ z_a`. The Gram
/// factorization is recomputed every step because positions move.
pub fn step_stochastic(
    kernel: &Kernel,
    target: &Target,
    ensemble: &Ensemble,
    dt: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Ensemble> {
    let n = ensemble.n_particles();
    let d = ensemble.dim();
    // draws happen first, in a fixed row-major order, so that trajectories
    // are reproducible regardless of any internal parallelism
    let mut draws = DMatrix::zeros(n, d);
    for a in 0..d {
        for i in 0..n {
            draws[(i, a)] = StandardNormal.sample(rng);
        }
    }
    step_stochastic_with_draws(kernel, target, ensemble, dt, &draws)
}

/// Deterministic-noise variant used by tests (`draws` is `N × d`).
pub fn step_stochastic_with_draws(
    kernel: &Kernel,
    target: &Target,
    ensemble: &Ensemble,
    dt: f64,
    draws: &DMatrix<f64>,
) -> Result<Ensemble> {
    let n = ensemble.n_particles();
    let d = ensemble.dim();
    let b = svgd_drift(kernel, target, ensemble)?;
    let fact = kernel.gram(&ensemble.positions)?;
    let amp = (2.0 * dt / n as f64).sqrt();
    let mut positions = &ensemble.positions + b * dt;
    for a in 0..d {
        let z = DVector::from_iterator(n, (0..n).map(|i| draws[(i, a)]));
        let corr = fact.sqrt_apply(&z);
        for i in 0..n {
            positions[(a, i)] += amp * corr[i];
        }
    }
    let next = Ensemble {
        positions,
        time: ensemble.time + dt,
    };
    next.check_finite()?;
    Ok(next)
}

/// Recorded state sequence with forward-difference velocities.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Recorded ensembles (always includes step 0 and the final step).
    pub ensembles: Vec<Ensemble>,
    /// Step index of each recorded ensemble.
    pub steps: Vec<usize>,
    /// Per-step velocities `(X_{n+1} - X_n)/dt` aligned with `ensembles`
    /// (one fewer entry; empty when `steps = 0`).
    pub velocities: Vec<DMatrix<f64>>,
    /// Step size used by the run.
    pub dt: f64,
}

impl Trajectory {
    /// Assemble a trajectory from externally produced states and
    /// velocities, for rate-functional evaluation on synthetic paths.
    pub fn from_states(ensembles: Vec<Ensemble>, velocities: Vec<DMatrix<f64>>, dt: f64) -> Self {
        let steps = (0..ensembles.len()).collect();
        Trajectory {
            ensembles,
            steps,
            velocities,
            dt,
        }
    }
}

/// Run a full trajectory under `config`, recording every `record_every`
/// steps (plus step 0 and the final step).
///
/// Velocities are recorded at every *recorded* state from the immediately
/// following raw step, i.e. `u_n = (X_{n+1} - X_n)/dt`, the discretisation
/// consumed by the rate functional.
pub fn run_trajectory(
    config: &IntegratorConfig,
    kernel: &Kernel,
    target: &Target,
    initial: &Ensemble,
    tilt: Option<&TiltField>,
) -> Result<Trajectory> {
    config.validate()?;
    if matches!(config.mode, IntegratorMode::TiltedOde) && tilt.is_none() {
        return Err(Error::ConfigInvalid(
            "tilted-ode mode requires a tilt field".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut current = initial.clone();
    current.check_finite()?;

    let mut ensembles = vec![current.clone()];
    let mut steps = vec![0usize];
    let mut velocities: Vec<DMatrix<f64>> = Vec::new();

    for step in 0..config.steps {
        let next = match config.mode {
            IntegratorMode::OdeEuler => {
                step_deterministic(kernel, target, &current, config.dt, OdeScheme::Euler)?
            }
            IntegratorMode::OdeRk4 => {
                step_deterministic(kernel, target, &current, config.dt, OdeScheme::Rk4)?
            }
            IntegratorMode::SdeEulerMaruyama => {
                step_stochastic(kernel, target, &current, config.dt, &mut rng)?
            }
            IntegratorMode::TiltedOde => {
                step_tilted(kernel, target, &current, tilt.unwrap(), config.dt)?
            }
        };
        let recorded_last = *steps.last().unwrap() == step;
        if recorded_last {
            velocities.push((&next.positions - &current.positions) / config.dt);
        }
        current = next;
        let is_last = step + 1 == config.steps;
        if (step + 1) % config.record_every == 0 || is_last {
            ensembles.push(current.clone());
            steps.push(step + 1);
        }
    }
    Ok(Trajectory {
        ensembles,
        steps,
        velocities,
        dt: config.dt,
    })
}

/// Pooled positions across time and particles after a burn-in, with their
/// moment summary. This realises the ergodic average of a run.
pub struct ErgodicAverage {
    /// `d × M` pooled sample matrix.
    pub samples: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

pub fn ergodic_average(trajectory: &Trajectory, burn_in: usize) -> Result<ErgodicAverage> {
    let kept: Vec<&Ensemble> = trajectory
        .ensembles
        .iter()
        .zip(&trajectory.steps)
        .filter(|(_, &s)| s >= burn_in)
        .map(|(e, _)| e)
        .collect();
    if kept.is_empty() {
        return Err(Error::ConfigInvalid(
            "burn-in removed every recorded state".into(),
        ));
    }
    let d = kept[0].dim();
    let n = kept[0].n_particles();
    let m = kept.len() * n;
    let mut samples = DMatrix::zeros(d, m);
    let mut col = 0;
    for e in kept {
        for i in 0..e.n_particles() {
            samples.set_column(col, &e.positions.column(i));
            col += 1;
        }
    }
    let (mean, covariance) = moments_of_columns(&samples);
    Ok(ErgodicAverage {
        samples,
        mean,
        covariance,
    })
}

/// Bisection solve of the two-particle stationarity equation
/// `1 = e^{-4a²/σ²} (1 + 4/σ²)` for the symmetric gaussian-kernel fixed
/// point `±a` (d = 1, standard gaussian target). Test oracle shared with
/// the acceptance suite.
pub fn two_particle_fixed_point(sigma: f64) -> f64 {
    let f = |a: f64| (-4.0 * a * a / (sigma * sigma)).exp() * (1.0 + 4.0 / (sigma * sigma)) - 1.0;
    let (mut lo, mut hi) = (0.0, 5.0 * sigma);
    assert!(f(lo) > 0.0 && f(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
