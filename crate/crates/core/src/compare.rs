//! Kernel-comparison harness: finite-section Gram dominance as the
//! RKHS-ball inclusion proxy, KSD comparison sweeps over families of
//! measures, and fixed-point tables for deterministic runs under
//! different kernels.
//!
//! The tested implication is one-directional: if `K_a - K_b ⪰ 0` on
//! finite sections (so `‖v‖_{H_a} ≤ ‖v‖_{H_b}` where both are defined),
//! then the Stein-Fisher information under `a` dominates the one under
//! `b`. Scaling families pin this orientation: for `k_a = c·k_b` with
//! `c > 1` both the section condition and `I_a = c·I_b ≥ I_b` hold
//! exactly. The reverse printed pairing is deliberately not asserted.

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuum::{stein_fisher_continuum, DensityGrid, DEFAULT_DOMAIN};
use crate::diagnostics::{ksd_squared, KsdEstimator};
use crate::dynamics::{step_deterministic, svgd_drift, Ensemble, OdeScheme};
use crate::kernels::Kernel;
use crate::targets::Target;
use crate::{Error, Result};

/// Outcome of a two-kernel comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    ADominates,
    BDominates,
    /// All sweep differences are zero to rounding.
    Equal,
    Incomparable,
}

/// One sweep entry: a measure rendered either as a grid or a sample
/// ensemble, with the KSD² under both kernels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub measure_id: String,
    pub ksd_a: f64,
    pub ksd_b: f64,
    /// `+1`, `-1`, or `0` for ties to rounding.
    pub diff_sign: i8,
}

/// Comparison report for a kernel pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub kernel_a: Kernel,
    pub kernel_b: Kernel,
    /// Minimum eigenvalue of `K_a - K_b` across all sampled point sets.
    pub gram_dominance_min_eig: f64,
    /// Minimum eigenvalue of `K_b - K_a` across the same sets.
    pub gram_dominance_min_eig_reverse: f64,
    pub ksd_sweep: Vec<SweepEntry>,
    pub verdict: Verdict,
    /// Measures whose sign contradicts the majority direction.
    pub counterexamples: Vec<String>,
}

/// Minimum eigenvalue of `K_a - K_b` over the given point sets (each set
/// is `d × N`, one point per column). Nonnegative values certify
/// finite-section dominance; a necessary condition, not a proof.
pub fn gram_dominance(
    kernel_a: &Kernel,
    kernel_b: &Kernel,
    point_sets: &[DMatrix<f64>],
) -> Result<f64> {
    let mut min_eig = f64::INFINITY;
    for points in point_sets {
        let n = points.ncols();
        let mut diff = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let xi = points.column(i);
                let xj = points.column(j);
                diff[(i, j)] = kernel_a.eval(xi.as_slice(), xj.as_slice())
                    - kernel_b.eval(xi.as_slice(), xj.as_slice());
            }
        }
        let (vals, _) = crate::linalg::sym_eigh_desc(&diff);
        min_eig = min_eig.min(vals[n - 1]);
    }
    if !min_eig.is_finite() {
        return Err(Error::ConfigInvalid("no point sets supplied".into()));
    }
    Ok(min_eig)
}

/// A randomly drawn 1-D Gaussian mixture, the measure family used by the
/// sweep generator.
#[derive(Debug, Clone)]
struct MixtureMeasure {
    weights: Vec<f64>,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl MixtureMeasure {
    fn draw(rng: &mut ChaCha12Rng) -> Self {
        let l = rng.random_range(1..=3);
        let mut weights: Vec<f64> = (0..l).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        MixtureMeasure {
            weights,
            means: (0..l).map(|_| rng.random_range(-2.0..2.0)).collect(),
            stds: (0..l).map(|_| rng.random_range(0.5..1.5)).collect(),
        }
    }

    fn density(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| {
                w / (s * (2.0 * std::f64::consts::PI).sqrt())
                    * (-(x - m) * (x - m) / (2.0 * s * s)).exp()
            })
            .sum()
    }

    fn log_density_deriv(&self, x: f64) -> f64 {
        let mut num = 0.0;
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.stds) {
            let comp = w / (s * (2.0 * std::f64::consts::PI).sqrt())
                * (-(x - m) * (x - m) / (2.0 * s * s)).exp();
            num += comp * (-(x - m) / (s * s));
        }
        num / self.density(x)
    }

    fn grid(&self, g: usize) -> Result<DensityGrid> {
        let grid = DensityGrid::from_unnormalised(DEFAULT_DOMAIN.0, DEFAULT_DOMAIN.1, g, |x| {
            self.density(x)
        })?;
        let score: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&x| self.log_density_deriv(x))
            .collect();
        Ok(grid.with_score(score))
    }

    fn sample(&self, n: usize, rng: &mut ChaCha12Rng) -> Ensemble {
        let mut positions = DMatrix::zeros(1, n);
        for i in 0..n {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut comp = 0;
            for (c, w) in self.weights.iter().enumerate() {
                acc += w;
                if u <= acc {
                    comp = c;
                    break;
                }
                comp = c;
            }
            let z: f64 = StandardNormal.sample(rng);
            positions[(0, i)] = self.means[comp] + self.stds[comp] * z;
        }
        Ensemble::new(positions)
    }

    fn describe(&self, idx: usize, rendering: &str) -> String {
        let comps: Vec<String> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| format!("{w:.3}*N({m:.3},{s:.3}^2)"))
            .collect();
        format!("{idx:03}-{rendering}:{}", comps.join("+"))
    }
}

/// KSD of a measure under one kernel: the continuum quadrature for grid
/// renderings, the diagonal-free U-statistic for sampled ensembles (so
/// that exp-power kernels with `p < 2` stay in their classical domain).
fn sweep_ksd(
    kernel: &Kernel,
    target: &Target,
    measure: &MixtureMeasure,
    as_grid: bool,
    seed: u64,
) -> Result<f64> {
    if as_grid {
        let grid = measure.grid(257)?;
        Ok(stein_fisher_continuum(kernel, target, &grid)?.value())
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let ensemble = measure.sample(256, &mut rng);
        ksd_squared(kernel, target, &ensemble, KsdEstimator::UStat)
    }
}

/// Run a KSD comparison sweep between two kernels over `count` random
/// mixture measures (half rendered as grids, half as sampled ensembles)
/// plus the finite-section Gram dominance test.
pub fn ksd_sweep(
    kernel_a: &Kernel,
    kernel_b: &Kernel,
    target: &Target,
    seed: u64,
    count: usize,
) -> Result<ComparisonReport> {
    if count == 0 {
        return Err(Error::ConfigInvalid("sweep count must be ≥ 1".into()));
    }
    if target.dim() != 1 {
        return Err(Error::Unsupported("ksd sweeps are one-dimensional".into()));
    }
    // entries are independent; each derives its own generator from the
    // run seed, so the sweep order cannot leak into the results
    let entries: Result<Vec<SweepEntry>> = (0..count)
        .into_par_iter()
        .map(|idx| -> Result<SweepEntry> {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64
                .wrapping_mul(idx as u64 + 1)));
            let measure = MixtureMeasure::draw(&mut rng);
            let as_grid = idx % 2 == 0;
            let sample_seed = seed.wrapping_add(idx as u64 * 7919 + 13);
            let ksd_a = sweep_ksd(kernel_a, target, &measure, as_grid, sample_seed)?;
            let ksd_b = sweep_ksd(kernel_b, target, &measure, as_grid, sample_seed)?;
            let scale = ksd_a.abs().max(ksd_b.abs()).max(1e-300);
            let diff_sign = if (ksd_a - ksd_b).abs() <= 1e-12 * scale {
                0
            } else if ksd_a > ksd_b {
                1
            } else {
                -1
            };
            Ok(SweepEntry {
                measure_id: measure.describe(idx, if as_grid { "grid" } else { "sample" }),
                ksd_a,
                ksd_b,
                diff_sign,
            })
        })
        .collect();
    let mut entries = entries?;
    entries.sort_by(|a, b| a.measure_id.cmp(&b.measure_id));

    // Gram dominance across random point sets drawn from the same seed
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0xdead_beef));
    let point_sets: Vec<DMatrix<f64>> = (0..8)
        .map(|_| {
            let n = rng.random_range(4..=24);
            DMatrix::from_fn(target.dim(), n, |_, _| rng.random_range(-3.0..3.0))
        })
        .collect();
    let min_eig_ab = gram_dominance(kernel_a, kernel_b, &point_sets)?;
    let min_eig_ba = gram_dominance(kernel_b, kernel_a, &point_sets)?;

    let report = assemble_report(
        kernel_a.clone(),
        kernel_b.clone(),
        min_eig_ab,
        min_eig_ba,
        entries,
    );
    Ok(report)
}

fn assemble_report(
    kernel_a: Kernel,
    kernel_b: Kernel,
    min_eig_ab: f64,
    min_eig_ba: f64,
    entries: Vec<SweepEntry>,
) -> ComparisonReport {
    let gram_tol = 1e-10;
    let all_a = entries.iter().all(|e| e.diff_sign >= 0);
    let all_b = entries.iter().all(|e| e.diff_sign <= 0);
    let all_zero = entries.iter().all(|e| e.diff_sign == 0);
    let gram_a = min_eig_ab >= -gram_tol;
    let gram_b = min_eig_ba >= -gram_tol;

    let verdict = if all_zero && gram_a && gram_b {
        Verdict::Equal
    } else if all_a && !all_zero && gram_a {
        Verdict::ADominates
    } else if all_b && !all_zero && gram_b {
        Verdict::BDominates
    } else {
        Verdict::Incomparable
    };

    // counterexamples: entries contradicting the majority direction
    let pos = entries.iter().filter(|e| e.diff_sign > 0).count();
    let neg = entries.iter().filter(|e| e.diff_sign < 0).count();
    let majority = if pos >= neg { 1 } else { -1 };
    let counterexamples: Vec<String> = entries
        .iter()
        .filter(|e| e.diff_sign != 0 && e.diff_sign as i32 != majority)
        .map(|e| e.measure_id.clone())
        .collect();

    ComparisonReport {
        kernel_a,
        kernel_b,
        gram_dominance_min_eig: min_eig_ab,
        gram_dominance_min_eig_reverse: min_eig_ba,
        ksd_sweep: entries,
        verdict,
        counterexamples,
    }
}

/// Sweep table as CSV with header `measure_id,ksd_a,ksd_b,diff_sign`.
pub fn sweep_to_csv(report: &ComparisonReport) -> String {
    let mut out = String::from("measure_id,ksd_a,ksd_b,diff_sign\n");
    for e in &report.ksd_sweep {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{}\n",
            e.measure_id, e.ksd_a, e.ksd_b, e.diff_sign
        ));
    }
    out
}

/// Settings for the fixed-point comparison runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    pub dt: f64,
    pub max_steps: usize,
    /// Convergence threshold on the max particle drift 2-norm.
    pub drift_tol: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            dt: 0.4,
            max_steps: 60_000,
            drift_tol: 1e-6,
        }
    }
}

/// One row of the fixed-point table.
#[derive(Debug, Clone)]
pub struct FixedPointRow {
    pub kernel: Kernel,
    pub ensemble: Ensemble,
    pub steps_taken: usize,
    pub final_drift_norm: f64,
    /// KSD² of the converged configuration under one fixed smooth
    /// reference kernel, shared by all rows for a fair comparison.
    pub reference_ksd: f64,
    /// Relative Frobenius error of the empirical covariance against the
    /// target's reference moments.
    pub covariance_error: f64,
}

/// Max particle drift 2-norm, the convergence criterion of the runs.
pub fn drift_norm(kernel: &Kernel, target: &Target, ensemble: &Ensemble) -> Result<f64> {
    let b = svgd_drift(kernel, target, ensemble)?;
    let mut worst = 0.0f64;
    for i in 0..b.ncols() {
        worst = worst.max(b.column(i).norm());
    }
    Ok(worst)
}

/// Integrate each kernel's deterministic dynamics to its fixed point and
/// tabulate the converged configurations.
pub fn fixed_point_comparison(
    kernels: &[Kernel],
    target: &Target,
    initial: &Ensemble,
    config: &FixedPointConfig,
) -> Result<Vec<FixedPointRow>> {
    let reference = Kernel::gaussian(1.0).expect("unit width is valid");
    let (_, cov_ref) = target.reference_moments()?;
    let mut rows = Vec::new();
    for kernel in kernels {
        let mut ensemble = initial.clone();
        let mut steps_taken = config.max_steps;
        let mut reached = false;
        for step in 0..config.max_steps {
            ensemble = step_deterministic(kernel, target, &ensemble, config.dt, OdeScheme::Rk4)?;
            if (step % 25 == 0 || step + 1 == config.max_steps)
                && drift_norm(kernel, target, &ensemble)? < config.drift_tol
            {
                steps_taken = step + 1;
                reached = true;
                break;
            }
        }
        let final_drift_norm = drift_norm(kernel, target, &ensemble)?;
        if !reached && final_drift_norm >= config.drift_tol {
            return Err(Error::NoConvergence(format!(
                "drift norm {final_drift_norm:.3e} after {} steps (threshold {:.1e})",
                config.max_steps, config.drift_tol
            )));
        }
        let reference_ksd = ksd_squared(&reference, target, &ensemble, KsdEstimator::VStat)?;
        let (_, cov_emp) = ensemble.moments();
        let covariance_error = (&cov_emp - &cov_ref).norm() / cov_ref.norm();
        rows.push(FixedPointRow {
            kernel: kernel.clone(),
            ensemble,
            steps_taken,
            final_drift_norm,
            reference_ksd,
            covariance_error,
        });
    }
    Ok(rows)
}

/// The `d × N` positions of a row as CSV (`particle,x0,..`).
pub fn positions_to_csv(ensemble: &Ensemble) -> String {
    let d = ensemble.dim();
    let mut out = String::from("particle");
    for a in 0..d {
        out.push_str(&format!(",x{a}"));
    }
    out.push('\n');
    for i in 0..ensemble.n_particles() {
        out.push_str(&format!("{i}"));
        for a in 0..d {
            out.push_str(&format!(",{:.16e}", ensemble.positions[(a, i)]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gram_dominance_scaling_and_identity() {
        let base = Kernel::gaussian(1.0).unwrap();
        let double = base.clone().scaled(2.0);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let sets: Vec<DMatrix<f64>> = (0..4)
            .map(|_| DMatrix::from_fn(2, 10, |_, _| rng.random_range(-2.0..2.0)))
            .collect();

        // 2k - k = k is PSD: min eigenvalue of K_b under the base kernel
        let me = gram_dominance(&double, &base, &sets).unwrap();
        assert!(me >= -1e-12, "scaling dominance violated: {me}");

        // identical kernels → zero matrix
        let zero = gram_dominance(&base, &base, &sets).unwrap();
        assert!(zero.abs() < 1e-14);
    }

    #[test]
    fn sweep_homogeneity_verdicts_exact() {
        let target = Target::standard_gaussian(1);
        let base = Kernel::gaussian(1.0).unwrap();

        let up = ksd_sweep(&base.clone().scaled(1.5), &base, &target, 42, 6).unwrap();
        assert_eq!(up.verdict, Verdict::ADominates);
        for e in &up.ksd_sweep {
            assert_relative_eq!(e.ksd_a, 1.5 * e.ksd_b, max_relative = 1e-12);
        }
        assert!(up.counterexamples.is_empty());

        let down = ksd_sweep(&base, &base.clone().scaled(1.5), &target, 42, 6).unwrap();
        assert_eq!(down.verdict, Verdict::BDominates);

        let tie = ksd_sweep(&base, &base.clone(), &target, 42, 6).unwrap();
        assert_eq!(tie.verdict, Verdict::Equal);
        assert!(tie.ksd_sweep.iter().all(|e| e.diff_sign == 0));
    }

    #[test]
    fn sweep_reports_are_reproducible() {
        let target = Target::standard_gaussian(1);
        let a = Kernel::exp_power(1.0, 1.0).unwrap();
        let b = Kernel::exp_power(2.0, 1.0).unwrap();
        let r1 = ksd_sweep(&a, &b, &target, 7, 8).unwrap();
        let r2 = ksd_sweep(&a, &b, &target, 7, 8).unwrap();
        let j1 = serde_json::to_string(&r1).unwrap();
        let j2 = serde_json::to_string(&r2).unwrap();
        assert_eq!(j1, j2, "report must be byte-identical for equal seeds");

        let csv = sweep_to_csv(&r1);
        assert!(csv.starts_with("measure_id,ksd_a,ksd_b,diff_sign\n"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn single_particle_fixed_point_is_the_mode() {
        // N=1: pure gradient descent; every kernel ends at the mode
        let target = Target::standard_gaussian(1);
        let kernels = vec![
            Kernel::gaussian(1.0).unwrap(),
            Kernel::exp_power(1.0, 1.0).unwrap(),
            Kernel::imq(0.5, 1.0).unwrap(),
        ];
        let init = Ensemble::new(DMatrix::from_element(1, 1, 1.7));
        let cfg = FixedPointConfig {
            dt: 0.2,
            max_steps: 4000,
            drift_tol: 1e-10,
        };
        let rows = fixed_point_comparison(&kernels, &target, &init, &cfg).unwrap();
        for row in &rows {
            assert!(row.ensemble.positions[(0, 0)].abs() < 1e-8);
        }
    }

    #[test]
    fn two_particle_fixed_point_matches_bisection_oracle() {
        let target = Target::standard_gaussian(1);
        let kernel = Kernel::gaussian(1.0).unwrap();
        let init = Ensemble::new(DMatrix::from_column_slice(1, 2, &[0.5, -0.5]));
        let cfg = FixedPointConfig {
            dt: 0.2,
            max_steps: 20000,
            drift_tol: 1e-9,
        };
        let rows = fixed_point_comparison(&[kernel], &target, &init, &cfg).unwrap();
        let expected = crate::dynamics::two_particle_fixed_point(1.0);
        let mut xs: Vec<f64> = (0..2).map(|i| rows[0].ensemble.positions[(0, i)]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(xs[1], expected, max_relative = 1e-6);
        assert_relative_eq!(xs[0], -expected, max_relative = 1e-6);
    }

    #[test]
    fn no_convergence_is_reported() {
        let target = Target::standard_gaussian(1);
        let kernel = Kernel::gaussian(1.0).unwrap();
        let init = Ensemble::new(DMatrix::from_column_slice(1, 2, &[3.0, -2.0]));
        let cfg = FixedPointConfig {
            dt: 0.05,
            max_steps: 3,
            drift_tol: 1e-12,
        };
        let r = fixed_point_comparison(&[kernel], &target, &init, &cfg);
        assert!(matches!(r, Err(Error::NoConvergence(_))));
    }
}
