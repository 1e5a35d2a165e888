//! Unnormalised target distributions `π = e^{-V}/Z` supplying the potential
//! `V` and score `∇V` to the dynamics and diagnostics.
//!
//! The normalising constant is stored where a closed form exists but no
//! algorithm in this crate ever needs it: everything downstream is
//! computable from `V` and `∇V` alone.
//!
//! Integrability of `e^{-V}` per family: gaussian and mixture potentials
//! are negative log-densities of (mixtures of) normalised Gaussians, and
//! the double well grows quartically in `x₁` and quadratically in the
//! remaining coordinates. No runtime check is needed.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One Gaussian component in closed form: mean, SPD covariance and the
/// derived quantities used by potential/score evaluation.
#[derive(Debug, Clone, PartialEq)]
struct GaussianCore {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// log of the normalisation constant (2π)^{d/2} |Σ|^{1/2}
    log_norm: f64,
}

impl GaussianCore {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::ConfigInvalid(format!(
                "covariance must be {d}×{d}, got {}×{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if crate::linalg::max_abs(&(&cov - cov.transpose())) > 1e-12 {
            return Err(Error::ConfigInvalid("covariance must be symmetric".into()));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::ConfigInvalid("covariance must be positive definite".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let precision = chol.inverse();
        let log_norm = 0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det;
        Ok(GaussianCore {
            mean,
            cov,
            precision,
            log_norm,
        })
    }

    /// `-log N(x; m, Σ)` including the normalisation.
    fn neg_log_density(&self, x: &DVector<f64>) -> f64 {
        let delta = x - &self.mean;
        0.5 * (&self.precision * &delta).dot(&delta) + self.log_norm
    }

    fn grad_neg_log_density(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.precision * (x - &self.mean)
    }
}

/// Target families.
#[derive(Debug, Clone, PartialEq)]
enum TargetKind {
    Gaussian(GaussianCore),
    Mixture {
        weights: Vec<f64>,
        components: Vec<GaussianCore>,
    },
    /// `V(x) = (x₁² - a)²/b + Σ_{i≥2} x_i²/2`.
    DoubleWell { a: f64, b: f64, dim: usize },
}

/// An unnormalised target `π ∝ e^{-V}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TargetSpec", into = "TargetSpec")]
pub struct Target {
    kind: TargetKind,
    dim: usize,
    /// Known normalising constant, when the family provides one. Never
    /// consumed by any algorithm in the crate.
    normalising_constant: Option<f64>,
}

/// Serialised form: `{"family":"gaussian","mean":[..],"cov":[[..]]}` etc.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "family")]
pub enum TargetSpec {
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    },
    DoubleWell {
        a: f64,
        b: f64,
        dim: usize,
    },
}

impl TryFrom<TargetSpec> for Target {
    type Error = Error;

    fn try_from(spec: TargetSpec) -> Result<Target> {
        match spec {
            TargetSpec::Gaussian { mean, cov } => {
                let d = mean.len();
                let rows: Vec<f64> = cov.iter().flatten().copied().collect();
                if cov.len() != d || rows.len() != d * d {
                    return Err(Error::ConfigInvalid("covariance shape mismatch".into()));
                }
                Target::gaussian(
                    DVector::from_vec(mean),
                    DMatrix::from_row_slice(d, d, &rows),
                )
            }
            TargetSpec::GaussianMixture {
                weights,
                means,
                covs,
            } => {
                let comps: Result<Vec<(DVector<f64>, DMatrix<f64>)>> = means
                    .into_iter()
                    .zip(covs)
                    .map(|(m, c)| {
                        let d = m.len();
                        let rows: Vec<f64> = c.iter().flatten().copied().collect();
                        if rows.len() != d * d {
                            return Err(Error::ConfigInvalid(
                                "mixture covariance shape mismatch".into(),
                            ));
                        }
                        Ok((DVector::from_vec(m), DMatrix::from_row_slice(d, d, &rows)))
                    })
                    .collect();
                Target::mixture(weights, comps?)
            }
            TargetSpec::DoubleWell { a, b, dim } => Target::double_well(a, b, dim),
        }
    }
}

impl From<Target> for TargetSpec {
    fn from(t: Target) -> TargetSpec {
        match &t.kind {
            TargetKind::Gaussian(g) => TargetSpec::Gaussian {
                mean: g.mean.iter().copied().collect(),
                cov: matrix_rows(&g.cov),
            },
            TargetKind::Mixture {
                weights,
                components,
            } => TargetSpec::GaussianMixture {
                weights: weights.clone(),
                means: components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
                covs: components.iter().map(|c| matrix_rows(&c.cov)).collect(),
            },
            TargetKind::DoubleWell { a, b, dim } => TargetSpec::DoubleWell {
                a: *a,
                b: *b,
                dim: *dim,
            },
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl Target {
    /// Gaussian `N(mean, cov)`; the normalising constant is known in
    /// closed form for this family.
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Target> {
        let dim = mean.len();
        let core = GaussianCore::new(mean, cov)?;
        // V = -log N + log_norm ⇒ Z = exp(log_norm)
        let z = core.log_norm.exp();
        Ok(Target {
            kind: TargetKind::Gaussian(core),
            dim,
            normalising_constant: Some(z),
        })
    }

    pub fn standard_gaussian(dim: usize) -> Target {
        Target::gaussian(DVector::zeros(dim), DMatrix::identity(dim, dim))
            .expect("identity covariance is SPD")
    }

    /// Gaussian mixture with the given weights (must sum to 1).
    pub fn mixture(
        weights: Vec<f64>,
        components: Vec<(DVector<f64>, DMatrix<f64>)>,
    ) -> Result<Target> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::ConfigInvalid(
                "mixture needs one weight per component".into(),
            ));
        }
        if weights.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
            return Err(Error::ConfigInvalid("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::ConfigInvalid(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        let dim = components[0].0.len();
        let cores: Result<Vec<GaussianCore>> = components
            .into_iter()
            .map(|(m, c)| {
                if m.len() != dim {
                    return Err(Error::ConfigInvalid(
                        "mixture components must share a dimension".into(),
                    ));
                }
                GaussianCore::new(m, c)
            })
            .collect();
        Ok(Target {
            kind: TargetKind::Mixture {
                weights,
                components: cores?,
            },
            dim,
            // with normalised component densities, e^{-V} integrates to 1
            normalising_constant: Some(1.0),
        })
    }

    /// Double well `V(x) = (x₁² - a)²/b + Σ_{i≥2} x_i²/2` with `a, b > 0`.
    pub fn double_well(a: f64, b: f64, dim: usize) -> Result<Target> {
        if !(a > 0.0 && b > 0.0) || dim == 0 {
            return Err(Error::ConfigInvalid(
                "double well requires a > 0, b > 0, dim ≥ 1".into(),
            ));
        }
        Ok(Target {
            kind: TargetKind::DoubleWell { a, b, dim },
            dim,
            normalising_constant: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The stored normalising constant, if the family has a closed form.
    pub fn normalising_constant(&self) -> Option<f64> {
        self.normalising_constant
    }

    /// Potential `V(x)`.
    pub fn potential(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            TargetKind::Gaussian(g) => {
                let xv = DVector::from_column_slice(x);
                g.neg_log_density(&xv) - g.log_norm
            }
            TargetKind::Mixture {
                weights,
                components,
            } => {
                let xv = DVector::from_column_slice(x);
                // V = -log Σ w_i N_i, evaluated in log space for stability
                let logs: Vec<f64> = weights
                    .iter()
                    .zip(components)
                    .map(|(w, c)| w.ln() - c.neg_log_density(&xv))
                    .collect();
                -log_sum_exp(&logs)
            }
            TargetKind::DoubleWell { a, b, .. } => {
                let q = x[0] * x[0] - a;
                q * q / b + 0.5 * x[1..].iter().map(|v| v * v).sum::<f64>()
            }
        }
    }

    /// Score `∇V(x)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            TargetKind::Gaussian(g) => {
                let xv = DVector::from_column_slice(x);
                g.grad_neg_log_density(&xv).iter().copied().collect()
            }
            TargetKind::Mixture {
                weights,
                components,
            } => {
                let xv = DVector::from_column_slice(x);
                let logs: Vec<f64> = weights
                    .iter()
                    .zip(components)
                    .map(|(w, c)| w.ln() - c.neg_log_density(&xv))
                    .collect();
                let lse = log_sum_exp(&logs);
                let mut grad = DVector::zeros(self.dim);
                for (log_wn, c) in logs.iter().zip(components) {
                    let resp = (log_wn - lse).exp();
                    grad += c.grad_neg_log_density(&xv) * resp;
                }
                grad.iter().copied().collect()
            }
            TargetKind::DoubleWell { a, b, .. } => {
                let mut g = vec![0.0; self.dim];
                g[0] = 4.0 * x[0] * (x[0] * x[0] - a) / b;
                for (gi, xi) in g.iter_mut().zip(x.iter()).skip(1) {
                    *gi = *xi;
                }
                g
            }
        }
    }

    /// Ground-truth mean and covariance.
    ///
    /// Exact for gaussian and mixture; composite-Simpson quadrature on
    /// `[-10, 10]` with 4096 intervals for the 1-D double well.
    pub fn reference_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match &self.kind {
            TargetKind::Gaussian(g) => Ok((g.mean.clone(), g.cov.clone())),
            TargetKind::Mixture {
                weights,
                components,
            } => {
                let mut mean = DVector::zeros(self.dim);
                for (w, c) in weights.iter().zip(components) {
                    mean += &c.mean * *w;
                }
                let mut cov = DMatrix::zeros(self.dim, self.dim);
                for (w, c) in weights.iter().zip(components) {
                    let delta = &c.mean - &mean;
                    cov += (&c.cov + &delta * delta.transpose()) * *w;
                }
                Ok((mean, cov))
            }
            TargetKind::DoubleWell { dim, .. } => {
                if *dim != 1 {
                    return Err(Error::Unsupported(
                        "double-well reference moments are quadrature-based and 1-D only".into(),
                    ));
                }
                let (lo, hi, n) = (-10.0, 10.0, 4096usize);
                let h = (hi - lo) / n as f64;
                let simpson_w = |i: usize| -> f64 {
                    if i == 0 || i == n {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    }
                };
                let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
                for i in 0..=n {
                    let x = lo + i as f64 * h;
                    let w = simpson_w(i) * h / 3.0;
                    let dens = (-self.potential(&[x])).exp();
                    z += w * dens;
                    m1 += w * x * dens;
                    m2 += w * x * x * dens;
                }
                let mean = m1 / z;
                let var = m2 / z - mean * mean;
                Ok((
                    DVector::from_element(1, mean),
                    DMatrix::from_element(1, 1, var),
                ))
            }
        }
    }
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn fd_score(t: &Target, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|a| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[a] += h;
                xm[a] -= h;
                (t.potential(&xp) - t.potential(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn test_targets() -> Vec<Target> {
        vec![
            Target::standard_gaussian(2),
            Target::gaussian(
                DVector::from_vec(vec![1.0, -0.5]),
                DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.7]),
            )
            .unwrap(),
            Target::mixture(
                vec![0.5, 0.5],
                vec![
                    (
                        DVector::from_vec(vec![-1.0]),
                        DMatrix::from_element(1, 1, 0.25),
                    ),
                    (
                        DVector::from_vec(vec![1.0]),
                        DMatrix::from_element(1, 1, 0.25),
                    ),
                ],
            )
            .unwrap(),
            Target::double_well(1.0, 1.0, 3).unwrap(),
        ]
    }

    #[test]
    fn potential_pinned_values() {
        let g2 = Target::standard_gaussian(2);
        assert_abs_diff_eq!(g2.potential(&[0.0, 0.0]), 0.0, epsilon = 1e-14);
        let g1 = Target::standard_gaussian(1);
        assert_abs_diff_eq!(g1.potential(&[2.0]), 2.0, epsilon = 1e-14);
        let dw = Target::double_well(1.0, 1.0, 1).unwrap();
        assert_abs_diff_eq!(dw.potential(&[1.0]), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn score_pinned_values() {
        let g = Target::standard_gaussian(2);
        assert_eq!(g.score(&[0.7, -0.2]), vec![0.7, -0.2]);

        let t = Target::gaussian(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]),
        )
        .unwrap();
        // Σ⁻¹ (x - m)
        let s = t.score(&[2.0, 1.0]);
        assert_relative_eq!(s[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(s[1], -2.0, max_relative = 1e-12);
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for t in test_targets() {
            for _ in 0..20 {
                let x: Vec<f64> =
                    (0..t.dim()).map(|_| rng.random_range(-2.5..2.5)).collect();
                let analytic = t.score(&x);
                let numeric = fd_score(&t, &x, 1e-5);
                for (a, n) in analytic.iter().zip(&numeric) {
                    assert_relative_eq!(a, n, max_relative = 1e-6, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn gaussian_translation_equivariance() {
        let base = Target::standard_gaussian(2);
        let shifted = Target::gaussian(
            DVector::from_vec(vec![0.8, -1.1]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let x = [0.3, 0.4];
        let xs = [0.3 + 0.8, 0.4 - 1.1];
        for (a, b) in base.score(&x).iter().zip(shifted.score(&xs)) {
            assert_abs_diff_eq!(a, &b, epsilon = 1e-15);
        }
    }

    #[test]
    fn reference_moments_exact_families() {
        let (m, c) = Target::standard_gaussian(2).reference_moments().unwrap();
        assert_eq!(m, DVector::zeros(2));
        assert_eq!(c, DMatrix::identity(2, 2));

        let (m, _) = Target::gaussian(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap()
        .reference_moments()
        .unwrap();
        assert_eq!(m, DVector::from_vec(vec![1.0, 2.0]));

        // ½N(-1,0.25) + ½N(1,0.25): mean 0, variance 1.25
        let mix = &test_targets()[2];
        let (m, c) = mix.reference_moments().unwrap();
        assert_abs_diff_eq!(m[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(c[(0, 0)], 1.25, max_relative = 1e-14);
    }

    #[test]
    fn double_well_moments_by_quadrature() {
        let dw = Target::double_well(1.0, 1.0, 1).unwrap();
        let (m, c) = dw.reference_moments().unwrap();
        // symmetric double well: mean 0; variance cross-checked against an
        // independent trapezoid quadrature at finer resolution
        assert_abs_diff_eq!(m[0], 0.0, epsilon = 1e-10);
        let n = 20000;
        let h = 20.0 / n as f64;
        let (mut z, mut m2) = (0.0, 0.0);
        for i in 0..=n {
            let x = -10.0 + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 } * h;
            let dens = (-dw.potential(&[x])).exp();
            z += w * dens;
            m2 += w * x * x * dens;
        }
        assert_relative_eq!(c[(0, 0)], m2 / z, max_relative = 1e-8);

        assert!(Target::double_well(1.0, 1.0, 2)
            .unwrap()
            .reference_moments()
            .is_err());
    }

    #[test]
    fn mixture_is_stable_in_far_tails() {
        let mix = &test_targets()[2];
        let v = mix.potential(&[40.0]);
        assert!(v.is_finite());
        let s = mix.score(&[40.0]);
        assert!(s[0].is_finite());
        // far in the right tail the nearest component dominates
        assert_relative_eq!(s[0], (40.0 - 1.0) / 0.25, max_relative = 1e-6);
    }

    #[test]
    fn target_json_round_trip() {
        let json = r#"{"family":"gaussian","mean":[0,0],"cov":[[1,0],[0,1]]}"#;
        let t: Target = serde_json::from_str(json).unwrap();
        assert_eq!(t.dim(), 2);
        let back = serde_json::to_string(&t).unwrap();
        let t2: Target = serde_json::from_str(&back).unwrap();
        assert_eq!(t2.potential(&[0.5, 0.5]), t.potential(&[0.5, 0.5]));

        assert!(serde_json::from_str::<Target>(
            r#"{"family":"gaussian","mean":[0],"cov":[[1]],"oops":1}"#
        )
        .is_err());

        let dw: Target =
            serde_json::from_str(r#"{"family":"double-well","a":1.0,"b":2.0,"dim":1}"#).unwrap();
        assert_eq!(dw.dim(), 1);
    }
}
