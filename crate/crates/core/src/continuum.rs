//! Nyström/quadrature realisation of the density-level Stein geometry in
//! one dimension: the kernel integral operator, cotangent and tangent
//! norms, KL divergence, the energy-dissipation identity, the pathwise
//! rate functional on density paths, time-reversal and decomposition
//! checks, the Wasserstein sandwich bound, and the Helmholtz projection.
//!
//! Densities live on a uniform grid with composite-Simpson weights. The
//! kernel integral operator `(T φ)(x) = ∫ k(x,y) φ(y) ρ(dy)` becomes the
//! matrix product `K D φ` with `D = diag(ρ_g w_g)`, symmetrised as
//! `S = D^{1/2} K D^{1/2}` for spectral calculus.
//!
//! Tangent norms solve the 1-D continuity equation in flux form: for a
//! perturbation `ξ` with `∫ξ = 0`, the flux `m(x) = -∫_a^x ξ` satisfies
//! `ξ + m' = 0` and `m = ρv`, so
//! `‖ξ‖²_T = ‖v‖²_{H_k} = σᵀ (DKD)⁺ σ` with `σ_g = w_g m_g`. Working with
//! the flux avoids dividing by the density in the tails, which would
//! amplify quadrature noise ahead of the pseudo-inversion.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::Kernel;
use crate::targets::Target;
use crate::{Error, Result};

/// Relative truncation threshold for Nyström pseudo-inversions: the
/// compact operator's spectral tail below `1e-12 · λ_max` is discarded.
pub const NYSTROM_TRUNC: f64 = 1e-12;

/// Default grid: `[-8, 8]` with 513 nodes (Gaussian tails < 1e-14 at the
/// boundary).
pub const DEFAULT_DOMAIN: (f64, f64) = (-8.0, 8.0);
pub const DEFAULT_GRID_SIZE: usize = 513;

// ---------------------------------------------------------------------
// numeric helpers: fourth-order differentiation and cumulative integration
// on uniform grids

/// Fourth-order first derivative on a uniform grid (five-point central
/// stencil, one-sided at the edges).
pub(crate) fn deriv4(h: f64, f: &[f64]) -> Vec<f64> {
    let g = f.len();
    assert!(g >= 5);
    let mut out = vec![0.0; g];
    out[0] = (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / (12.0 * h);
    out[1] = (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]) / (12.0 * h);
    for i in 2..g - 2 {
        out[i] = (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]) / (12.0 * h);
    }
    out[g - 2] =
        (3.0 * f[g - 1] + 10.0 * f[g - 2] - 18.0 * f[g - 3] + 6.0 * f[g - 4] - f[g - 5])
            / (12.0 * h);
    out[g - 1] = (25.0 * f[g - 1] - 48.0 * f[g - 2] + 36.0 * f[g - 3] - 16.0 * f[g - 4]
        + 3.0 * f[g - 5])
        / (12.0 * h);
    out
}

/// Cumulative integral `F(x_i) = ∫_{x_0}^{x_i} f` by the four-point
/// (cubic) interval rule; fourth-order accurate.
pub(crate) fn cumint4(h: f64, f: &[f64]) -> Vec<f64> {
    let g = f.len();
    assert!(g >= 4);
    let mut out = vec![0.0; g];
    for i in 0..g - 1 {
        let inc = if i == 0 {
            h * (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3]) / 24.0
        } else if i == g - 2 {
            h * (f[g - 4] - 5.0 * f[g - 3] + 19.0 * f[g - 2] + 9.0 * f[g - 1]) / 24.0
        } else {
            h * (-f[i - 1] + 13.0 * f[i] + 13.0 * f[i + 1] - f[i + 2]) / 24.0
        };
        out[i + 1] = out[i] + inc;
    }
    out
}

/// Composite Simpson weights on `n` nodes (`n` odd).
fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 3 && n % 2 == 1, "Simpson quadrature needs an odd node count");
    (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

// ---------------------------------------------------------------------
// density grids

/// A strictly positive probability density discretised on a uniform grid
/// with composite-Simpson weights.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    density: Vec<f64>,
    /// `(log ρ)'` at the nodes when known in closed form; numerical
    /// differentiation is the fallback.
    score: Option<Vec<f64>>,
    h: f64,
}

impl DensityGrid {
    /// Build a grid from raw density values; they must be strictly
    /// positive and integrate to 1 within `1e-6`.
    pub fn from_values(lo: f64, hi: f64, density: Vec<f64>) -> Result<Self> {
        let g = density.len();
        if g < 5 || g.is_multiple_of(2) {
            return Err(Error::ConfigInvalid(
                "density grid needs an odd node count ≥ 5".into(),
            ));
        }
        if !(hi.is_finite() && lo.is_finite() && hi > lo) {
            return Err(Error::ConfigInvalid("grid domain is empty".into()));
        }
        if density.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::ConfigInvalid(
                "density must be strictly positive and finite at all nodes".into(),
            ));
        }
        let h = (hi - lo) / (g - 1) as f64;
        let nodes: Vec<f64> = (0..g).map(|i| lo + i as f64 * h).collect();
        let weights = simpson_weights(g, h);
        let grid = DensityGrid {
            nodes,
            weights,
            density,
            score: None,
            h,
        };
        let defect = grid.normalisation_defect();
        if defect > 1e-6 {
            return Err(Error::ConfigInvalid(format!(
                "density normalisation defect {defect:.3e} exceeds 1e-6"
            )));
        }
        Ok(grid)
    }

    /// Evaluate an unnormalised positive function on the grid and
    /// normalise it by quadrature.
    pub fn from_unnormalised(
        lo: f64,
        hi: f64,
        g: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let h = (hi - lo) / (g - 1) as f64;
        let weights = simpson_weights(g, h);
        let raw: Vec<f64> = (0..g).map(|i| f(lo + i as f64 * h)).collect();
        let z: f64 = raw.iter().zip(&weights).map(|(v, w)| v * w).sum();
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::ConfigInvalid("density does not normalise".into()));
        }
        Self::from_values(lo, hi, raw.into_iter().map(|v| (v / z).max(1e-300)).collect())
    }

    /// Gaussian `N(mean, std²)` with its analytic score attached.
    pub fn gaussian(lo: f64, hi: f64, g: usize, mean: f64, std: f64) -> Result<Self> {
        assert!(std > 0.0);
        let norm = 1.0 / (std * (2.0 * std::f64::consts::PI).sqrt());
        let mut grid = Self::from_unnormalised(lo, hi, g, |x| {
            norm * (-(x - mean) * (x - mean) / (2.0 * std * std)).exp()
        })?;
        grid.score = Some(
            grid.nodes
                .iter()
                .map(|&x| -(x - mean) / (std * std))
                .collect(),
        );
        Ok(grid)
    }

    pub fn with_score(mut self, score: Vec<f64>) -> Self {
        assert_eq!(score.len(), self.len());
        self.score = Some(score);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn normalisation_defect(&self) -> f64 {
        let total: f64 = self
            .density
            .iter()
            .zip(&self.weights)
            .map(|(r, w)| r * w)
            .sum();
        (total - 1.0).abs()
    }

    /// `(log ρ)'` at the nodes: analytic when attached, else a
    /// fourth-order numerical derivative of `log ρ`.
    pub fn log_density_deriv(&self) -> Vec<f64> {
        match &self.score {
            Some(s) => s.clone(),
            None => {
                let logs: Vec<f64> = self.density.iter().map(|r| r.ln()).collect();
                deriv4(self.h, &logs)
            }
        }
    }

    /// Quadrature of `f` against the density: `∫ f dρ`.
    pub fn integrate_against(&self, f: &[f64]) -> f64 {
        f.iter()
            .zip(&self.density)
            .zip(&self.weights)
            .map(|((v, r), w)| v * r * w)
            .sum()
    }

    /// Plain quadrature `∫ f dx`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }
}

// ---------------------------------------------------------------------
// the discretised kernel integral operator

/// Nyström discretisation of `T_{k,ρ}` on a grid, with the spectral
/// decomposition of the symmetrised form `S = D^{1/2} K D^{1/2}`.
pub struct DiscretisedOperator {
    /// Raw kernel matrix `K_gh = k(x_g, x_h)`.
    pub matrix: DMatrix<f64>,
    /// `ρ_g w_g` diagonal.
    d: DVector<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

pub(crate) fn kernel_matrix(kernel: &Kernel, nodes: &[f64]) -> DMatrix<f64> {
    let g = nodes.len();
    let rows: Vec<Vec<f64>> = (0..g)
        .into_par_iter()
        .map(|i| {
            (0..g)
                .map(|j| kernel.value_and_b((nodes[i] - nodes[j]).abs()).0)
                .collect()
        })
        .collect();
    let mut k = DMatrix::zeros(g, g);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            k[(i, j)] = v;
        }
    }
    k
}

/// `∂_y k(x_g, x_h)` matrix (one-dimensional grids).
pub(crate) fn kernel_grad_y_matrix(kernel: &Kernel, nodes: &[f64]) -> DMatrix<f64> {
    let g = nodes.len();
    DMatrix::from_fn(g, g, |i, j| {
        let z = nodes[i] - nodes[j];
        let (_, b) = kernel.value_and_b(z.abs());
        b * z
    })
}

impl DiscretisedOperator {
    pub fn new(kernel: &Kernel, grid: &DensityGrid) -> Result<Self> {
        let matrix = kernel_matrix(kernel, grid.nodes());
        let g = grid.len();
        let d = DVector::from_iterator(
            g,
            grid.density().iter().zip(grid.weights()).map(|(r, w)| r * w),
        );
        let d_sqrt = d.map(f64::sqrt);
        let mut s = matrix.clone();
        for i in 0..g {
            for j in 0..g {
                s[(i, j)] *= d_sqrt[i] * d_sqrt[j];
            }
        }
        let (eigenvalues, eigenvectors) = crate::linalg::sym_eigh_desc(&s);
        let lmax = eigenvalues[0];
        if eigenvalues[g - 1] < -1e-10 * lmax {
            return Err(Error::NotPositiveSemidefinite {
                min_eig: eigenvalues[g - 1],
                tol: 1e-10 * lmax,
            });
        }
        Ok(DiscretisedOperator {
            matrix,
            d,
            eigenvalues,
            eigenvectors,
        })
    }

    /// Apply `T_{k,ρ}`: `(Tφ)_g = Σ_h K_gh φ_h ρ_h w_h`.
    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        let g = phi.len();
        let weighted =
            DVector::from_iterator(g, phi.iter().zip(self.d.iter()).map(|(p, d)| p * d));
        (&self.matrix * weighted).iter().copied().collect()
    }

    /// Operator norm estimate: top eigenvalue of the symmetrised form.
    pub fn operator_norm(&self) -> f64 {
        self.eigenvalues[0].max(0.0)
    }

    /// Smallest retained eigenvalue after truncation (positive by
    /// construction, the numerical injectivity check).
    pub fn smallest_retained(&self) -> f64 {
        let cut = NYSTROM_TRUNC * self.operator_norm();
        self.eigenvalues
            .iter()
            .copied()
            .filter(|&l| l > cut)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Nyström RKHS inner product of two functions given by grid values:
    /// `(D^{1/2}f)ᵀ S⁺ (D^{1/2}g)` over the retained spectrum.
    pub fn hk_inner(&self, f: &[f64], g: &[f64]) -> f64 {
        let n = f.len();
        let d_sqrt = self.d.map(f64::sqrt);
        let yf = DVector::from_iterator(n, f.iter().zip(d_sqrt.iter()).map(|(v, s)| v * s));
        let yg = DVector::from_iterator(n, g.iter().zip(d_sqrt.iter()).map(|(v, s)| v * s));
        let cf = self.eigenvectors.transpose() * yf;
        let cg = self.eigenvectors.transpose() * yg;
        let cut = NYSTROM_TRUNC * self.operator_norm();
        cf.iter()
            .zip(cg.iter())
            .zip(self.eigenvalues.iter())
            .map(|((a, b), &l)| if l > cut { a * b / l } else { 0.0 })
            .sum()
    }
}

// ---------------------------------------------------------------------
// cotangent and tangent norms

/// Weighted double quadrature `(mass∘g∘w)ᵀ K (mass∘g∘w)` shared by the
/// cotangent norm and both Stein-Fisher forms; `g` carries the
/// integrand's gradient factor and `mass` the measure's density.
fn weighted_kernel_quadratic(
    kernel: &Kernel,
    grid: &DensityGrid,
    g_values: &[f64],
    mass: &[f64],
) -> f64 {
    let n = grid.len();
    let weighted: Vec<f64> = (0..n)
        .map(|i| g_values[i] * mass[i] * grid.weights()[i])
        .collect();
    let nodes = grid.nodes();
    let partials: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..n {
                let k = kernel.value_and_b((nodes[i] - nodes[j]).abs()).0;
                acc += weighted[i] * k * weighted[j];
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Cotangent norm `‖φ‖²_{T*_ρ} = ∬ φ'(x) k(x,y) φ'(y) ρ(dx) ρ(dy)` from
/// grid values of `φ` (differentiated with a fourth-order stencil).
pub fn cotangent_norm_squared(kernel: &Kernel, grid: &DensityGrid, phi_values: &[f64]) -> f64 {
    let grad = deriv4(grid.spacing(), phi_values);
    cotangent_norm_squared_grad(kernel, grid, &grad)
}

/// Cotangent norm from gradient values directly.
pub fn cotangent_norm_squared_grad(
    kernel: &Kernel,
    grid: &DensityGrid,
    grad_values: &[f64],
) -> f64 {
    weighted_kernel_quadratic(kernel, grid, grad_values, grid.density())
}

/// Both quadrature forms of the Stein-Fisher information.
#[derive(Debug, Clone, Copy)]
pub struct SteinFisher {
    /// `∬ ∇(dρ/dπ)(x) k(x,y) ∇(dρ/dπ)(y) π(dx) π(dy)` — needs the
    /// normalised target density.
    pub form_a: f64,
    /// `∬ ∇log(dρ/dπ)(x) k(x,y) ∇log(dρ/dπ)(y) ρ(dx) ρ(dy)` — free of
    /// the normalisation constant.
    pub form_b: f64,
}

impl SteinFisher {
    /// The normalisation-free value used by downstream identities.
    pub fn value(&self) -> f64 {
        self.form_b
    }

    pub fn relative_gap(&self) -> f64 {
        (self.form_a - self.form_b).abs() / self.form_b.abs().max(1e-30)
    }
}

/// Stein-Fisher information of `grid`'s density relative to the target,
/// by both routes of its defining identity.
pub fn stein_fisher_continuum(
    kernel: &Kernel,
    target: &Target,
    grid: &DensityGrid,
) -> Result<SteinFisher> {
    if target.dim() != 1 {
        return Err(Error::Unsupported(
            "continuum diagnostics are one-dimensional".into(),
        ));
    }
    let n = grid.len();
    let nodes = grid.nodes();
    let v_vals: Vec<f64> = nodes.iter().map(|&x| target.potential(&[x])).collect();
    let v_grad: Vec<f64> = nodes.iter().map(|&x| target.score(&[x])[0]).collect();
    let score_rho = grid.log_density_deriv();
    // ∇ log (dρ/dπ) = (log ρ)' + V'
    let log_ratio_grad: Vec<f64> = score_rho.iter().zip(&v_grad).map(|(s, v)| s + v).collect();

    // form B: weights ρ(dx) ρ(dy)
    let form_b = weighted_kernel_quadratic(kernel, grid, &log_ratio_grad, grid.density());

    // form A: π normalised on the grid (closed-form Z when available)
    let z = match target.normalising_constant() {
        Some(z) => z,
        None => grid.integrate(&v_vals.iter().map(|v| (-v).exp()).collect::<Vec<f64>>()),
    };
    let pi: Vec<f64> = v_vals.iter().map(|v| (-v).exp() / z).collect();
    // ∇(dρ/dπ) = (ρ/π)·[(log ρ)' + V']
    let ratio_grad: Vec<f64> = (0..n)
        .map(|i| grid.density()[i] / pi[i] * log_ratio_grad[i])
        .collect();
    let form_a = weighted_kernel_quadratic(kernel, grid, &ratio_grad, &pi);

    Ok(SteinFisher { form_a, form_b })
}

/// Tangent norm of a density perturbation `ξ` with `∫ξ = 0`:
/// solve the 1-D continuity equation in flux form and evaluate the
/// Nyström quadratic form `σᵀ (DKD)⁺ σ`, `σ = w ∘ m`, `m = -∫_a^x ξ`.
pub fn tangent_norm_continuum(kernel: &Kernel, grid: &DensityGrid, xi: &[f64]) -> Result<f64> {
    Ok(flux_norms(kernel, grid, &[xi])?[0])
}

/// Tangent norms of several perturbations over one spectral
/// decomposition (the expensive part is per-grid, not per-field).
pub fn flux_norms(kernel: &Kernel, grid: &DensityGrid, xis: &[&[f64]]) -> Result<Vec<f64>> {
    let n = grid.len();
    for xi in xis {
        let defect = grid.integrate(xi).abs();
        if defect > 1e-6 {
            return Err(Error::MassDefect(defect));
        }
    }
    let k = kernel_matrix(kernel, grid.nodes());
    let d = DVector::from_iterator(
        n,
        grid.density().iter().zip(grid.weights()).map(|(r, w)| r * w),
    );
    let mut dkd = k;
    for i in 0..n {
        for j in 0..n {
            dkd[(i, j)] *= d[i] * d[j];
        }
    }
    let (vals, vecs) = crate::linalg::sym_eigh_desc(&dkd);
    let cut = NYSTROM_TRUNC * vals[0].max(0.0);
    xis.iter()
        .map(|xi| {
            let m = cumint4(grid.spacing(), xi);
            let sigma = DVector::from_iterator(
                n,
                m.iter().zip(grid.weights()).map(|(mv, w)| -mv * w),
            );
            let coeffs = vecs.transpose() * sigma;
            let mut acc = 0.0;
            for (c, &l) in coeffs.iter().zip(vals.iter()) {
                if l > cut {
                    acc += c * c / l;
                }
            }
            Ok(acc)
        })
        .collect()
}

/// KL divergence `KL(ρ|π) = ∫ V dρ + ∫ log ρ dρ + log Z` by quadrature;
/// the closed-form `Z` is used when the target provides one.
pub fn kl_divergence(grid: &DensityGrid, target: &Target) -> Result<f64> {
    if target.dim() != 1 {
        return Err(Error::Unsupported(
            "continuum diagnostics are one-dimensional".into(),
        ));
    }
    let v_vals: Vec<f64> = grid.nodes().iter().map(|&x| target.potential(&[x])).collect();
    let z = match target.normalising_constant() {
        Some(z) => z,
        None => grid.integrate(&v_vals.iter().map(|v| (-v).exp()).collect::<Vec<f64>>()),
    };
    let log_rho: Vec<f64> = grid.density().iter().map(|r| r.ln()).collect();
    let potential_term = grid.integrate_against(&v_vals);
    let entropy_term = grid.integrate_against(&log_rho);
    Ok(potential_term + entropy_term + z.ln())
}

/// The Stein-PDE right-hand side `(ρ F)'` at a grid, with
/// `F(x) = ∫ [k(x,y) V'(y) - ∂_y k(x,y)] ρ(dy)` (the negated mean-field
/// drift). Both `F` and its spatial derivative come from analytic kernel
/// derivatives; `ρ' = ρ · (log ρ)'`.
pub fn stein_rhs(kernel: &Kernel, target: &Target, grid: &DensityGrid) -> Result<Vec<f64>> {
    if target.dim() != 1 {
        return Err(Error::Unsupported(
            "continuum diagnostics are one-dimensional".into(),
        ));
    }
    let n = grid.len();
    let nodes = grid.nodes();
    let v_grad: Vec<f64> = nodes.iter().map(|&x| target.score(&[x])[0]).collect();
    let k = kernel_matrix(kernel, nodes);
    let kdy = kernel_grad_y_matrix(kernel, nodes);
    let mass: Vec<f64> = (0..n)
        .map(|i| grid.density()[i] * grid.weights()[i])
        .collect();

    let mut field = vec![0.0; n]; // F
    let mut field_dx = vec![0.0; n]; // F'
    for i in 0..n {
        let mut f = 0.0;
        let mut fx = 0.0;
        let xi = [nodes[i]];
        for j in 0..n {
            f += (k[(i, j)] * v_grad[j] - kdy[(i, j)]) * mass[j];
            // ∂_x k = -∂_y k for radial kernels; ∂_x ∂_y k is the 1-D
            // cross derivative
            let dxk = -kdy[(i, j)];
            let dxdyk = kernel.cross_trace(&xi, &[nodes[j]])?;
            fx += (dxk * v_grad[j] - dxdyk) * mass[j];
        }
        field[i] = f;
        field_dx[i] = fx;
    }
    let score = grid.log_density_deriv();
    Ok((0..n)
        .map(|i| grid.density()[i] * (score[i] * field[i] + field_dx[i]))
        .collect())
}

// ---------------------------------------------------------------------
// Gaussian paths and path functionals

/// A time-dependent 1-D Gaussian density `ρ_t = N(m_t, s_t²)` with
/// polynomial schedules, the analytically tractable test path for the
/// density-level identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPath {
    /// Polynomial coefficients of `m_t`, lowest order first.
    pub mean_poly: Vec<f64>,
    /// Polynomial coefficients of `s_t`, lowest order first.
    pub std_poly: Vec<f64>,
    pub horizon: f64,
}

fn poly_eval(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

fn poly_deriv_eval(coeffs: &[f64], t: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, c)| acc * t + k as f64 * c)
}

impl GaussianPath {
    pub fn new(mean_poly: Vec<f64>, std_poly: Vec<f64>, horizon: f64) -> Result<Self> {
        let path = GaussianPath {
            mean_poly,
            std_poly,
            horizon,
        };
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::ConfigInvalid("path horizon must be positive".into()));
        }
        for i in 0..=200 {
            let t = horizon * i as f64 / 200.0;
            if path.std(t) <= 0.0 {
                return Err(Error::ConfigInvalid(format!(
                    "path standard deviation is not positive at t = {t}"
                )));
            }
        }
        Ok(path)
    }

    pub fn mean(&self, t: f64) -> f64 {
        poly_eval(&self.mean_poly, t)
    }

    pub fn std(&self, t: f64) -> f64 {
        poly_eval(&self.std_poly, t)
    }

    pub fn mean_dot(&self, t: f64) -> f64 {
        poly_deriv_eval(&self.mean_poly, t)
    }

    pub fn std_dot(&self, t: f64) -> f64 {
        poly_deriv_eval(&self.std_poly, t)
    }

    /// The density at time `t` on the given grid.
    pub fn grid_at(&self, t: f64, lo: f64, hi: f64, g: usize) -> Result<DensityGrid> {
        DensityGrid::gaussian(lo, hi, g, self.mean(t), self.std(t))
    }

    /// Analytic `∂_t ρ_t` at the grid nodes.
    pub fn dt_density(&self, t: f64, grid: &DensityGrid) -> Vec<f64> {
        let (m, s) = (self.mean(t), self.std(t));
        let (md, sd) = (self.mean_dot(t), self.std_dot(t));
        grid.nodes()
            .iter()
            .zip(grid.density())
            .map(|(&x, &rho)| {
                let z = (x - m) / s;
                rho * (md * z / s + sd * (z * z - 1.0) / s)
            })
            .collect()
    }

    /// Time reversal `t ↦ ρ_{T-t}` as another polynomial path.
    pub fn reversed(&self) -> GaussianPath {
        GaussianPath {
            mean_poly: poly_compose_reverse(&self.mean_poly, self.horizon),
            std_poly: poly_compose_reverse(&self.std_poly, self.horizon),
            horizon: self.horizon,
        }
    }
}

/// Coefficients of `q(t) = p(T - t)`.
fn poly_compose_reverse(coeffs: &[f64], t_end: f64) -> Vec<f64> {
    let n = coeffs.len();
    let mut out = vec![0.0; n];
    for (k, &a) in coeffs.iter().enumerate() {
        // (T - t)^k = Σ_j C(k,j) T^(k-j) (-t)^j
        let mut binom = 1.0f64;
        for j in 0..=k {
            out[j] += a * binom * t_end.powi((k - j) as i32) * (-1.0f64).powi(j as i32);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
    }
    out
}

/// Integrated functionals of a density path, all evaluated on one time
/// quadrature (composite Simpson over `timesteps` intervals).
#[derive(Debug, Clone)]
pub struct PathFunctionals {
    pub kl_start: f64,
    pub kl_end: f64,
    /// `∫ ‖∂_t ρ‖²_T dt`
    pub tangent_sq_integral: f64,
    /// `∫ I_Stein(ρ_t) dt` (form B)
    pub fisher_integral: f64,
    /// `¼ ∫ ‖∂_t ρ - stein_rhs(ρ)‖²_T dt`, the pathwise rate functional
    pub rate: f64,
    /// Per-node samples `(t, kl, fisher, tangent², running EDE)`.
    pub samples: Vec<PathSample>,
}

#[derive(Debug, Clone, Copy)]
pub struct PathSample {
    pub t: f64,
    pub kl: f64,
    pub fisher: f64,
    pub tangent_sq: f64,
    pub ede_running: f64,
}

impl PathFunctionals {
    /// Left-hand side of the energy-dissipation identity:
    /// `ΔKL + ∫ (½‖∂ρ‖² + ½ I_Stein) dt`. Nonnegative; zero exactly on
    /// Stein-PDE solutions.
    pub fn ede_residual(&self) -> f64 {
        self.kl_end - self.kl_start
            + 0.5 * self.tangent_sq_integral
            + 0.5 * self.fisher_integral
    }

    /// Right-hand side of the rate decomposition
    /// `½ΔKL + ¼∫‖∂ρ‖² + ¼∫ I_Stein`.
    pub fn decomposition_rhs(&self) -> f64 {
        0.5 * (self.kl_end - self.kl_start)
            + 0.25 * self.tangent_sq_integral
            + 0.25 * self.fisher_integral
    }
}

/// Left-hand side of the energy-dissipation identity along a Gaussian
/// path, evaluated on the default grid: `ΔKL + ∫(½‖∂ρ‖² + ½ I_Stein) dt`.
/// Nonnegative up to quadrature error; zero exactly on Stein-PDE
/// solutions.
pub fn ede_residual(
    kernel: &Kernel,
    target: &Target,
    path: &GaussianPath,
    timesteps: usize,
) -> Result<f64> {
    let f = path_functionals(
        kernel,
        target,
        path,
        timesteps,
        DEFAULT_DOMAIN.0,
        DEFAULT_DOMAIN.1,
        DEFAULT_GRID_SIZE,
    )?;
    Ok(f.ede_residual())
}

/// Evaluate KL endpoints, tangent/Fisher integrals and the rate
/// functional along a Gaussian path against `target` (1-D).
pub fn path_functionals(
    kernel: &Kernel,
    target: &Target,
    path: &GaussianPath,
    timesteps: usize,
    lo: f64,
    hi: f64,
    g: usize,
) -> Result<PathFunctionals> {
    if timesteps < 2 || !timesteps.is_multiple_of(2) {
        return Err(Error::ConfigInvalid(
            "path quadrature needs an even number of timesteps ≥ 2".into(),
        ));
    }
    let dt = path.horizon / timesteps as f64;
    let t_weights = simpson_weights(timesteps + 1, dt);

    let mut tangent_sq_integral = 0.0;
    let mut fisher_integral = 0.0;
    let mut rate = 0.0;
    let mut samples = Vec::with_capacity(timesteps + 1);
    let mut kl_start = 0.0;
    let mut kl_end = 0.0;
    let mut ede_running = 0.0;
    let mut prev_integrand = 0.0;
    let mut kl0 = 0.0;

    for (j, w) in t_weights.iter().enumerate() {
        let t = dt * j as f64;
        let grid = path.grid_at(t, lo, hi, g)?;
        let kl = kl_divergence(&grid, target)?;
        let fisher = stein_fisher_continuum(kernel, target, &grid)?.value();
        let dt_rho = path.dt_density(t, &grid);
        let rhs = stein_rhs(kernel, target, &grid)?;
        let residual: Vec<f64> = dt_rho.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        let norms = flux_norms(kernel, &grid, &[&dt_rho, &residual])?;
        let tangent_sq = norms[0];
        let residual_sq = norms[1];

        tangent_sq_integral += w * tangent_sq;
        fisher_integral += w * fisher;
        rate += w * 0.25 * residual_sq;

        let integrand = 0.5 * tangent_sq + 0.5 * fisher;
        if j == 0 {
            kl_start = kl;
            kl0 = kl;
        } else {
            // trapezoid for the running display series
            ede_running += 0.5 * dt * (prev_integrand + integrand);
        }
        prev_integrand = integrand;
        if j == timesteps {
            kl_end = kl;
        }
        samples.push(PathSample {
            t,
            kl,
            fisher,
            tangent_sq,
            ede_running: kl - kl0 + ede_running,
        });
    }

    Ok(PathFunctionals {
        kl_start,
        kl_end,
        tangent_sq_integral,
        fisher_integral,
        rate,
        samples,
    })
}

// ---------------------------------------------------------------------
// sandwich bound and Helmholtz projection

/// Wasserstein comparison: `‖φ‖²_{T*} ≤ ‖T_{k,ρ}‖ · ‖φ'‖²_{L²(ρ)}`.
/// Returns `(lhs, rhs_bound)`.
pub fn sandwich_check(
    kernel: &Kernel,
    grid: &DensityGrid,
    phi_values: &[f64],
) -> Result<(f64, f64)> {
    let op = DiscretisedOperator::new(kernel, grid)?;
    let grad = deriv4(grid.spacing(), phi_values);
    let lhs = cotangent_norm_squared_grad(kernel, grid, &grad);
    let grad_l2: f64 =
        grid.integrate_against(&grad.iter().map(|g| g * g).collect::<Vec<f64>>());
    Ok((lhs, op.operator_norm() * grad_l2))
}

/// Result of the RKHS Helmholtz projection.
pub struct HelmholtzParts {
    /// Component in the closure of `T_{k,ρ} ∇ C_c^∞`, given by values.
    pub gradient_part: Vec<f64>,
    /// The RKHS-orthogonal remainder.
    pub divfree_part: Vec<f64>,
    /// Number of basis modes dropped by the conditioning cutoff.
    pub truncated_modes: usize,
}

/// Project a field (given by grid values) onto the span of
/// `T_{k,ρ} ∇φ_b` for a fixed dictionary of Gaussian bumps `φ_b`,
/// RKHS-orthogonally. In one dimension decaying divergence-free fields
/// vanish, so for in-range fields the remainder is pure discretisation
/// residue.
pub fn helmholtz_project(
    kernel: &Kernel,
    grid: &DensityGrid,
    field_values: &[f64],
) -> Result<HelmholtzParts> {
    let n = grid.len();
    let nodes = grid.nodes();
    // bump dictionary spanning the density's bulk
    let n_bumps = 41;
    let (blo, bhi) = (-5.0f64, 5.0f64);
    let width = 0.55;
    let centers: Vec<f64> = (0..n_bumps)
        .map(|b| blo + (bhi - blo) * b as f64 / (n_bumps - 1) as f64)
        .collect();
    // φ_b'(x) for each bump
    let bump_grads: Vec<Vec<f64>> = centers
        .iter()
        .map(|&c| {
            nodes
                .iter()
                .map(|&x| {
                    -(x - c) / (width * width)
                        * (-(x - c) * (x - c) / (2.0 * width * width)).exp()
                })
                .collect()
        })
        .collect();

    let d: Vec<f64> = (0..n)
        .map(|i| grid.density()[i] * grid.weights()[i])
        .collect();
    let k = kernel_matrix(kernel, nodes);

    // gram_ab = ⟨T∇φ_a, T∇φ_b⟩_{H_k} = (Dφ_a')ᵀ K (Dφ_b')
    let weighted: Vec<DVector<f64>> = bump_grads
        .iter()
        .map(|g| DVector::from_iterator(n, g.iter().zip(&d).map(|(v, dd)| v * dd)))
        .collect();
    let images: Vec<DVector<f64>> = weighted.iter().map(|w| &k * w).collect();
    let mut gram = DMatrix::zeros(n_bumps, n_bumps);
    for a in 0..n_bumps {
        for b in 0..n_bumps {
            gram[(a, b)] = weighted[a].dot(&images[b]);
        }
    }
    // rhs_b = ⟨T∇φ_b, field⟩_{H_k} = ⟨∇φ_b, field⟩_{L²(ρ)}
    let rhs = DVector::from_iterator(
        n_bumps,
        bump_grads.iter().map(|g| {
            g.iter()
                .zip(field_values)
                .zip(&d)
                .map(|((a, b), dd)| a * b * dd)
                .sum::<f64>()
        }),
    );

    let (vals, vecs) = crate::linalg::sym_eigh_desc(&gram);
    let lmax = vals[0].max(0.0);
    let cut = lmax / 1e12;
    let retained: Vec<usize> = (0..n_bumps).filter(|&i| vals[i] > cut).collect();
    if retained.is_empty() {
        return Err(Error::IllConditioned(f64::INFINITY));
    }
    let truncated_modes = n_bumps - retained.len();
    let coeffs_spec = vecs.transpose() * rhs;
    let mut coeffs: DVector<f64> = DVector::zeros(n_bumps);
    for &i in &retained {
        let c = coeffs_spec[i] / vals[i];
        for b in 0..n_bumps {
            coeffs[b] += c * vecs[(b, i)];
        }
    }

    let mut gradient_part = vec![0.0; n];
    for b in 0..n_bumps {
        for i in 0..n {
            gradient_part[i] += coeffs[b] * images[b][i];
        }
    }
    let divfree_part: Vec<f64> = field_values
        .iter()
        .zip(&gradient_part)
        .map(|(f, g)| f - g)
        .collect();
    Ok(HelmholtzParts {
        gradient_part,
        divfree_part,
        truncated_modes,
    })
}

/// `L²(ρ)` norm of a field given by grid values.
pub fn l2_rho_norm(grid: &DensityGrid, f: &[f64]) -> f64 {
    grid.integrate_against(&f.iter().map(|v| v * v).collect::<Vec<f64>>())
        .sqrt()
}

// ---------------------------------------------------------------------
// method-of-lines Stein-PDE solver (identity-check apparatus)

/// A recorded state of the method-of-lines solution.
pub struct MolState {
    pub t: f64,
    pub grid: DensityGrid,
    /// The PDE right-hand side at this state (`∂_t ρ`).
    pub dt_density: Vec<f64>,
}

/// Integrate the 1-D Stein PDE `∂_t ρ = (ρ F)'` by the method of lines:
/// fourth-order central differences of the flux on the grid and RK4 in
/// time. Exists to feed the identity checks, not as a production solver.
pub fn solve_stein_pde(
    kernel: &Kernel,
    target: &Target,
    initial: &DensityGrid,
    dt: f64,
    steps: usize,
    record_every: usize,
) -> Result<Vec<MolState>> {
    if target.dim() != 1 {
        return Err(Error::Unsupported(
            "continuum diagnostics are one-dimensional".into(),
        ));
    }
    let n = initial.len();
    let nodes = initial.nodes().to_vec();
    let h = initial.spacing();
    let (lo, hi) = (nodes[0], nodes[n - 1]);
    let v_grad: Vec<f64> = nodes.iter().map(|&x| target.score(&[x])[0]).collect();
    let k = kernel_matrix(kernel, &nodes);
    let kdy = kernel_grad_y_matrix(kernel, &nodes);
    let weights = initial.weights().to_vec();

    let rhs = |rho: &[f64]| -> Vec<f64> {
        // F(x_g) = Σ_h [k V' - ∂_y k] ρ w, flux = ρF, ∂_t ρ = (flux)'
        let mass: Vec<f64> = rho.iter().zip(&weights).map(|(r, w)| r * w).collect();
        let mut flux = vec![0.0; n];
        for i in 0..n {
            let mut f = 0.0;
            for j in 0..n {
                f += (k[(i, j)] * v_grad[j] - kdy[(i, j)]) * mass[j];
            }
            flux[i] = rho[i] * f;
        }
        deriv4(h, &flux)
    };

    let mut rho = initial.density().to_vec();
    let mut out = Vec::new();
    let record = |rho: &[f64], t: f64, out: &mut Vec<MolState>| -> Result<()> {
        let grid = DensityGrid::from_values(lo, hi, rho.to_vec())?;
        let dt_density = rhs(rho);
        out.push(MolState {
            t,
            grid,
            dt_density,
        });
        Ok(())
    };
    record(&rho, 0.0, &mut out)?;

    for step in 0..steps {
        let k1 = rhs(&rho);
        let r2: Vec<f64> = rho.iter().zip(&k1).map(|(r, d)| r + 0.5 * dt * d).collect();
        let k2 = rhs(&r2);
        let r3: Vec<f64> = rho.iter().zip(&k2).map(|(r, d)| r + 0.5 * dt * d).collect();
        let k3 = rhs(&r3);
        let r4: Vec<f64> = rho.iter().zip(&k3).map(|(r, d)| r + dt * d).collect();
        let k4 = rhs(&r4);
        for i in 0..n {
            rho[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            // transport keeps the bulk positive; the far tails may round
            // through zero and are floored
            rho[i] = rho[i].max(1e-280);
        }
        // remove mass drift from the finite-difference flux stencil
        let total: f64 = rho.iter().zip(&weights).map(|(r, w)| r * w).sum();
        if (total - 1.0).abs() > 1e-10 {
            for r in rho.iter_mut() {
                *r /= total;
            }
        }
        if !rho.iter().all(|r| r.is_finite()) {
            return Err(Error::NonFinite(format!(
                "Stein-PDE solution lost finiteness at step {step}"
            )));
        }
        if (step + 1) % record_every == 0 || step + 1 == steps {
            record(&rho, dt * (step + 1) as f64, &mut out)?;
        }
    }
    Ok(out)
}
