//! Nuisance-parameter adjustment of primary-parameter covariance.
//!
//! Given the conditional covariance `V_θ/n` of the primary estimate, the
//! sensitivity `D₁ = ∂θ̂/∂αᵀ` and the covariance `V_α/m` of the externally
//! supplied nuisance value, the total covariance is
//! `V_θ/n + D₁ (V_α/m) D₁ᵀ`. This module also holds the confidence-region
//! geometry (2-D ellipses and delta-method intervals) built on top of it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{self, Mat, Vector};

/// Split of a full parameter vector into primary (θ) and nuisance (α) blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPartition {
    full: Vec<f64>,
    primary_idx: Vec<usize>,
    nuisance_idx: Vec<usize>,
}

impl ParamPartition {
    pub fn new(full: Vec<f64>, primary_idx: Vec<usize>, nuisance_idx: Vec<usize>) -> Result<Self> {
        let d = full.len();
        let mut seen = vec![false; d];
        for &i in primary_idx.iter().chain(nuisance_idx.iter()) {
            if i >= d {
                return Err(Error::InvalidParams(format!("index {i} out of range for length {d}")));
            }
            if seen[i] {
                return Err(Error::InvalidParams(format!("index {i} listed twice")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParams(
                "primary and nuisance indices must cover the full vector".into(),
            ));
        }
        Ok(Self {
            full,
            primary_idx,
            nuisance_idx,
        })
    }

    pub fn full(&self) -> &[f64] {
        &self.full
    }

    pub fn primary_idx(&self) -> &[usize] {
        &self.primary_idx
    }

    pub fn nuisance_idx(&self) -> &[usize] {
        &self.nuisance_idx
    }

    pub fn primary(&self) -> Vector {
        Vector::from_iterator(self.primary_idx.len(), self.primary_idx.iter().map(|&i| self.full[i]))
    }

    pub fn nuisance(&self) -> Vector {
        Vector::from_iterator(self.nuisance_idx.len(), self.nuisance_idx.iter().map(|&i| self.full[i]))
    }

    /// Full vector with the primary block replaced.
    pub fn with_primary(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = self.full.clone();
        for (&i, &v) in self.primary_idx.iter().zip(theta) {
            out[i] = v;
        }
        out
    }

    /// Full vector with the nuisance block replaced.
    pub fn with_nuisance(&self, alpha: &[f64]) -> Vec<f64> {
        let mut out = self.full.clone();
        for (&i, &v) in self.nuisance_idx.iter().zip(alpha) {
            out[i] = v;
        }
        out
    }

    /// `(θθ, θα)` blocks of a full square matrix such as a Hessian.
    pub fn blocks(&self, full: &Mat) -> (Mat, Mat) {
        (
            submatrix(full, &self.primary_idx, &self.primary_idx),
            submatrix(full, &self.primary_idx, &self.nuisance_idx),
        )
    }
}

pub fn submatrix(m: &Mat, rows: &[usize], cols: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

/// `D₁ = -(∂s/∂θᵀ)⁻¹ (∂s/∂αᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    pub d1: Mat,
    /// Whether the θ-Hessian needed ridge jitter to be inverted.
    pub regularized: bool,
}

impl SensitivityMatrix {
    pub fn zeros(primary: usize, nuisance: usize) -> Self {
        Self {
            d1: Mat::zeros(primary, nuisance),
            regularized: false,
        }
    }
}

/// Sensitivity of the primary estimate to the nuisance value via the implicit
/// function theorem. `hessian_theta` is `∂s/∂θᵀ` (negative definite at a
/// maximum) and `cross_jacobian` is `∂s/∂αᵀ`.
pub fn sensitivity_d1(hessian_theta: &Mat, cross_jacobian: &Mat) -> Result<SensitivityMatrix> {
    if hessian_theta.nrows() != cross_jacobian.nrows() {
        return Err(Error::DimensionMismatch {
            context: "sensitivity_d1 (cross-Jacobian rows)",
            expected: hessian_theta.nrows(),
            found: cross_jacobian.nrows(),
        });
    }
    // -(H)⁻¹C = (-H)⁻¹C and -H is the positive definite observed information.
    let sol = numcore::solve_spd(&(-hessian_theta), cross_jacobian)?;
    if sol.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix("non-finite sensitivity matrix".into()));
    }
    Ok(SensitivityMatrix {
        d1: sol.x,
        regularized: sol.regularized,
    })
}

/// Unadjusted and nuisance-adjusted covariance of the primary estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariancePair {
    pub unadjusted: Mat,
    pub adjusted: Mat,
    pub d1: SensitivityMatrix,
    pub v_alpha_over_m: Mat,
    pub n: usize,
    pub m: usize,
    /// Set when the added term had to be projected back onto the PSD cone.
    pub psd_clipped: bool,
}

impl CovariancePair {
    pub fn with_sizes(mut self, n: usize, m: usize) -> Self {
        self.n = n;
        self.m = m;
        self
    }

    /// `adjusted - unadjusted`.
    pub fn inflation(&self) -> Mat {
        &self.adjusted - &self.unadjusted
    }

    /// Smallest eigenvalue of the inflation relative to its trace scale; the
    /// adjustment only ever adds uncertainty so this should be ≥ -1e-10.
    pub fn inflation_min_eigenvalue(&self) -> f64 {
        numcore::min_eigenvalue(&self.inflation())
    }

    /// `trace(adjusted)/trace(unadjusted) - 1`.
    pub fn relative_trace_inflation(&self) -> f64 {
        self.adjusted.trace() / self.unadjusted.trace() - 1.0
    }

    /// 2×2 sub-block of both matrices for plotting a pair of parameters.
    pub fn pair_block(&self, i: usize, j: usize) -> (Mat, Mat) {
        let idx = [i, j];
        (
            submatrix(&self.unadjusted, &idx, &idx),
            submatrix(&self.adjusted, &idx, &idx),
        )
    }
}

/// Relative tolerance on the smallest eigenvalue of the inflation term.
pub const PSD_REL_TOL: f64 = 1e-10;

/// `V_θ/n + D₁ (V_α/m) D₁ᵀ`, symmetrized, with a PSD check on the added term.
pub fn adjusted_covariance(
    v_theta_over_n: &Mat,
    d1: &SensitivityMatrix,
    v_alpha_over_m: &Mat,
) -> Result<CovariancePair> {
    let p = v_theta_over_n.nrows();
    if v_theta_over_n.ncols() != p {
        return Err(Error::DimensionMismatch {
            context: "adjusted_covariance (V_theta square)",
            expected: p,
            found: v_theta_over_n.ncols(),
        });
    }
    if d1.d1.nrows() != p {
        return Err(Error::DimensionMismatch {
            context: "adjusted_covariance (D1 rows)",
            expected: p,
            found: d1.d1.nrows(),
        });
    }
    let q = d1.d1.ncols();
    if v_alpha_over_m.nrows() != q || v_alpha_over_m.ncols() != q {
        return Err(Error::DimensionMismatch {
            context: "adjusted_covariance (V_alpha)",
            expected: q,
            found: v_alpha_over_m.nrows(),
        });
    }
    let unadjusted = numcore::symmetrize(v_theta_over_n);
    let mut added = numcore::symmetrize(&(&d1.d1 * v_alpha_over_m * d1.d1.transpose()));
    let mut psd_clipped = false;
    if p > 0 {
        let lambda_min = numcore::min_eigenvalue(&added);
        if lambda_min < -PSD_REL_TOL * added.trace().abs() {
            log::warn!(
                "nuisance inflation term not PSD (min eigenvalue {lambda_min:.3e}); clipping at zero"
            );
            added = numcore::clip_to_psd(&added);
            psd_clipped = true;
        }
    }
    let adjusted = &unadjusted + added;
    Ok(CovariancePair {
        unadjusted,
        adjusted,
        d1: d1.clone(),
        v_alpha_over_m: v_alpha_over_m.clone(),
        n: 0,
        m: 0,
        psd_clipped,
    })
}

/// A 2-D confidence ellipse `{x : (x-c)ᵀ Σ⁻¹ (x-c) ≤ radius2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub center: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub level: f64,
    pub radius2: f64,
}

/// Principal axes of an ellipse: semi-axis lengths and the rotation of the
/// major axis from the x-axis, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseAxes {
    pub semi_major: f64,
    pub semi_minor: f64,
    pub angle: f64,
}

/// Closed-form eigen-decomposition of a symmetric 2×2 matrix; returns
/// `(λ_max, λ_min, angle of the λ_max eigenvector)`.
pub fn eigen_2x2(cov: &[[f64; 2]; 2]) -> (f64, f64, f64) {
    let (a, b, c) = (cov[0][0], 0.5 * (cov[0][1] + cov[1][0]), cov[1][1]);
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    (mean + rad, mean - rad, angle)
}

pub fn confidence_ellipse(center: [f64; 2], cov: &Mat, level: f64) -> Result<EllipseSpec> {
    if cov.shape() != (2, 2) {
        return Err(Error::DimensionMismatch {
            context: "confidence_ellipse (2x2 covariance)",
            expected: 2,
            found: cov.nrows(),
        });
    }
    let cov = [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]];
    ellipse_from_array(center, cov, level)
}

pub fn ellipse_from_array(center: [f64; 2], cov: [[f64; 2]; 2], level: f64) -> Result<EllipseSpec> {
    let radius2 = numcore::chi2_quantile_df2(level)?;
    if cov.iter().flatten().chain(center.iter()).any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix("non-finite ellipse input".into()));
    }
    let sym = 0.5 * (cov[0][1] + cov[1][0]);
    let cov = [[cov[0][0], sym], [sym, cov[1][1]]];
    let (hi, lo, _) = eigen_2x2(&cov);
    if !(hi > 0.0) || lo <= 1e-14 * hi {
        return Err(Error::SingularMatrix(format!(
            "ellipse covariance has rank < 2 (eigenvalues {hi:.3e}, {lo:.3e})"
        )));
    }
    Ok(EllipseSpec {
        center,
        cov,
        level,
        radius2,
    })
}

impl EllipseSpec {
    pub fn mahalanobis2(&self, point: [f64; 2]) -> f64 {
        let [[a, b], [_, c]] = self.cov;
        let det = a * c - b * b;
        let dx = point[0] - self.center[0];
        let dy = point[1] - self.center[1];
        (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    }

    pub fn axes(&self) -> EllipseAxes {
        let (hi, lo, angle) = eigen_2x2(&self.cov);
        EllipseAxes {
            semi_major: (hi * self.radius2).sqrt(),
            semi_minor: (lo.max(0.0) * self.radius2).sqrt(),
            angle,
        }
    }

    pub fn area(&self) -> f64 {
        let [[a, b], [_, c]] = self.cov;
        PI * self.radius2 * (a * c - b * b).max(0.0).sqrt()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        let hx = (self.cov[0][0] * self.radius2).sqrt();
        let hy = (self.cov[1][1] * self.radius2).sqrt();
        (
            [self.center[0] - hx, self.center[1] - hy],
            [self.center[0] + hx, self.center[1] + hy],
        )
    }

    /// Point on the boundary at parameter `t` (radians).
    pub fn boundary_point(&self, t: f64) -> [f64; 2] {
        let ax = self.axes();
        let (s, c) = ax.angle.sin_cos();
        let (u, v) = (ax.semi_major * t.cos(), ax.semi_minor * t.sin());
        [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v]
    }
}

/// Boundary points count as contained.
pub fn ellipse_contains(e: &EllipseSpec, point: [f64; 2]) -> bool {
    e.mahalanobis2(point) <= e.radius2 * (1.0 + 1e-12)
}

/// Which normal quantile multiplies the delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileRule {
    /// `z = Φ⁻¹(1 - (1-level)/2)`, so the interval has the stated coverage.
    #[default]
    MatchLevel,
    /// Always `z_{0.025} = Φ⁻¹(0.975)`, whatever the level.
    FixedUpper025,
}

impl QuantileRule {
    pub fn z(self, level: f64) -> Result<f64> {
        match self {
            QuantileRule::MatchLevel => numcore::two_sided_z(level),
            QuantileRule::FixedUpper025 => {
                if level > 0.0 && level < 1.0 {
                    numcore::normal_quantile(0.975)
                } else {
                    Err(Error::InvalidProbability(level))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub center: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        let slack = 1e-12 * self.half_width().abs().max(other.half_width().abs());
        self.lower <= other.lower + slack && self.upper >= other.upper - slack
    }
}

/// `mu_hat ± z sqrt(gᵀ Σ g)` with `z` matched to `level`.
pub fn delta_method_ci(mu_hat: f64, g: &Vector, sigma: &Mat, level: f64) -> Result<Interval> {
    delta_method_ci_with(mu_hat, g, sigma, level, QuantileRule::MatchLevel)
}

pub fn delta_method_ci_with(
    mu_hat: f64,
    g: &Vector,
    sigma: &Mat,
    level: f64,
    rule: QuantileRule,
) -> Result<Interval> {
    if sigma.nrows() != g.len() || sigma.ncols() != g.len() {
        return Err(Error::DimensionMismatch {
            context: "delta_method_ci",
            expected: g.len(),
            found: sigma.nrows(),
        });
    }
    let z = rule.z(level)?;
    let mut var = (g.transpose() * sigma * g)[0];
    if var < 0.0 {
        if var < -1e-12 {
            return Err(Error::NegativeVariance(var));
        }
        var = 0.0;
    }
    let half = z * var.sqrt();
    Ok(Interval {
        center: mu_hat,
        lower: mu_hat - half,
        upper: mu_hat + half,
    })
}
