//! Zero-mean GARCH(1,1) with the intercept `ω` treated as a nuisance.
//!
//! `y_t = σ_t z_t`, `σ_t² = ω + a y²_{t−1} + b σ²_{t−1}`, started at the
//! unconditional variance `σ₁² = ω/(1−a−b)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjust::{self, CovariancePair, EllipseSpec};
use crate::error::{Error, Result};
use crate::numcore::{self, DiffPlan, Mat, Vector};

/// Margin kept between `a + b` and one.
pub const STATIONARITY_MARGIN: f64 = 1e-4;
/// Distance to the constraint set below which an optimum is flagged.
pub const BOUNDARY_TOL: f64 = 1e-3;
pub const MIN_SERIES_LEN: usize = 20;
pub const DEFAULT_BURN_IN: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub omega: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for GarchParams {
    fn default() -> Self {
        Self {
            omega: 0.1,
            a: 0.05,
            b: 0.90,
        }
    }
}

impl GarchParams {
    pub const fn new(omega: f64, a: f64, b: f64) -> Self {
        Self { omega, a, b }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.omega > 0.0
            && self.a >= 0.0
            && self.b >= 0.0
            && self.a + self.b < 1.0
            && [self.omega, self.a, self.b].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "need omega > 0, a >= 0, b >= 0, a + b < 1; got ({}, {}, {})",
                self.omega, self.a, self.b
            )))
        }
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.a - self.b)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.omega, self.a, self.b]
    }

    fn from_array(p: [f64; 3]) -> Self {
        Self::new(p[0], p[1], p[2])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub y: Vec<f64>,
}

impl ReturnSeries {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("series contains non-finite values".into()));
        }
        Ok(Self { y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_variance(&self) -> f64 {
        let n = self.y.len() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    }

    fn check_estimable(&self) -> Result<()> {
        if self.y.len() < MIN_SERIES_LEN {
            return Err(Error::InvalidData(format!(
                "need at least {MIN_SERIES_LEN} observations, got {}",
                self.y.len()
            )));
        }
        if self.y.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidData("series is identically zero; likelihood is degenerate".into()));
        }
        Ok(())
    }
}

/// Simulates `t_len` observations after discarding `burn_in`.
pub fn simulate<R: Rng + ?Sized>(params: &GarchParams, t_len: usize, burn_in: usize, rng: &mut R) -> Result<ReturnSeries> {
    params.validate()?;
    let total = t_len + burn_in;
    let mut y = Vec::with_capacity(t_len);
    let mut s2 = params.unconditional_variance();
    let mut prev = 0.0;
    for t in 0..total {
        if t > 0 {
            s2 = params.omega + params.a * prev * prev + params.b * s2;
        }
        let z: f64 = StandardNormal.sample(rng);
        prev = s2.sqrt() * z;
        if t >= burn_in {
            y.push(prev);
        }
    }
    Ok(ReturnSeries { y })
}

pub fn sigma2_path(y: &ReturnSeries, params: &GarchParams) -> Result<Vec<f64>> {
    params.validate()?;
    sigma2_unchecked(&y.y, params)
}

/// The recursion without the sign constraints, so finite differences may
/// step just outside the parameter set. Fails only if a variance is not
/// strictly positive.
fn sigma2_unchecked(y: &[f64], p: &GarchParams) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(y.len());
    if y.is_empty() {
        return Ok(out);
    }
    let mut s2 = p.omega / (1.0 - p.a - p.b);
    for t in 0..y.len() {
        if t > 0 {
            s2 = p.omega + p.a * y[t - 1] * y[t - 1] + p.b * s2;
        }
        if !(s2 > 0.0) || !s2.is_finite() {
            return Err(Error::NonFiniteEvaluation { coordinate: None });
        }
        out.push(s2);
    }
    Ok(out)
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `(T/2) ln 2π + ½ Σ (ln σ_t² + y_t²/σ_t²)`.
pub fn neg_loglik(y: &ReturnSeries, params: &GarchParams) -> Result<f64> {
    params.validate()?;
    nll_unchecked(&y.y, params)
}

fn nll_unchecked(y: &[f64], p: &GarchParams) -> Result<f64> {
    let s2 = sigma2_unchecked(y, p)?;
    Ok(y.iter()
        .zip(&s2)
        .map(|(v, s)| HALF_LN_2PI + 0.5 * (s.ln() + v * v / s))
        .sum())
}

/// Log-likelihood gradient over `(ω, a, b)` via the recursive derivatives
/// of `σ_t²`.
fn score_unchecked(y: &[f64], p: &GarchParams) -> Result<[f64; 3]> {
    let s2 = sigma2_unchecked(y, p)?;
    let persistence = 1.0 - p.a - p.b;
    let mut d = [
        1.0 / persistence,
        p.omega / (persistence * persistence),
        p.omega / (persistence * persistence),
    ];
    let mut g = [0.0; 3];
    for t in 0..y.len() {
        if t > 0 {
            let y2 = y[t - 1] * y[t - 1];
            d = [1.0 + p.b * d[0], y2 + p.b * d[1], s2[t - 1] + p.b * d[2]];
        }
        // ∂logL_t/∂σ_t² = −½ (1/σ² − y²/σ⁴).
        let w = -0.5 * (1.0 - y[t] * y[t] / s2[t]) / s2[t];
        for k in 0..3 {
            g[k] += w * d[k];
        }
    }
    Ok(g)
}

/// Log-likelihood gradient over all of `(ω, a, b)`.
pub fn score_full(y: &ReturnSeries, params: &GarchParams) -> Result<Vector> {
    params.validate()?;
    Ok(Vector::from_row_slice(&score_unchecked(&y.y, params)?))
}

/// Log-likelihood gradient over `(a, b)`.
pub fn score_primary(y: &ReturnSeries, params: &GarchParams) -> Result<Vector> {
    let g = score_full(y, params)?;
    Ok(Vector::from_row_slice(&[g[1], g[2]]))
}

/// Observed information of the log-likelihood at `p` over the coordinates
/// `idx` of `(ω, a, b)`: central differences of the analytic score.
fn observed_information(y: &[f64], p: &GarchParams, rows: &[usize], cols: &[usize]) -> Result<Mat> {
    let base = p.to_array();
    let x: Vec<f64> = cols.iter().map(|&j| base[j]).collect();
    let jac = numcore::finite_diff_jacobian(
        |z: &[f64]| {
            let mut q = base;
            for (k, &j) in cols.iter().enumerate() {
                q[j] = z[k];
            }
            match score_unchecked(y, &GarchParams::from_array(q)) {
                Ok(g) => Vector::from_iterator(rows.len(), rows.iter().map(|&r| g[r])),
                Err(_) => Vector::from_element(rows.len(), f64::NAN),
            }
        },
        &x,
        &DiffPlan::default(),
    )?;
    Ok(-jac)
}

/// Interior map `(u, v) ↦ (a, b)` with `a + b = (1−ε)·sigmoid(u)`.
fn ab_from_uv(u: f64, v: f64) -> (f64, f64) {
    let c = 1.0 - STATIONARITY_MARGIN;
    let (s, t) = (sigmoid(u), sigmoid(v));
    (c * s * t, c * s * (1.0 - t))
}

fn uv_from_ab(a: f64, b: f64) -> (f64, f64) {
    let c = 1.0 - STATIONARITY_MARGIN;
    let s = ((a + b) / c).clamp(1e-9, 1.0 - 1e-9);
    let t = (a / (a + b)).clamp(1e-9, 1.0 - 1e-9);
    (logit(s), logit(t))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `∂(a, b)/∂(u, v)` as rows `[da/du, da/dv], [db/du, db/dv]`.
fn ab_jacobian(u: f64, v: f64) -> [[f64; 2]; 2] {
    let c = 1.0 - STATIONARITY_MARGIN;
    let (s, t) = (sigmoid(u), sigmoid(v));
    let ds = s * (1.0 - s);
    let dt = t * (1.0 - t);
    [[c * ds * t, c * s * dt], [c * ds * (1.0 - t), -c * s * dt]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchFitReport {
    pub iterations: usize,
    /// Sup-norm of the log-likelihood gradient over the free natural
    /// parameters at the returned point.
    pub grad_norm: f64,
    /// Optimum lies within `BOUNDARY_TOL` of `a = 0`, `b = 0` or
    /// `a + b = 1 − ε`; information-based inference is unreliable there.
    pub boundary: bool,
    pub neg_loglik: f64,
}

const NEWTON_MAX_ITER: usize = 200;
const NEWTON_TOL: f64 = 1e-7;

/// Damped Newton minimization of `f`, which returns the value, its gradient
/// and a stationarity measure (the gradient in the natural parameters); the
/// Hessian is a central difference of the gradient. Returns
/// `(z, iterations, converged)`.
fn newton_minimize<F>(mut f: F, z0: Vec<f64>) -> Result<(Vec<f64>, usize, bool)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vector, f64)>,
{
    let d = z0.len();
    let mut z = z0;
    let (mut fz, mut g, mut stat) = f(&z)?;
    let plan = DiffPlan::absolute(1e-5);
    for it in 0..NEWTON_MAX_ITER {
        if stat < NEWTON_TOL {
            return Ok((z, it, true));
        }
        let h = numcore::symmetrize(&numcore::finite_diff_jacobian(
            |x: &[f64]| f(x).map(|r| r.1).unwrap_or_else(|_| Vector::from_element(d, f64::NAN)),
            &z,
            &plan,
        )?);
        // Levenberg damping until the model Hessian is safely positive.
        let lambda_min = numcore::min_eigenvalue(&h);
        let scale = h.diagonal().abs().max().max(1e-8);
        let shift = if lambda_min > 1e-6 * scale { 0.0 } else { 1e-6 * scale - lambda_min };
        let hd = &h + Mat::identity(d, d) * shift;
        let step = match numcore::solve_spd(&hd, &Mat::from_column_slice(d, 1, g.as_slice())) {
            Ok(s) => s.x.column(0).into_owned(),
            Err(_) => g.clone(),
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            if let Ok((ft, gt, st)) = f(&trial) {
                let slack = 64.0 * f64::EPSILON * fz.abs();
                if ft.is_finite() && ft <= fz + slack {
                    moved = ft < fz || st < stat;
                    z = trial;
                    fz = ft;
                    g = gt;
                    stat = st;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            return Ok((z, it, stat < NEWTON_TOL));
        }
    }
    Ok((z, NEWTON_MAX_ITER, stat < NEWTON_TOL))
}

fn near_boundary(a: f64, b: f64) -> bool {
    a < BOUNDARY_TOL || b < BOUNDARY_TOL || a + b > 1.0 - STATIONARITY_MARGIN - BOUNDARY_TOL
}

/// Best `(a, b)` on a coarse grid, used as the Newton start.
fn grid_start(y: &[f64], omega: Option<f64>) -> (f64, f64, f64) {
    let var = {
        let n = y.len() as f64;
        y.iter().map(|v| v * v).sum::<f64>() / n
    };
    let mut best = (f64::INFINITY, 0.05, 0.9, omega.unwrap_or(var * 0.05));
    for &a in &[0.02, 0.05, 0.1, 0.2, 0.35] {
        for &b in &[0.0, 0.3, 0.6, 0.8, 0.9, 0.95] {
            if a + b >= 0.99 {
                continue;
            }
            // With ω free, variance targeting picks ω from the sample variance.
            let w = omega.unwrap_or(var * (1.0 - a - b));
            if let Ok(v) = nll_unchecked(y, &GarchParams::new(w, a, b.max(1e-3))) {
                if v < best.0 {
                    best = (v, a, b.max(1e-3), w);
                }
            }
        }
    }
    (best.1, best.2, best.3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimaryFit {
    pub a_hat: f64,
    pub b_hat: f64,
    pub omega: f64,
    /// Inverse observed information of `(a, b)`; already divided by `T`.
    pub v_theta_over_n: Mat,
    pub report: GarchFitReport,
}

/// Maximizes the likelihood over `(a, b)` with `ω` fixed.
pub fn fit_primary(y: &ReturnSeries, omega_hat: f64) -> Result<PrimaryFit> {
    if !(omega_hat > 0.0) || !omega_hat.is_finite() {
        return Err(Error::InvalidParams(format!("omega must be positive, got {omega_hat}")));
    }
    y.check_estimable()?;
    let (a0, b0, _) = grid_start(&y.y, Some(omega_hat));
    let (u0, v0) = uv_from_ab(a0, b0);
    let objective = |z: &[f64]| -> Result<(f64, Vector, f64)> {
        let (a, b) = ab_from_uv(z[0], z[1]);
        let p = GarchParams::new(omega_hat, a, b);
        let f = nll_unchecked(&y.y, &p)?;
        let s = score_unchecked(&y.y, &p)?;
        let j = ab_jacobian(z[0], z[1]);
        // Gradient of the NLL in (u, v).
        let gu = -(s[1] * j[0][0] + s[2] * j[1][0]);
        let gv = -(s[1] * j[0][1] + s[2] * j[1][1]);
        Ok((f, Vector::from_row_slice(&[gu, gv]), s[1].abs().max(s[2].abs())))
    };
    let (z, iterations, converged) = newton_minimize(objective, vec![u0, v0])?;
    let (a_hat, b_hat) = ab_from_uv(z[0], z[1]);
    let p = GarchParams::new(omega_hat, a_hat, b_hat);
    let s = score_unchecked(&y.y, &p)?;
    let boundary = near_boundary(a_hat, b_hat);
    let grad_norm = s[1].abs().max(s[2].abs());
    if !converged && !boundary {
        return Err(Error::NoConvergence { iterations, grad_norm });
    }
    let info = numcore::symmetrize(&observed_information(&y.y, &p, &[1, 2], &[1, 2])?);
    let v_theta_over_n = numcore::inverse_spd(&info)?.x;
    Ok(PrimaryFit {
        a_hat,
        b_hat,
        omega: omega_hat,
        v_theta_over_n,
        report: GarchFitReport {
            iterations,
            grad_norm,
            boundary,
            neg_loglik: nll_unchecked(&y.y, &p)?,
        },
    })
}

/// Cross-check of [`fit_primary`] by exhaustive search over a square grid
/// in `(a, b)` with `a + b < 1`.
pub fn grid_search_primary(y: &ReturnSeries, omega: f64, a_range: (f64, f64), b_range: (f64, f64), steps: usize) -> Result<(f64, f64)> {
    y.check_estimable()?;
    let mut best = (f64::INFINITY, f64::NAN, f64::NAN);
    for i in 0..steps {
        let a = a_range.0 + (a_range.1 - a_range.0) * i as f64 / (steps - 1) as f64;
        for j in 0..steps {
            let b = b_range.0 + (b_range.1 - b_range.0) * j as f64 / (steps - 1) as f64;
            if a < 0.0 || b < 0.0 || a + b >= 1.0 - STATIONARITY_MARGIN {
                continue;
            }
            if let Ok(v) = nll_unchecked(&y.y, &GarchParams::new(omega, a, b)) {
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
    }
    if best.0.is_finite() {
        Ok((best.1, best.2))
    } else {
        Err(Error::InvalidData("no feasible grid point".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaFit {
    pub params: GarchParams,
    pub omega_hat: f64,
    /// `1 / I_ωω` with `I` the observed information of the whole series,
    /// i.e. the per-sample ω information inverted and divided by `m`.
    pub v_omega_over_m: f64,
    pub m: usize,
    pub report: GarchFitReport,
}

/// Fits all of `(ω, a, b)` on an independent series and returns the
/// estimate of `ω` with its conditional variance.
pub fn fit_omega(y: &ReturnSeries) -> Result<OmegaFit> {
    y.check_estimable()?;
    let (a0, b0, w0) = grid_start(&y.y, None);
    let (u0, v0) = uv_from_ab(a0, b0);
    let objective = |z: &[f64]| -> Result<(f64, Vector, f64)> {
        let omega = z[0].exp();
        let (a, b) = ab_from_uv(z[1], z[2]);
        let p = GarchParams::new(omega, a, b);
        let f = nll_unchecked(&y.y, &p)?;
        let s = score_unchecked(&y.y, &p)?;
        let j = ab_jacobian(z[1], z[2]);
        let gw = -s[0] * omega;
        let gu = -(s[1] * j[0][0] + s[2] * j[1][0]);
        let gv = -(s[1] * j[0][1] + s[2] * j[1][1]);
        // ω's score is rescaled so its tolerance is relative to ω.
        let stat = (s[0] * omega).abs().max(s[1].abs()).max(s[2].abs());
        Ok((f, Vector::from_row_slice(&[gw, gu, gv]), stat))
    };
    let (z, iterations, converged) = newton_minimize(objective, vec![w0.ln(), u0, v0])?;
    let omega_hat = z[0].exp();
    let (a, b) = ab_from_uv(z[1], z[2]);
    let params = GarchParams::new(omega_hat, a, b);
    let s = score_unchecked(&y.y, &params)?;
    let boundary = near_boundary(a, b);
    let grad_norm = if boundary { s[0].abs() } else { s.iter().fold(0.0f64, |m, v| m.max(v.abs())) };
    if !converged && !boundary {
        return Err(Error::NoConvergence { iterations, grad_norm });
    }
    let info = observed_information(&y.y, &params, &[0], &[0])?[(0, 0)];
    if !(info > 0.0) {
        return Err(Error::SingularMatrix(format!("omega information is not positive ({info:.3e})")));
    }
    Ok(OmegaFit {
        params,
        omega_hat,
        v_omega_over_m: 1.0 / info,
        m: y.len(),
        report: GarchFitReport {
            iterations,
            grad_norm,
            boundary,
            neg_loglik: nll_unchecked(&y.y, &params)?,
        },
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// Use this `ω̂` for the primary fit instead of the nuisance-series estimate.
    pub omega_override: Option<f64>,
    /// Use this `V_ω/m` instead of the nuisance-series estimate.
    pub v_omega_override: Option<f64>,
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub omega_fit: OmegaFit,
    pub omega_used: f64,
    pub primary: PrimaryFit,
    /// `∂s/∂ω` of the `(a, b)` score.
    pub cross_jacobian: Mat,
    pub pair: CovariancePair,
    pub ellipse_unadjusted: EllipseSpec,
    pub ellipse_adjusted: EllipseSpec,
}

impl PipelineResult {
    pub fn area_ratio(&self) -> f64 {
        self.ellipse_adjusted.area() / self.ellipse_unadjusted.area()
    }
}

/// `ω` from the nuisance series, `(a, b)` from the primary series given
/// `ω̂`, then the adjusted covariance and both confidence ellipses.
pub fn adjusted_pipeline(y_primary: &ReturnSeries, y_nuisance: &ReturnSeries, opts: &PipelineOptions) -> Result<PipelineResult> {
    let level = opts.level.unwrap_or(0.9);
    let omega_fit = fit_omega(y_nuisance)?;
    let omega_used = opts.omega_override.unwrap_or(omega_fit.omega_hat);
    let v_omega = opts.v_omega_override.unwrap_or(omega_fit.v_omega_over_m);
    let primary = fit_primary(y_primary, omega_used)?;
    let p = GarchParams::new(omega_used, primary.a_hat, primary.b_hat);

    let cross_jacobian = numcore::finite_diff_jacobian(
        |w: &[f64]| match score_unchecked(&y_primary.y, &GarchParams::new(w[0], p.a, p.b)) {
            Ok(g) => Vector::from_row_slice(&[g[1], g[2]]),
            Err(_) => Vector::from_element(2, f64::NAN),
        },
        &[omega_used],
        &DiffPlan::relative(1e-5),
    )?;
    // ∂s/∂θᵀ is minus the observed information whose inverse is V_θ/n.
    let h_theta = -numcore::inverse_spd(&primary.v_theta_over_n)?.x;
    let d1 = adjust::sensitivity_d1(&h_theta, &cross_jacobian)?;
    let pair = adjust::adjusted_covariance(&primary.v_theta_over_n, &d1, &Mat::from_element(1, 1, v_omega))?
        .with_sizes(y_primary.len(), y_nuisance.len());
    let center = [primary.a_hat, primary.b_hat];
    let ellipse_unadjusted = adjust::confidence_ellipse(center, &pair.unadjusted, level)?;
    let ellipse_adjusted = adjust::confidence_ellipse(center, &pair.adjusted, level)?;
    Ok(PipelineResult {
        omega_fit,
        omega_used,
        primary,
        cross_jacobian,
        pair,
        ellipse_unadjusted,
        ellipse_adjusted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn hand_recursion() {
        let y = ReturnSeries::new(vec![1.0, 2.0, 0.5]).unwrap();
        let s = sigma2_path(&y, &GarchParams::new(1.0, 0.2, 0.3)).unwrap();
        let expected = [2.0, 1.8, 2.34];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn white_noise_path_is_constant() {
        let y = simulate(&GarchParams::new(0.5, 0.0, 0.0), 100, 0, &mut rng(1)).unwrap();
        assert!(sigma2_path(&y, &GarchParams::new(0.5, 0.0, 0.0)).unwrap().iter().all(|s| *s == 0.5));
    }

    #[test]
    fn path_bounded_below_and_monotone_in_omega() {
        let p = GarchParams::default();
        let y = simulate(&p, 300, 50, &mut rng(2)).unwrap();
        let s1 = sigma2_path(&y, &p).unwrap();
        let s2 = sigma2_path(&y, &GarchParams { omega: 0.12, ..p }).unwrap();
        assert!(s1.iter().all(|s| *s >= p.omega));
        assert!(s1.iter().zip(&s2).all(|(a, b)| b > a));
    }

    #[test]
    fn invalid_params_rejected() {
        let y = ReturnSeries::new(vec![1.0; 5]).unwrap();
        for p in [GarchParams::new(0.0, 0.1, 0.1), GarchParams::new(1.0, -0.1, 0.1), GarchParams::new(1.0, 0.5, 0.5)] {
            assert!(matches!(sigma2_path(&y, &p), Err(Error::InvalidParams(_))));
        }
    }

    #[test]
    fn white_noise_nll_is_gaussian() {
        let y = ReturnSeries::new(vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let nll = neg_loglik(&y, &GarchParams::new(1.0, 0.0, 0.0)).unwrap();
        let direct: f64 = y.y.iter().map(|v| 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * v * v).sum();
        assert!((nll - direct).abs() < 1e-12);
    }

    #[test]
    fn nll_scale_equivariance() {
        let y = ReturnSeries::new(vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let c: f64 = 3.7;
        let ys = ReturnSeries::new(y.y.iter().map(|v| v * c.sqrt()).collect()).unwrap();
        let a = neg_loglik(&y, &GarchParams::new(1.0, 0.0, 0.0)).unwrap();
        let b = neg_loglik(&ys, &GarchParams::new(c, 0.0, 0.0)).unwrap();
        assert!((b - a - 0.5 * y.len() as f64 * c.ln()).abs() < 1e-12);
    }

    #[test]
    fn unconditional_variance() {
        let y = simulate(&GarchParams::default(), 100_000, DEFAULT_BURN_IN, &mut rng(3)).unwrap();
        let v = y.sample_variance();
        assert!((v - 2.0).abs() < 0.1, "{v}");
        let w = simulate(&GarchParams::new(0.7, 0.0, 0.0), 100_000, 0, &mut rng(4)).unwrap();
        assert!((w.sample_variance() - 0.7).abs() < 0.021);
    }

    #[test]
    fn score_matches_fd_on_grid() {
        let y = simulate(&GarchParams::default(), 500, 100, &mut rng(5)).unwrap();
        for &a in &[0.03, 0.08, 0.15, 0.25, 0.4] {
            for &b in &[0.1, 0.3, 0.5, 0.55, 0.58] {
                let p = GarchParams::new(0.12, a, b);
                let analytic = score_primary(&y, &p).unwrap();
                let fd = numcore::finite_diff_gradient(
                    |x: &[f64]| -nll_unchecked(&y.y, &GarchParams::new(0.12, x[0], x[1])).unwrap(),
                    &[a, b],
                    &DiffPlan::default(),
                )
                .unwrap();
                let rel = (&analytic - &fd).amax() / analytic.amax();
                assert!(rel < 1e-5, "({a},{b}) rel {rel}");
            }
        }
    }

    #[test]
    fn fit_primary_is_consistent() {
        let truth = GarchParams::default();
        let y = simulate(&truth, 100_000, DEFAULT_BURN_IN, &mut rng(6)).unwrap();
        let fit = fit_primary(&y, truth.omega).unwrap();
        assert!((fit.a_hat - truth.a).abs() < 0.01, "{}", fit.a_hat);
        assert!((fit.b_hat - truth.b).abs() < 0.02, "{}", fit.b_hat);
        assert!(!fit.report.boundary);
        assert!(score_primary(&y, &GarchParams::new(truth.omega, fit.a_hat, fit.b_hat)).unwrap().amax() < 1e-6);
    }

    #[test]
    fn fit_primary_agrees_with_grid() {
        let truth = GarchParams::default();
        let y = simulate(&truth, 2000, DEFAULT_BURN_IN, &mut rng(7)).unwrap();
        let fit = fit_primary(&y, truth.omega).unwrap();
        let (ga, gb) = grid_search_primary(&y, truth.omega, (0.0, 0.2), (0.7, 0.99), 101).unwrap();
        // Grid spacing is 0.002 in a and 0.0029 in b.
        assert!((fit.a_hat - ga).abs() < 0.01 && (fit.b_hat - gb).abs() < 0.01);
    }

    #[test]
    fn zero_series_is_degenerate() {
        let y = ReturnSeries::new(vec![0.0; 100]).unwrap();
        assert!(matches!(fit_primary(&y, 0.1), Err(Error::InvalidData(_))));
        assert!(matches!(fit_omega(&y), Err(Error::InvalidData(_))));
    }

    #[test]
    fn white_noise_omega_fit() {
        let v = 0.8;
        let y = simulate(&GarchParams::new(v, 0.0, 0.0), 4000, 0, &mut rng(8)).unwrap();
        let fit = fit_omega(&y).unwrap();
        assert!((fit.omega_hat - v).abs() < 0.1 * v, "{}", fit.omega_hat);
        assert!(fit.params.a < 0.05 && fit.params.b < 0.2, "{:?}", fit.params);
        let expected = 2.0 * v * v / 4000.0;
        assert!((fit.v_omega_over_m / expected - 1.0).abs() < 0.3, "{} vs {expected}", fit.v_omega_over_m);
    }

    #[test]
    fn pipeline_zero_nuisance_variance() {
        let truth = GarchParams::default();
        let y1 = simulate(&truth, 1000, DEFAULT_BURN_IN, &mut rng(9)).unwrap();
        let y2 = simulate(&truth, 1000, DEFAULT_BURN_IN, &mut rng(10)).unwrap();
        let opts = PipelineOptions {
            omega_override: Some(truth.omega),
            v_omega_override: Some(0.0),
            level: None,
        };
        let r = adjusted_pipeline(&y1, &y2, &opts).unwrap();
        assert_eq!(r.ellipse_adjusted, r.ellipse_unadjusted);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let truth = GarchParams::default();
        let run = || {
            let y1 = simulate(&truth, 1000, DEFAULT_BURN_IN, &mut rng(11)).unwrap();
            let y2 = simulate(&truth, 1000, DEFAULT_BURN_IN, &mut rng(12)).unwrap();
            adjusted_pipeline(&y1, &y2, &PipelineOptions::default()).unwrap()
        };
        assert_eq!(run(), run());
    }
}
