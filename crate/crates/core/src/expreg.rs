//! Exponential regression with a scalar nuisance coefficient.
//!
//! `yᵢ ~ Exp(λᵢ)` with `ln λᵢ = b0 + b1·x1ᵢ + b2·x2ᵢ`. The primary block is
//! `θ = (b0, b2)` and the nuisance is `α = b1`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::adjust::{self, CovariancePair, SensitivityMatrix};
use crate::error::{Error, Result};
use crate::numcore::{self, Mat, Vector};

/// Coordinates of θ inside `(b0, b1, b2)`.
pub const PRIMARY_IDX: [usize; 2] = [0, 2];
/// Coordinate of α inside `(b0, b1, b2)`.
pub const NUISANCE_IDX: [usize; 1] = [1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpRegParams {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
}

impl ExpRegParams {
    pub const fn new(b0: f64, b1: f64, b2: f64) -> Self {
        Self { b0, b1, b2 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.b0, self.b1, self.b2]
    }

    pub fn from_slice(b: &[f64]) -> Result<Self> {
        match *b {
            [b0, b1, b2] if b.iter().all(|v| v.is_finite()) => Ok(Self { b0, b1, b2 }),
            [_, _, _] => Err(Error::InvalidParams("non-finite coefficient".into())),
            _ => Err(Error::DimensionMismatch {
                context: "ExpRegParams::from_slice",
                expected: 3,
                found: b.len(),
            }),
        }
    }

    pub fn theta(self) -> [f64; 2] {
        [self.b0, self.b2]
    }
}

impl Default for ExpRegParams {
    /// Moderate rates with both covariates informative.
    fn default() -> Self {
        Self::new(0.5, -0.3, 0.8)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpRegData {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub y: Vec<f64>,
}

impl ExpRegData {
    pub fn new(x1: Vec<f64>, x2: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x1.len() != y.len() || x2.len() != y.len() {
            return Err(Error::DimensionMismatch {
                context: "ExpRegData columns",
                expected: y.len(),
                found: if x1.len() != y.len() { x1.len() } else { x2.len() },
            });
        }
        if let Some(bad) = y.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidData(format!("response must be positive and finite, got {bad}")));
        }
        if x1.iter().chain(&x2).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite covariate".into()));
        }
        Ok(Self { x1, x2, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &ExpRegData) -> ExpRegData {
        let cat = |a: &[f64], b: &[f64]| a.iter().chain(b).copied().collect();
        ExpRegData {
            x1: cat(&self.x1, &other.x1),
            x2: cat(&self.x2, &other.x2),
            y: cat(&self.y, &other.y),
        }
    }

    fn row(&self, i: usize) -> [f64; 3] {
        [1.0, self.x1[i], self.x2[i]]
    }
}

/// Distribution of the two covariates (drawn independently).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CovariateLaw {
    #[default]
    StandardNormal,
    Uniform { low: f64, high: f64 },
    /// Every covariate is zero, so only `b0` is identified.
    Zero,
}

impl CovariateLaw {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            CovariateLaw::StandardNormal => StandardNormal.sample(rng),
            CovariateLaw::Uniform { low, high } => Uniform::new(low, high)
                .map(|u| u.sample(rng))
                .unwrap_or(low),
            CovariateLaw::Zero => 0.0,
        }
    }
}

/// Draws covariates from `law` and responses by inverse CDF, `y = -ln(U)/λ`.
pub fn simulate<R: Rng + ?Sized>(params: &ExpRegParams, n: usize, law: &CovariateLaw, rng: &mut R) -> ExpRegData {
    let mut data = ExpRegData {
        x1: Vec::with_capacity(n),
        x2: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x1 = law.draw(rng);
        let x2 = law.draw(rng);
        // 1 - U lies in (0, 1], so the log is finite.
        let u = 1.0 - rng.random::<f64>();
        let lambda = (params.b0 + params.b1 * x1 + params.b2 * x2).exp();
        data.x1.push(x1);
        data.x2.push(x2);
        data.y.push(-u.ln() / lambda);
    }
    data
}

fn eta(b: &[f64; 3], row: &[f64; 3]) -> f64 {
    b[0] * row[0] + b[1] * row[1] + b[2] * row[2]
}

/// `Σ (ln λᵢ − λᵢ yᵢ)`.
pub fn loglik(params: &ExpRegParams, data: &ExpRegData) -> f64 {
    let b = params.to_array();
    (0..data.len())
        .map(|i| {
            let e = eta(&b, &data.row(i));
            e - e.exp() * data.y[i]
        })
        .sum()
}

/// Which coordinates of a gradient or information matrix to return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Block {
    Primary,
    Nuisance,
    All,
}

impl Block {
    pub fn indices(self) -> &'static [usize] {
        match self {
            Block::Primary => &PRIMARY_IDX,
            Block::Nuisance => &NUISANCE_IDX,
            Block::All => &[0, 1, 2],
        }
    }
}

/// `∂logL/∂bⱼ = Σ xⱼᵢ (1 − λᵢ yᵢ)`.
pub fn score(params: &ExpRegParams, data: &ExpRegData, which: Block) -> Vector {
    let b = params.to_array();
    let mut full = [0.0; 3];
    for i in 0..data.len() {
        let row = data.row(i);
        let r = 1.0 - eta(&b, &row).exp() * data.y[i];
        for j in 0..3 {
            full[j] += row[j] * r;
        }
    }
    let idx = which.indices();
    Vector::from_iterator(idx.len(), idx.iter().map(|&j| full[j]))
}

/// One row per observation, three columns `(b0, b1, b2)`.
pub fn per_sample_scores(params: &ExpRegParams, data: &ExpRegData) -> Mat {
    let b = params.to_array();
    Mat::from_fn(data.len(), 3, |i, j| {
        let row = data.row(i);
        row[j] * (1.0 - eta(&b, &row).exp() * data.y[i])
    })
}

/// `∂²logL/∂b∂bᵀ = −Σ xᵢxᵢᵀ λᵢyᵢ`.
pub fn hessian(params: &ExpRegParams, data: &ExpRegData) -> Mat {
    let b = params.to_array();
    let mut h = Mat::zeros(3, 3);
    for i in 0..data.len() {
        let row = data.row(i);
        let w = eta(&b, &row).exp() * data.y[i];
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] -= w * row[r] * row[c];
            }
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: usize,
    pub grad_norm: f64,
}

pub const FIT_TOL: f64 = 1e-8;
pub const FIT_MAX_ITER: usize = 100;

/// Newton ascent on the coordinates in `free` (indices into `(b0,b1,b2)`),
/// holding the rest at their values in `start`. Step-halving guarantees
/// the log-likelihood never decreases.
pub fn fit(data: &ExpRegData, free: &[usize], start: &ExpRegParams) -> Result<(ExpRegParams, FitReport)> {
    if data.is_empty() {
        return Err(Error::InvalidData("cannot fit an empty dataset".into()));
    }
    if free.iter().any(|&j| j > 2) {
        return Err(Error::InvalidParams("free index out of range".into()));
    }
    let mut b = start.to_array();
    if free.is_empty() {
        return Ok((*start, FitReport { iterations: 0, grad_norm: 0.0 }));
    }
    if free.contains(&0) {
        // Profile MLE of the intercept given the others: e^{b0} = n / Σ e^{η₋₀} y.
        let s: f64 = (0..data.len())
            .map(|i| (b[1] * data.x1[i] + b[2] * data.x2[i]).exp() * data.y[i])
            .sum();
        if s.is_finite() && s > 0.0 {
            b[0] = (data.len() as f64 / s).ln();
        }
    }
    let mut current = ExpRegParams::from_slice(&b)?;
    let mut ll = loglik(&current, data);
    let mut grad_norm = f64::INFINITY;
    for it in 0..=FIT_MAX_ITER {
        let g_full = score(&current, data, Block::All);
        let g = Vector::from_iterator(free.len(), free.iter().map(|&j| g_full[j]));
        grad_norm = g.amax();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteEvaluation { coordinate: None });
        }
        if grad_norm < FIT_TOL {
            return Ok((current, FitReport { iterations: it, grad_norm }));
        }
        if it == FIT_MAX_ITER {
            break;
        }
        let h = adjust::submatrix(&hessian(&current, data), free, free);
        let step = numcore::solve_spd(&(-h), &Mat::from_column_slice(free.len(), 1, g.as_slice()))?.x;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = current.to_array();
            for (k, &j) in free.iter().enumerate() {
                trial[j] += t * step[(k, 0)];
            }
            if let Ok(p) = ExpRegParams::from_slice(&trial) {
                let trial_ll = loglik(&p, data);
                // Near the optimum the gain is below rounding in the sum.
                let slack = 64.0 * f64::EPSILON * ll.abs();
                if trial_ll.is_finite() && trial_ll >= ll - slack {
                    current = p;
                    ll = trial_ll;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            // No ascent possible at machine precision; the gradient is as
            // small as this problem allows.
            break;
        }
    }
    Err(Error::NoConvergence {
        iterations: FIT_MAX_ITER,
        grad_norm,
    })
}

/// How per-sample Fisher information is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FimMethod {
    /// Average outer product of per-sample scores.
    #[default]
    OuterProduct,
    /// Negative average analytic Hessian.
    NegHessian,
}

/// Per-sample FIM over `(b0, b1, b2)`.
pub fn fim(params: &ExpRegParams, data: &ExpRegData, method: FimMethod) -> Result<Mat> {
    match method {
        FimMethod::OuterProduct => numcore::fim_from_score_rows(&per_sample_scores(params, data)),
        FimMethod::NegHessian => Ok(numcore::symmetrize(&(-hessian(params, data) / data.len() as f64))),
    }
}

/// The four ways of treating the nuisance coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// α̂ from B plugged into A, covariance ignores α̂'s error.
    PluginUnadjusted,
    /// As above plus the nuisance adjustment.
    PluginAdjusted,
    /// Joint fit of all three coefficients on A alone.
    JointA,
    /// Joint fit on the pooled data A ∪ B.
    JointPooled,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::PluginUnadjusted,
        Scenario::PluginAdjusted,
        Scenario::JointA,
        Scenario::JointPooled,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::PluginUnadjusted => "scenario1_plugin_unadjusted",
            Scenario::PluginAdjusted => "scenario2_plugin_adjusted",
            Scenario::JointA => "scenario3_joint_a",
            Scenario::JointPooled => "scenario4_joint_pooled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEstimate {
    pub scenario: Scenario,
    /// `(b̂0, b̂2)`.
    pub theta_hat: [f64; 2],
    pub cov: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub alpha_hat: f64,
    /// Same order as [`Scenario::ALL`].
    pub estimates: Vec<ScenarioEstimate>,
    /// Scenario 1 and 2 covariances with the sensitivity that links them.
    pub pair: CovariancePair,
}

impl ScenarioSet {
    pub fn get(&self, s: Scenario) -> &ScenarioEstimate {
        &self.estimates[Scenario::ALL.iter().position(|x| *x == s).unwrap_or(0)]
    }
}

fn theta_block_of_inverse(fim: &Mat, n: usize) -> Result<Mat> {
    let inv = numcore::inverse_spd(fim)?.x;
    Ok(adjust::submatrix(&inv, &PRIMARY_IDX, &PRIMARY_IDX) / n as f64)
}

/// Fits all four scenarios on primary data `a` and nuisance data `b`.
pub fn scenario_covariances(a: &ExpRegData, b: &ExpRegData, method: FimMethod) -> Result<ScenarioSet> {
    scenario_covariances_with(a, b, method, None)
}

/// As [`scenario_covariances`], optionally overriding `V_α/m` (used to check
/// that the adjustment vanishes when the nuisance is known exactly).
pub fn scenario_covariances_with(
    a: &ExpRegData,
    b: &ExpRegData,
    method: FimMethod,
    v_alpha_override: Option<f64>,
) -> Result<ScenarioSet> {
    let (n, m) = (a.len(), b.len());
    let zero = ExpRegParams::new(0.0, 0.0, 0.0);

    // α̂ and its marginal variance from the full fit on B.
    let (fit_b, _) = fit(b, &[0, 1, 2], &zero)?;
    let alpha_hat = fit_b.b1;
    let v_alpha_over_m = match v_alpha_override {
        Some(v) => v,
        None => numcore::inverse_spd(&fim(&fit_b, b, method)?)?.x[(1, 1)] / m as f64,
    };

    // Scenarios 1 and 2: θ on A with α fixed at α̂.
    let (fit_1, _) = fit(a, &PRIMARY_IDX, &ExpRegParams::new(0.0, alpha_hat, 0.0))?;
    let fim_1 = adjust::submatrix(&fim(&fit_1, a, method)?, &PRIMARY_IDX, &PRIMARY_IDX);
    let v_theta_over_n = numcore::inverse_spd(&fim_1)?.x / n as f64;
    let (h_tt, h_ta) = {
        let h = hessian(&fit_1, a);
        (
            adjust::submatrix(&h, &PRIMARY_IDX, &PRIMARY_IDX),
            adjust::submatrix(&h, &PRIMARY_IDX, &NUISANCE_IDX),
        )
    };
    let d1: SensitivityMatrix = adjust::sensitivity_d1(&h_tt, &h_ta)?;
    let pair = adjust::adjusted_covariance(&v_theta_over_n, &d1, &Mat::from_element(1, 1, v_alpha_over_m))?
        .with_sizes(n, m);

    // Scenario 3: joint fit on A.
    let (fit_3, _) = fit(a, &[0, 1, 2], &zero)?;
    let cov_3 = theta_block_of_inverse(&fim(&fit_3, a, method)?, n)?;

    // Scenario 4: joint fit on A ∪ B.
    let pooled = a.concat(b);
    let (fit_4, _) = fit(&pooled, &[0, 1, 2], &fit_3)?;
    let cov_4 = theta_block_of_inverse(&fim(&fit_4, &pooled, method)?, n + m)?;

    let estimates = vec![
        ScenarioEstimate {
            scenario: Scenario::PluginUnadjusted,
            theta_hat: fit_1.theta(),
            cov: pair.unadjusted.clone(),
        },
        ScenarioEstimate {
            scenario: Scenario::PluginAdjusted,
            theta_hat: fit_1.theta(),
            cov: pair.adjusted.clone(),
        },
        ScenarioEstimate {
            scenario: Scenario::JointA,
            theta_hat: fit_3.theta(),
            cov: cov_3,
        },
        ScenarioEstimate {
            scenario: Scenario::JointPooled,
            theta_hat: fit_4.theta(),
            cov: cov_4,
        },
    ];
    Ok(ScenarioSet {
        alpha_hat,
        estimates,
        pair,
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
    fn simulate_is_deterministic() {
        let p = ExpRegParams::default();
        let law = CovariateLaw::default();
        assert_eq!(simulate(&p, 50, &law, &mut rng(3)), simulate(&p, 50, &law, &mut rng(3)));
    }

    #[test]
    fn simulated_means_match_rates() {
        let d = simulate(&ExpRegParams::new(0.0, 0.0, 0.0), 100_000, &CovariateLaw::default(), &mut rng(1));
        let mean = d.y.iter().sum::<f64>() / d.len() as f64;
        assert!((0.99..=1.01).contains(&mean), "{mean}");

        let d = simulate(&ExpRegParams::new(2f64.ln(), 0.0, 0.0), 100_000, &CovariateLaw::default(), &mut rng(2));
        let mean = d.y.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
    }

    #[test]
    fn loglik_small_cases() {
        let d = ExpRegData::new(vec![0.0], vec![0.0], vec![1.0]).unwrap();
        assert_eq!(loglik(&ExpRegParams::new(0.0, 0.0, 0.0), &d), -1.0);
        assert_eq!(loglik(&ExpRegParams::default(), &ExpRegData::default()), 0.0);
    }

    #[test]
    fn loglik_matches_density_product() {
        let p = ExpRegParams::new(0.2, -0.7, 0.4);
        let d = simulate(&p, 30, &CovariateLaw::default(), &mut rng(9));
        let direct: f64 = (0..d.len())
            .map(|i| {
                let lambda = (0.2 - 0.7 * d.x1[i] + 0.4 * d.x2[i]).exp();
                (lambda * (-lambda * d.y[i]).exp()).ln()
            })
            .sum();
        assert!((loglik(&p, &d) - direct).abs() < 1e-10 * direct.abs());
    }

    #[test]
    fn score_vanishes_when_lambda_y_is_one() {
        let p = ExpRegParams::new(0.3, 0.5, -0.2);
        let x1: Vec<f64> = vec![0.1, -1.0, 2.0];
        let x2: Vec<f64> = vec![0.7, 0.0, -0.4];
        let y = (0..3).map(|i| 1.0 / (0.3 + 0.5 * x1[i] - 0.2 * x2[i]).exp()).collect();
        let d = ExpRegData::new(x1, x2, y).unwrap();
        assert!(score(&p, &d, Block::All).amax() < 1e-14);
    }

    #[test]
    fn cross_jacobian_fd_matches_analytic() {
        let p = ExpRegParams::new(0.4, -0.2, 0.6);
        let d = simulate(&p, 200, &CovariateLaw::default(), &mut rng(4));
        let jac = numcore::finite_diff_jacobian(
            |b1: &[f64]| score(&ExpRegParams::new(p.b0, b1[0], p.b2), &d, Block::Primary),
            &[p.b1],
            &numcore::DiffPlan::default(),
        )
        .unwrap();
        let analytic = adjust::submatrix(&hessian(&p, &d), &PRIMARY_IDX, &NUISANCE_IDX);
        for k in 0..2 {
            let rel = (jac[(k, 0)] - analytic[(k, 0)]).abs() / analytic[(k, 0)].abs();
            assert!(rel < 1e-4, "{rel}");
        }
    }

    #[test]
    fn fit_all_fixed_returns_start() {
        let d = simulate(&ExpRegParams::default(), 20, &CovariateLaw::default(), &mut rng(5));
        let start = ExpRegParams::new(1.0, 2.0, 3.0);
        let (p, rep) = fit(&d, &[], &start).unwrap();
        assert_eq!(p, start);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn fit_is_consistent_and_stationary() {
        let truth = ExpRegParams::default();
        let d = simulate(&truth, 100_000, &CovariateLaw::default(), &mut rng(6));
        let (p, rep) = fit(&d, &[0, 1, 2], &ExpRegParams::new(0.0, 0.0, 0.0)).unwrap();
        assert!(rep.grad_norm < FIT_TOL);
        for (est, t) in p.to_array().iter().zip(truth.to_array()) {
            assert!((est - t).abs() < 0.02, "{est} vs {t}");
        }
    }

    #[test]
    fn fit_with_alpha_fixed_is_stationary_in_theta() {
        let d = simulate(&ExpRegParams::default(), 1000, &CovariateLaw::default(), &mut rng(7));
        let (p, rep) = fit(&d, &PRIMARY_IDX, &ExpRegParams::new(0.0, -0.25, 0.0)).unwrap();
        assert_eq!(p.b1, -0.25);
        assert!(score(&p, &d, Block::Primary).amax() < 1e-8);
        assert!(rep.iterations < FIT_MAX_ITER);
    }

    #[test]
    fn fit_rejects_empty() {
        assert!(matches!(
            fit(&ExpRegData::default(), &[0], &ExpRegParams::default()),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn data_validation() {
        assert!(ExpRegData::new(vec![0.0], vec![0.0], vec![-1.0]).is_err());
        assert!(ExpRegData::new(vec![0.0, 1.0], vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn scenario_two_dominates_scenario_one() {
        let truth = ExpRegParams::default();
        let a = simulate(&truth, 1000, &CovariateLaw::default(), &mut rng(10));
        let b = simulate(&truth, 50, &CovariateLaw::default(), &mut rng(11));
        let set = scenario_covariances(&a, &b, FimMethod::OuterProduct).unwrap();
        let diff = set.pair.inflation();
        assert!(numcore::min_eigenvalue(&diff) >= -1e-10 * diff.trace().abs());
        let e1 = adjust::confidence_ellipse([0.0; 2], &set.get(Scenario::PluginUnadjusted).cov, 0.9).unwrap();
        let e2 = adjust::confidence_ellipse([0.0; 2], &set.get(Scenario::PluginAdjusted).cov, 0.9).unwrap();
        assert!(e2.area() > e1.area());
    }

    #[test]
    fn zero_nuisance_variance_collapses_adjustment() {
        let truth = ExpRegParams::default();
        let a = simulate(&truth, 500, &CovariateLaw::default(), &mut rng(12));
        let b = simulate(&truth, 50, &CovariateLaw::default(), &mut rng(13));
        let set = scenario_covariances_with(&a, &b, FimMethod::NegHessian, Some(0.0)).unwrap();
        assert!((&set.pair.adjusted - &set.pair.unadjusted).norm() < 1e-12);
    }
}
