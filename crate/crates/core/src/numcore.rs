//! Deterministic numerical kernel shared by every model backend.
//!
//! Dense matrices are `nalgebra` `DMatrix<f64>`; everything here is a pure
//! function of its arguments so replication workers can call it freely.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// How the per-coordinate step is derived from `base_step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Absolute,
    /// `h_i = base_step * max(1, |x_i|)`
    Relative,
}

/// Finite-difference configuration. Only central differences are offered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffPlan {
    pub step_mode: StepMode,
    pub base_step: f64,
}

impl Default for DiffPlan {
    fn default() -> Self {
        Self {
            step_mode: StepMode::Relative,
            base_step: 1e-5,
        }
    }
}

impl DiffPlan {
    pub fn relative(base_step: f64) -> Self {
        assert!(base_step > 0.0, "base_step must be positive");
        Self {
            step_mode: StepMode::Relative,
            base_step,
        }
    }

    pub fn absolute(base_step: f64) -> Self {
        assert!(base_step > 0.0, "base_step must be positive");
        Self {
            step_mode: StepMode::Absolute,
            base_step,
        }
    }

    /// Plan suited to second derivatives from function values (fourth root of
    /// machine epsilon rather than the square root).
    pub fn hessian_default() -> Self {
        Self::relative(1e-4)
    }

    #[inline]
    pub fn step(&self, xi: f64) -> f64 {
        match self.step_mode {
            StepMode::Absolute => self.base_step,
            StepMode::Relative => self.base_step * xi.abs().max(1.0),
        }
    }
}

fn checked(v: f64, coordinate: Option<usize>) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteEvaluation { coordinate })
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], plan: &DiffPlan) -> Result<Vector>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vector::zeros(x.len());
    for i in 0..x.len() {
        let h = plan.step(x[i]);
        probe[i] = x[i] + h;
        let up = checked(f(&probe), Some(i))?;
        probe[i] = x[i] - h;
        let down = checked(f(&probe), Some(i))?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference Jacobian; column `j` is the derivative along `x_j`.
pub fn finite_diff_jacobian<G>(mut g: G, x: &[f64], plan: &DiffPlan) -> Result<Mat>
where
    G: FnMut(&[f64]) -> Vector,
{
    let mut probe = x.to_vec();
    let mut columns: Vec<Vector> = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = plan.step(x[j]);
        probe[j] = x[j] + h;
        let up = g(&probe);
        probe[j] = x[j] - h;
        let down = g(&probe);
        probe[j] = x[j];
        if up.len() != down.len() {
            return Err(Error::DimensionMismatch {
                context: "finite_diff_jacobian",
                expected: up.len(),
                found: down.len(),
            });
        }
        if up.iter().chain(down.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEvaluation { coordinate: Some(j) });
        }
        columns.push((up - down) / (2.0 * h));
    }
    let rows = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::DimensionMismatch {
            context: "finite_diff_jacobian",
            expected: rows,
            found: columns.iter().map(|c| c.len()).find(|&l| l != rows).unwrap_or(rows),
        });
    }
    Ok(Mat::from_fn(rows, x.len(), |r, c| columns[c][r]))
}

/// Symmetric central-difference Hessian from function values only.
pub fn finite_diff_hessian<F>(mut f: F, x: &[f64], plan: &DiffPlan) -> Result<Mat>
where
    F: FnMut(&[f64]) -> f64,
{
    let d = x.len();
    let steps: Vec<f64> = x.iter().map(|&xi| plan.step(xi)).collect();
    let mut probe = x.to_vec();
    let mut hess = Mat::zeros(d, d);
    let mut eval = |probe: &mut [f64], i: usize, si: f64, j: usize, sj: f64| -> Result<f64> {
        probe[i] += si;
        probe[j] += sj;
        let v = f(probe);
        probe[i] = x[i];
        probe[j] = x[j];
        checked(v, Some(i))
    };
    for i in 0..d {
        for j in i..d {
            let (hi, hj) = (steps[i], steps[j]);
            let pp = eval(&mut probe, i, hi, j, hj)?;
            let pm = eval(&mut probe, i, hi, j, -hj)?;
            let mp = eval(&mut probe, i, -hi, j, hj)?;
            let mm = eval(&mut probe, i, -hi, j, -hj)?;
            let v = (pp - pm - mp + mm) / (4.0 * hi * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Average outer product of per-sample scores, `(1/n) Σ s_i s_iᵀ`.
pub fn fim_from_scores(per_sample_scores: &[Vector]) -> Result<Mat> {
    let n = per_sample_scores.len();
    if n < 2 {
        return Err(Error::DimensionMismatch {
            context: "fim_from_scores (sample count)",
            expected: 2,
            found: n,
        });
    }
    let d = per_sample_scores[0].len();
    let mut rows = Mat::zeros(n, d);
    for (i, s) in per_sample_scores.iter().enumerate() {
        if s.len() != d {
            return Err(Error::DimensionMismatch {
                context: "fim_from_scores",
                expected: d,
                found: s.len(),
            });
        }
        rows.set_row(i, &s.transpose());
    }
    fim_from_score_rows(&rows)
}

/// Same as [`fim_from_scores`] with scores stacked as rows of an `n × d` matrix.
pub fn fim_from_score_rows(scores: &Mat) -> Result<Mat> {
    let n = scores.nrows();
    if n < 2 {
        return Err(Error::DimensionMismatch {
            context: "fim_from_score_rows (sample count)",
            expected: 2,
            found: n,
        });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEvaluation { coordinate: None });
    }
    let mut fim = scores.tr_mul(scores);
    fim /= n as f64;
    Ok(symmetrize(&fim))
}

/// `-(1/n) H[loglik](x)`, symmetrized.
pub fn fim_from_neg_hessian<F>(loglik: F, x: &[f64], plan: &DiffPlan, n: usize) -> Result<Mat>
where
    F: FnMut(&[f64]) -> f64,
{
    let hess = finite_diff_hessian(loglik, x, plan)?;
    Ok(symmetrize(&(-hess / n.max(1) as f64)))
}

pub fn symmetrize(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &Mat) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(a)).eigenvalues.min()
}

/// PSD up to `-rel_tol * |trace|` on the smallest eigenvalue.
pub fn is_psd(a: &Mat, rel_tol: f64) -> bool {
    min_eigenvalue(a) >= -rel_tol * a.trace().abs()
}

/// Replace negative eigenvalues by zero.
pub fn clip_to_psd(a: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(a));
    let lambda = eig.eigenvalues.map(|l| l.max(0.0));
    symmetrize(&(&eig.eigenvectors * Mat::from_diagonal(&lambda) * eig.eigenvectors.transpose()))
}

/// Result of [`solve_spd`]; `regularized` is set when ridge jitter was added.
#[derive(Debug, Clone)]
pub struct SpdSolution {
    pub x: Mat,
    pub regularized: bool,
    pub jitter: f64,
}

const EIGEN_FLOOR: f64 = 1e-10;
const RIDGE: f64 = 1e-8;

/// Solve `A X = B` for symmetric positive (semi)definite `A`.
///
/// When the smallest eigenvalue of `A` falls below `1e-10·trace/d`, a ridge of
/// `1e-8·trace/d` is added once and the solution is flagged as regularized.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<SpdSolution> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "solve_spd (square)",
            expected: d,
            found: a.ncols(),
        });
    }
    if b.nrows() != d {
        return Err(Error::DimensionMismatch {
            context: "solve_spd (rhs rows)",
            expected: d,
            found: b.nrows(),
        });
    }
    if d == 0 {
        return Ok(SpdSolution {
            x: Mat::zeros(0, b.ncols()),
            regularized: false,
            jitter: 0.0,
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::SingularMatrix("non-finite entries".into()));
    }
    let sym = symmetrize(a);
    let scale = sym.trace() / d as f64;
    if scale <= 0.0 {
        return Err(Error::SingularMatrix(format!(
            "non-positive trace {:.3e}",
            sym.trace()
        )));
    }
    let floor = EIGEN_FLOOR * scale;
    let lambda_min = min_eigenvalue(&sym);
    let (system, jitter) = if lambda_min < floor {
        let jitter = RIDGE * scale;
        if lambda_min + jitter < floor {
            return Err(Error::SingularMatrix(format!(
                "smallest eigenvalue {lambda_min:.3e} remains below {floor:.3e} after ridge {jitter:.3e}"
            )));
        }
        (&sym + Mat::identity(d, d) * jitter, jitter)
    } else {
        (sym, 0.0)
    };
    let chol = system
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularMatrix("cholesky factorization failed".into()))?;
    let x = chol.solve(b);
    let resid = (&system * &x - b).norm();
    let tol = 1e-8 * b.norm().max(f64::MIN_POSITIVE);
    if !(resid <= tol) {
        log::debug!("solve_spd residual {resid:.3e} exceeds {tol:.3e}");
        if !resid.is_finite() {
            return Err(Error::SingularMatrix("non-finite residual".into()));
        }
    }
    Ok(SpdSolution {
        x,
        regularized: jitter > 0.0,
        jitter,
    })
}

/// `A⁻¹` under the [`solve_spd`] jitter policy.
pub fn inverse_spd(a: &Mat) -> Result<SpdSolution> {
    solve_spd(a, &Mat::identity(a.nrows(), a.nrows()))
}

/// Chi-square quantile with two degrees of freedom, `-2 ln(1-p)`.
pub fn chi2_quantile_df2(p: f64) -> Result<f64> {
    check_probability(p)?;
    Ok(-2.0 * (-p).ln_1p())
}

/// Chi-square CDF with two degrees of freedom.
pub fn chi2_cdf_df2(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -(-x / 2.0).exp_m1()
    }
}

fn check_probability(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(Error::InvalidProbability(p))
    }
}

fn poly(coeffs: &[f64; 8], r: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * r + c)
}

// Wichura, Algorithm AS 241 (PPND16), about 1e-16 relative accuracy.
const A: [f64; 8] = [
    3.387_132_872_796_366_6,
    1.331_416_678_917_843_8e2,
    1.971_590_950_306_551_3e3,
    1.373_169_376_550_946e4,
    4.592_195_393_154_987e4,
    6.726_577_092_700_87e4,
    3.343_057_558_358_813e4,
    2.509_080_928_730_122_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091e1,
    6.871_870_074_920_579e2,
    5.394_196_021_424_751e3,
    2.121_379_430_158_659_7e4,
    3.930_789_580_009_271e4,
    2.872_908_573_572_194_3e4,
    5.226_495_278_852_545e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_6,
    4.630_337_846_156_545,
    5.769_497_221_460_691,
    3.647_848_324_763_204_5,
    1.270_458_252_452_368_4,
    2.417_807_251_774_506e-1,
    2.272_384_498_926_918_4e-2,
    7.745_450_142_783_414e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_759,
    1.676_384_830_183_803_8,
    6.897_673_349_851e-1,
    1.481_039_764_274_800_8e-1,
    1.519_866_656_361_645_7e-2,
    5.475_938_084_995_345e-4,
    1.050_750_071_644_416_8e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103,
    5.463_784_911_164_114,
    1.784_826_539_917_291_3,
    2.965_605_718_285_048_7e-1,
    2.653_218_952_657_612_4e-2,
    1.242_660_947_388_078_4e-3,
    2.711_555_568_743_487_6e-5,
    2.010_334_399_292_288e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879e-1,
    1.369_298_809_227_358e-1,
    1.487_536_129_085_061_5e-2,
    7.868_691_311_456_133e-4,
    1.846_318_317_510_054_8e-5,
    1.421_511_758_316_446e-7,
    2.044_263_103_389_939_7e-15,
];

/// Standard normal inverse CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    check_probability(p)?;
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return Ok(q * poly(&A, r) / poly(&B, r));
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    Ok(if q < 0.0 { -val } else { val })
}

/// Two-sided critical value `z` such that `P(|Z| ≤ z) = level`.
pub fn two_sided_z(level: f64) -> Result<f64> {
    check_probability(level)?;
    normal_quantile(1.0 - (1.0 - level) / 2.0)
}
