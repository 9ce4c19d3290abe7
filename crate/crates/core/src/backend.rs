//! A common interface over likelihood models, and an adjustment engine that
//! needs nothing beyond that interface.

use rand_chacha::ChaCha8Rng;

use crate::adjust::{self, CovariancePair};
use crate::error::{Error, Result};
use crate::expreg::{self, CovariateLaw, ExpRegData, ExpRegParams};
use crate::garch::{self, GarchParams, ReturnSeries};
use crate::numcore::{self, DiffPlan, Mat, Vector};

/// What every model family provides. Parameters are passed as the full
/// vector; the backend fixes which coordinates are primary and nuisance.
pub trait ModelBackend {
    type Data;

    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn primary_idx(&self) -> &'static [usize];
    fn nuisance_idx(&self) -> &'static [usize];

    fn loglik(&self, params: &[f64], data: &Self::Data) -> Result<f64>;
    /// Gradient of [`ModelBackend::loglik`] over the full vector.
    fn score(&self, params: &[f64], data: &Self::Data) -> Result<Vector>;
    fn simulate(&self, params: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Result<Self::Data>;
    /// Maximizes over the primary block with the nuisance block held at its
    /// value in `start`; returns the full vector.
    fn fit_primary(&self, data: &Self::Data, start: &[f64]) -> Result<Vec<f64>>;
    fn sample_size(&self, data: &Self::Data) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExpRegBackend {
    pub law: CovariateLaw,
}

impl ModelBackend for ExpRegBackend {
    type Data = ExpRegData;

    fn name(&self) -> &'static str {
        "expreg"
    }
    fn dim(&self) -> usize {
        3
    }
    fn primary_idx(&self) -> &'static [usize] {
        &expreg::PRIMARY_IDX
    }
    fn nuisance_idx(&self) -> &'static [usize] {
        &expreg::NUISANCE_IDX
    }
    fn loglik(&self, params: &[f64], data: &ExpRegData) -> Result<f64> {
        Ok(expreg::loglik(&ExpRegParams::from_slice(params)?, data))
    }
    fn score(&self, params: &[f64], data: &ExpRegData) -> Result<Vector> {
        Ok(expreg::score(&ExpRegParams::from_slice(params)?, data, expreg::Block::All))
    }
    fn simulate(&self, params: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Result<ExpRegData> {
        Ok(expreg::simulate(&ExpRegParams::from_slice(params)?, size, &self.law, rng))
    }
    fn fit_primary(&self, data: &ExpRegData, start: &[f64]) -> Result<Vec<f64>> {
        let (p, _) = expreg::fit(data, &expreg::PRIMARY_IDX, &ExpRegParams::from_slice(start)?)?;
        Ok(p.to_array().to_vec())
    }
    fn sample_size(&self, data: &ExpRegData) -> usize {
        data.len()
    }
}

/// Parameter order `(ω, a, b)`; `ω` is the nuisance.
#[derive(Debug, Clone, Copy)]
pub struct GarchBackend {
    pub burn_in: usize,
}

impl Default for GarchBackend {
    fn default() -> Self {
        Self {
            burn_in: garch::DEFAULT_BURN_IN,
        }
    }
}

fn garch_params(p: &[f64]) -> Result<GarchParams> {
    match *p {
        [omega, a, b] => Ok(GarchParams::new(omega, a, b)),
        _ => Err(Error::DimensionMismatch {
            context: "GARCH parameter vector",
            expected: 3,
            found: p.len(),
        }),
    }
}

impl ModelBackend for GarchBackend {
    type Data = ReturnSeries;

    fn name(&self) -> &'static str {
        "garch"
    }
    fn dim(&self) -> usize {
        3
    }
    fn primary_idx(&self) -> &'static [usize] {
        &[1, 2]
    }
    fn nuisance_idx(&self) -> &'static [usize] {
        &[0]
    }
    fn loglik(&self, params: &[f64], data: &ReturnSeries) -> Result<f64> {
        Ok(-garch::neg_loglik(data, &garch_params(params)?)?)
    }
    fn score(&self, params: &[f64], data: &ReturnSeries) -> Result<Vector> {
        garch::score_full(data, &garch_params(params)?)
    }
    fn simulate(&self, params: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Result<ReturnSeries> {
        garch::simulate(&garch_params(params)?, size, self.burn_in, rng)
    }
    fn fit_primary(&self, data: &ReturnSeries, start: &[f64]) -> Result<Vec<f64>> {
        let fit = garch::fit_primary(data, garch_params(start)?.omega)?;
        Ok(vec![fit.omega, fit.a_hat, fit.b_hat])
    }
    fn sample_size(&self, data: &ReturnSeries) -> usize {
        data.len()
    }
}

/// Adjusted covariance at `params` using only the backend interface:
/// `V_θ/n` is the inverse observed information of the primary block and
/// `D₁` comes from a central-difference cross-Jacobian of the score.
pub fn adjusted_from_backend<B: ModelBackend>(
    backend: &B,
    data: &B::Data,
    params: &[f64],
    v_alpha_over_m: &Mat,
) -> Result<CovariancePair> {
    let (pi, ni) = (backend.primary_idx(), backend.nuisance_idx());
    if params.len() != backend.dim() {
        return Err(Error::DimensionMismatch {
            context: "adjusted_from_backend",
            expected: backend.dim(),
            found: params.len(),
        });
    }
    let score_block = |cols: &[usize], rows: &'static [usize]| {
        let x: Vec<f64> = cols.iter().map(|&j| params[j]).collect();
        numcore::finite_diff_jacobian(
            |z: &[f64]| {
                let mut q = params.to_vec();
                for (k, &j) in cols.iter().enumerate() {
                    q[j] = z[k];
                }
                match backend.score(&q, data) {
                    Ok(g) => Vector::from_iterator(rows.len(), rows.iter().map(|&r| g[r])),
                    Err(_) => Vector::from_element(rows.len(), f64::NAN),
                }
            },
            &x,
            &DiffPlan::default(),
        )
    };
    let h_tt = numcore::symmetrize(&score_block(pi, pi)?);
    let h_ta = score_block(ni, pi)?;
    let v_theta_over_n = numcore::inverse_spd(&(-&h_tt))?.x;
    let d1 = adjust::sensitivity_d1(&h_tt, &h_ta)?;
    Ok(adjust::adjusted_covariance(&v_theta_over_n, &d1, v_alpha_over_m)?
        .with_sizes(backend.sample_size(data), 0))
}

/// Largest relative discrepancy between the analytic score and a central
/// difference of the log-likelihood, over all coordinates.
pub fn score_fd_discrepancy<B: ModelBackend>(backend: &B, data: &B::Data, params: &[f64]) -> Result<f64> {
    let analytic = backend.score(params, data)?;
    let fd = numcore::finite_diff_gradient(
        |x: &[f64]| backend.loglik(x, data).unwrap_or(f64::NAN),
        params,
        &DiffPlan::default(),
    )?;
    Ok((&analytic - &fd).amax() / analytic.amax().max(1e-300))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn expreg_generic_engine_matches_analytic() {
        let b = ExpRegBackend::default();
        let truth = ExpRegParams::default().to_array();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = b.simulate(&truth, 2000, &mut rng).unwrap();
        let fit = b.fit_primary(&data, &truth).unwrap();
        let pair = adjusted_from_backend(&b, &data, &fit, &Mat::from_element(1, 1, 0.01)).unwrap();
        let p = ExpRegParams::from_slice(&fit).unwrap();
        let h = expreg::hessian(&p, &data);
        let d1 = adjust::sensitivity_d1(
            &adjust::submatrix(&h, &expreg::PRIMARY_IDX, &expreg::PRIMARY_IDX),
            &adjust::submatrix(&h, &expreg::PRIMARY_IDX, &expreg::NUISANCE_IDX),
        )
        .unwrap();
        assert!((&pair.d1.d1 - &d1.d1).amax() < 1e-5 * d1.d1.amax());
    }

    #[test]
    fn garch_score_matches_fd() {
        let b = GarchBackend::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = b.simulate(&[0.1, 0.05, 0.9], 500, &mut rng).unwrap();
        assert!(score_fd_discrepancy(&b, &data, &[0.12, 0.07, 0.85]).unwrap() < 1e-5);
    }
}
