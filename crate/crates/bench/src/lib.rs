//! Fixtures shared by the benchmarks.

use nuisance_core::data::{self, Dataset};
use nuisance_core::expreg::{self, CovariateLaw, ExpRegData, ExpRegParams};
use nuisance_core::garch::{self, GarchParams, ReturnSeries};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn expreg_samples(n: usize, m: usize, seed: u64) -> (ExpRegData, ExpRegData) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ExpRegParams::default();
    let a = expreg::simulate(&p, n, &CovariateLaw::StandardNormal, &mut rng);
    let b = expreg::simulate(&p, m, &CovariateLaw::StandardNormal, &mut rng);
    (a, b)
}

pub fn garch_series(t_len: usize, seed: u64) -> ReturnSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    garch::simulate(&GarchParams::default(), t_len, garch::DEFAULT_BURN_IN, &mut rng).expect("default parameters are valid")
}

pub fn blobs(n: usize, dim: usize, seed: u64) -> Dataset {
    data::gaussian_blobs(n, dim, 10, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid blob settings")
}
