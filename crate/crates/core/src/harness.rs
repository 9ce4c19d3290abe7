//! Seeded Monte Carlo experiments and the reports they produce.
//!
//! Replication `k` draws all of its randomness from a ChaCha8 stream that is
//! a pure function of `(master_seed, k)`, and results are collected in
//! replication order, so reports do not depend on scheduling.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{self, EllipseSpec, QuantileRule};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::expreg::{self, CovariateLaw, ExpRegParams, FimMethod, Scenario};
use crate::garch::{self, GarchParams, PipelineOptions};
use crate::mlp::{self, BiasRefitConfig, GradientPath, MlpSpec, TrainConfig};
use crate::numcore::{self, Mat};

pub const SCHEMA_VERSION: &str = "1.0.0";
/// Largest fraction of replications that may fail before a study is void.
pub const MAX_EXCLUSION_RATE: f64 = 0.02;

/// The random stream for replication `stream` of a study seeded with `master_seed`.
pub fn replication_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Runs `f(k)` for every `k` in `0..count` on at most `workers` threads and
/// returns the results in index order.
pub fn run_indexed<T, F>(count: usize, workers: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let run = || (0..count).into_par_iter().map(&f).collect::<Vec<T>>();
    match workers.filter(|w| *w > 0) {
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                log::warn!("could not build a {w}-thread pool ({e}); using the global pool");
                run()
            }
        },
        None => run(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub kind: String,
    pub message: String,
}

impl ReplicationFailure {
    fn new(replication: usize, e: &Error) -> Self {
        Self {
            replication,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

/// `2×2` covariance as nested rows, for reports.
pub fn mat_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Smallest eigenvalue of `adjusted − unadjusted` relative to the trace of
/// `adjusted`; the dominance property holds when this is ≥ `-1e-10`.
pub fn relative_inflation_floor(unadjusted: &Mat, adjusted: &Mat) -> f64 {
    let diff = adjusted - unadjusted;
    let scale = adjusted.trace().abs().max(f64::MIN_POSITIVE);
    numcore::min_eigenvalue(&diff) / scale
}

pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdAudit {
    pub checked: usize,
    pub violations: usize,
    /// Most negative relative eigenvalue seen.
    pub worst: f64,
}

impl PsdAudit {
    fn empty() -> Self {
        Self {
            checked: 0,
            violations: 0,
            worst: f64::INFINITY,
        }
    }

    fn record(&mut self, v: f64) {
        self.checked += 1;
        if v < -PSD_TOLERANCE {
            self.violations += 1;
        }
        self.worst = self.worst.min(v);
    }

    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

// ---------------------------------------------------------------------------
// Exponential regression coverage.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpRegCoverageConfig {
    pub replications: usize,
    pub master_seed: u64,
    pub n: usize,
    pub m: usize,
    pub level: f64,
    pub truth: ExpRegParams,
    pub covariates: CovariateLaw,
    pub fim_method: FimMethod,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for ExpRegCoverageConfig {
    fn default() -> Self {
        Self {
            replications: 500,
            master_seed: 20240101,
            n: 1000,
            m: 50,
            level: 0.9,
            truth: ExpRegParams::default(),
            covariates: CovariateLaw::StandardNormal,
            fim_method: FimMethod::OuterProduct,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCoverage {
    pub scenario: Scenario,
    pub label: String,
    pub contained: usize,
    pub total: usize,
    pub coverage_ratio: f64,
    pub mean_ellipse_area: f64,
}

/// Ellipses of the replication whose plug-in estimate is at the median
/// distance from the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeReplication {
    pub replication: usize,
    pub truth: [f64; 2],
    pub ellipses: Vec<(Scenario, EllipseSpec)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub schema_version: String,
    pub experiment: String,
    pub config: ExpRegCoverageConfig,
    pub scenarios: Vec<ScenarioCoverage>,
    pub completed: usize,
    pub failures: Vec<ReplicationFailure>,
    pub exclusion_rate: f64,
    pub psd: PsdAudit,
    pub representative: Option<RepresentativeReplication>,
    pub wall_time_seconds: f64,
}

impl CoverageSummary {
    pub fn ratio(&self, s: Scenario) -> f64 {
        self.scenarios
            .iter()
            .find(|c| c.scenario == s)
            .map_or(f64::NAN, |c| c.coverage_ratio)
    }
}

struct ExpRegRep {
    contained: [bool; 4],
    areas: [f64; 4],
    ellipses: Vec<(Scenario, EllipseSpec)>,
    distance: f64,
    psd_floor: f64,
}

fn expreg_replication(cfg: &ExpRegCoverageConfig, k: usize) -> Result<ExpRegRep> {
    let mut rng = replication_rng(cfg.master_seed, k as u64);
    let a = expreg::simulate(&cfg.truth, cfg.n, &cfg.covariates, &mut rng);
    let b = expreg::simulate(&cfg.truth, cfg.m, &cfg.covariates, &mut rng);
    let set = expreg::scenario_covariances(&a, &b, cfg.fim_method)?;
    let truth = cfg.truth.theta();
    let mut contained = [false; 4];
    let mut areas = [0.0; 4];
    let mut ellipses = Vec::with_capacity(4);
    for (i, s) in Scenario::ALL.iter().enumerate() {
        let est = set.get(*s);
        let e = adjust::confidence_ellipse(est.theta_hat, &est.cov, cfg.level)?;
        contained[i] = adjust::ellipse_contains(&e, truth);
        areas[i] = e.area();
        ellipses.push((*s, e));
    }
    let t1 = set.get(Scenario::PluginUnadjusted).theta_hat;
    let distance = ((t1[0] - truth[0]).powi(2) + (t1[1] - truth[1]).powi(2)).sqrt();
    Ok(ExpRegRep {
        contained,
        areas,
        ellipses,
        distance,
        psd_floor: relative_inflation_floor(&set.pair.unadjusted, &set.pair.adjusted),
    })
}

pub fn run_expreg_coverage(cfg: &ExpRegCoverageConfig) -> Result<CoverageSummary> {
    validate_common(cfg.replications, cfg.level)?;
    let start = Instant::now();
    let reps = run_indexed(cfg.replications, cfg.workers, |k| expreg_replication(cfg, k));

    let mut contained = [0usize; 4];
    let mut area_sum = [0.0; 4];
    let mut failures = Vec::new();
    let mut psd = PsdAudit::empty();
    let mut ok: Vec<(usize, &ExpRegRep)> = Vec::new();
    for (k, r) in reps.iter().enumerate() {
        match r {
            Ok(rep) => {
                for i in 0..4 {
                    contained[i] += usize::from(rep.contained[i]);
                    area_sum[i] += rep.areas[i];
                }
                psd.record(rep.psd_floor);
                ok.push((k, rep));
            }
            Err(e) => {
                log::warn!("replication {k} failed: {e}");
                failures.push(ReplicationFailure::new(k, e));
            }
        }
    }
    let completed = ok.len();
    let scenarios = Scenario::ALL
        .iter()
        .enumerate()
        .map(|(i, s)| ScenarioCoverage {
            scenario: *s,
            label: s.label().to_string(),
            contained: contained[i],
            total: completed,
            coverage_ratio: ratio(contained[i], completed),
            mean_ellipse_area: if completed > 0 { area_sum[i] / completed as f64 } else { f64::NAN },
        })
        .collect();
    let representative = {
        let mut by_dist: Vec<(usize, &ExpRegRep)> = ok.clone();
        by_dist.sort_by(|a, b| a.1.distance.total_cmp(&b.1.distance).then(a.0.cmp(&b.0)));
        by_dist.get(by_dist.len().saturating_sub(1) / 2).map(|(k, rep)| RepresentativeReplication {
            replication: *k,
            truth: cfg.truth.theta(),
            ellipses: rep.ellipses.clone(),
        })
    };
    Ok(CoverageSummary {
        schema_version: SCHEMA_VERSION.into(),
        experiment: "expreg-coverage".into(),
        config: cfg.clone(),
        scenarios,
        completed,
        exclusion_rate: ratio(failures.len(), cfg.replications),
        failures,
        psd,
        representative,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

fn validate_common(replications: usize, level: f64) -> Result<()> {
    if replications == 0 {
        return Err(Error::InvalidParams("replications must be at least 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidProbability(level));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// GARCH relative-error cases.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GarchCasesConfig {
    pub master_seed: u64,
    pub truth: GarchParams,
    /// Length of the primary series.
    pub t_len: usize,
    /// Length of the independent series used for `ω`.
    pub m_len: usize,
    pub burn_in: usize,
    /// `ω̂ = (1 − r)·ω*` for each `r`. `r = 0` means `ω` is known exactly,
    /// so its variance is taken as zero.
    pub rel_errors: Vec<f64>,
    pub level: f64,
    /// Replications of the coverage mode per case; zero disables it.
    pub coverage_replications: usize,
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for GarchCasesConfig {
    fn default() -> Self {
        Self {
            master_seed: 20240101,
            truth: GarchParams::default(),
            t_len: 1000,
            m_len: 1000,
            burn_in: garch::DEFAULT_BURN_IN,
            rel_errors: vec![0.05, 0.30],
            level: 0.9,
            coverage_replications: 200,
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchCoverage {
    pub replications: usize,
    pub completed: usize,
    pub unadjusted_contained: usize,
    pub adjusted_contained: usize,
    pub unadjusted_ratio: f64,
    pub adjusted_ratio: f64,
    pub median_area_ratio: f64,
    pub boundary_fits: usize,
    pub failures: Vec<ReplicationFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchCase {
    pub rel_error: f64,
    pub omega_used: f64,
    pub omega_hat_nuisance_series: f64,
    pub v_omega_over_m: f64,
    pub theta_hat: [f64; 2],
    pub truth: [f64; 2],
    pub unadjusted_cov: Vec<Vec<f64>>,
    pub adjusted_cov: Vec<Vec<f64>>,
    pub d1: Vec<Vec<f64>>,
    pub ellipse_unadjusted: EllipseSpec,
    pub ellipse_adjusted: EllipseSpec,
    pub area_ratio: f64,
    pub unadjusted_contains_truth: bool,
    pub adjusted_contains_truth: bool,
    pub boundary: bool,
    pub coverage: Option<GarchCoverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchCasesReport {
    pub schema_version: String,
    pub experiment: String,
    pub config: GarchCasesConfig,
    pub cases: Vec<GarchCase>,
    pub psd: PsdAudit,
    pub wall_time_seconds: f64,
}

impl GarchCasesReport {
    pub fn case(&self, r: f64) -> Option<&GarchCase> {
        self.cases.iter().find(|c| (c.rel_error - r).abs() < 1e-12)
    }
}

struct GarchRep {
    result: garch::PipelineResult,
    contains: (bool, bool),
}

fn garch_replication(cfg: &GarchCasesConfig, r: f64, stream: u64) -> Result<GarchRep> {
    let mut rng = replication_rng(cfg.master_seed, stream);
    let y1 = garch::simulate(&cfg.truth, cfg.t_len, cfg.burn_in, &mut rng)?;
    let y2 = garch::simulate(&cfg.truth, cfg.m_len, cfg.burn_in, &mut rng)?;
    let opts = PipelineOptions {
        omega_override: Some((1.0 - r) * cfg.truth.omega),
        v_omega_override: (r == 0.0).then_some(0.0),
        level: Some(cfg.level),
    };
    let result = garch::adjusted_pipeline(&y1, &y2, &opts)?;
    let truth = [cfg.truth.a, cfg.truth.b];
    let contains = (
        adjust::ellipse_contains(&result.ellipse_unadjusted, truth),
        adjust::ellipse_contains(&result.ellipse_adjusted, truth),
    );
    Ok(GarchRep { result, contains })
}

pub fn run_garch_cases(cfg: &GarchCasesConfig) -> Result<GarchCasesReport> {
    validate_common(cfg.coverage_replications.max(1), cfg.level)?;
    if let Some(r) = cfg.rel_errors.iter().find(|r| !(**r >= 0.0 && **r < 1.0)) {
        return Err(Error::InvalidParams(format!("relative error must be in [0, 1), got {r}")));
    }
    cfg.truth.validate()?;
    let start = Instant::now();
    let mut psd = PsdAudit::empty();
    let mut cases = Vec::new();
    for &r in &cfg.rel_errors {
        // The illustrated case always uses stream 0; coverage uses 1..=R.
        let rep = garch_replication(cfg, r, 0)?;
        let res = &rep.result;
        psd.record(relative_inflation_floor(&res.pair.unadjusted, &res.pair.adjusted));
        let coverage = if cfg.coverage_replications > 0 {
            let runs = run_indexed(cfg.coverage_replications, cfg.workers, |k| garch_replication(cfg, r, k as u64 + 1));
            let mut cov = GarchCoverage {
                replications: cfg.coverage_replications,
                completed: 0,
                unadjusted_contained: 0,
                adjusted_contained: 0,
                unadjusted_ratio: f64::NAN,
                adjusted_ratio: f64::NAN,
                median_area_ratio: f64::NAN,
                boundary_fits: 0,
                failures: Vec::new(),
            };
            let mut area_ratios = Vec::new();
            for (k, run) in runs.iter().enumerate() {
                match run {
                    Ok(g) => {
                        cov.completed += 1;
                        cov.unadjusted_contained += usize::from(g.contains.0);
                        cov.adjusted_contained += usize::from(g.contains.1);
                        cov.boundary_fits += usize::from(g.result.primary.report.boundary);
                        area_ratios.push(g.result.area_ratio());
                        psd.record(relative_inflation_floor(&g.result.pair.unadjusted, &g.result.pair.adjusted));
                    }
                    Err(e) => {
                        log::warn!("GARCH replication {} (r = {r}) failed: {e}", k + 1);
                        cov.failures.push(ReplicationFailure::new(k + 1, e));
                    }
                }
            }
            cov.unadjusted_ratio = ratio(cov.unadjusted_contained, cov.completed);
            cov.adjusted_ratio = ratio(cov.adjusted_contained, cov.completed);
            cov.median_area_ratio = mlp::median(&area_ratios);
            Some(cov)
        } else {
            None
        };
        cases.push(GarchCase {
            rel_error: r,
            omega_used: res.omega_used,
            omega_hat_nuisance_series: res.omega_fit.omega_hat,
            v_omega_over_m: res.pair.v_alpha_over_m[(0, 0)],
            theta_hat: [res.primary.a_hat, res.primary.b_hat],
            truth: [cfg.truth.a, cfg.truth.b],
            unadjusted_cov: mat_rows(&res.pair.unadjusted),
            adjusted_cov: mat_rows(&res.pair.adjusted),
            d1: mat_rows(&res.pair.d1.d1),
            ellipse_unadjusted: res.ellipse_unadjusted,
            ellipse_adjusted: res.ellipse_adjusted,
            area_ratio: res.area_ratio(),
            unadjusted_contains_truth: rep.contains.0,
            adjusted_contains_truth: rep.contains.1,
            boundary: res.primary.report.boundary,
            coverage,
        });
    }
    Ok(GarchCasesReport {
        schema_version: SCHEMA_VERSION.into(),
        experiment: "garch-cases".into(),
        config: cfg.clone(),
        cases,
        psd,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Network depth study.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnDepthConfig {
    pub master_seed: u64,
    /// One training run per entry for every depth.
    pub seeds: Vec<u64>,
    pub depths: Vec<usize>,
    pub hidden: usize,
    pub train: TrainConfig,
    /// Cyclic pixel shifts of up to this radius are added to the training
    /// set; zero disables augmentation.
    pub augment_radius: usize,
    pub target_accuracy: f64,
    pub groups: usize,
    pub group_size: usize,
    pub refit: BiasRefitConfig,
    pub level: f64,
    pub quantile_rule: QuantileRule,
    pub gradient_path: GradientPath,
    /// Fail instead of reporting when a net misses the target accuracy.
    pub require_accuracy: bool,
}

impl Default for NnDepthConfig {
    fn default() -> Self {
        Self {
            master_seed: 20240101,
            seeds: vec![0, 1, 2, 3, 4],
            depths: vec![2, 4],
            hidden: 16,
            train: TrainConfig::default(),
            augment_radius: 1,
            target_accuracy: 0.90,
            groups: 10,
            group_size: 150,
            refit: BiasRefitConfig::default(),
            level: 0.9,
            quantile_rule: QuantileRule::MatchLevel,
            gradient_path: GradientPath::ChainRule,
            require_accuracy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnRun {
    pub seed: u64,
    pub depth: usize,
    pub test_accuracy: f64,
    pub accuracy_reached: bool,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub primary_weights: usize,
    pub biases: usize,
    pub fim_min_eigenvalue: f64,
    pub bias_variance_mean: f64,
    pub tau2: f64,
    pub relative_trace_inflation: f64,
    pub psd_floor: f64,
    pub intervals: mlp::PredictionCiPair,
    pub median_widening: f64,
    pub adjusted_contains_unadjusted: bool,
    /// Two output-layer weights, for the 2-D picture.
    pub weight_pair: [usize; 2],
    pub weight_ellipse_unadjusted: EllipseSpec,
    pub weight_ellipse_adjusted: EllipseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    /// Median widening per depth, in `config.depths` order.
    pub median_widening: Vec<f64>,
    /// Shallower nets widen strictly more than deeper ones.
    pub ordering_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnDepthReport {
    pub schema_version: String,
    pub experiment: String,
    pub config: NnDepthConfig,
    pub train_rows: usize,
    pub test_rows: usize,
    pub runs: Vec<NnRun>,
    pub comparisons: Vec<SeedComparison>,
    pub failures: Vec<ReplicationFailure>,
    pub psd: PsdAudit,
    pub wall_time_seconds: f64,
}

impl NnDepthReport {
    pub fn all_accuracy_reached(&self) -> bool {
        !self.runs.is_empty() && self.runs.iter().all(|r| r.accuracy_reached)
    }

    pub fn ordering_holds_for_all_seeds(&self) -> bool {
        !self.comparisons.is_empty() && self.comparisons.iter().all(|c| c.ordering_holds)
    }

    pub fn containment_holds(&self) -> bool {
        !self.runs.is_empty() && self.runs.iter().all(|r| r.adjusted_contains_unadjusted)
    }
}

fn train_seed(master: u64, seed: u64, depth: usize) -> u64 {
    // A distinct stream per (seed, depth); the state word is the seed.
    use rand::RngCore;
    replication_rng(master ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15), depth as u64).next_u64()
}

fn nn_run(cfg: &NnDepthConfig, train: &Dataset, test: &Dataset, seed: u64, depth: usize) -> Result<NnRun> {
    let spec = MlpSpec::uniform(train.input_dim(), cfg.hidden, depth, train.classes)?;
    let tcfg = TrainConfig {
        seed: train_seed(cfg.master_seed, seed, depth),
        target_accuracy: Some(cfg.target_accuracy),
        ..cfg.train.clone()
    };
    let out = mlp::train(&spec, train, Some(test), &tcfg)?;
    let params = out.params;
    let test_accuracy = mlp::accuracy(&spec, &params, test);
    let accuracy_reached = test_accuracy >= cfg.target_accuracy;
    if !accuracy_reached {
        let e = Error::AccuracyNotReached {
            hidden_layers: depth,
            accuracy: test_accuracy,
            required: cfg.target_accuracy,
        };
        if cfg.require_accuracy {
            return Err(e);
        }
        log::warn!("seed {seed}: {e}");
    }

    let n = test.len();
    let fim = mlp::weight_fim(&spec, &params, test)?;
    let cross = mlp::cross_jacobian_bias(&spec, &params, test)?;
    let d1 = mlp::weight_sensitivity(&fim, &cross)?;
    let mut group_rng = replication_rng(cfg.master_seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15), 1000 + depth as u64);
    let groups = test.random_groups(cfg.groups, cfg.group_size, &mut group_rng)?;
    let posterior = mlp::bias_posterior(&spec, &params, &groups, &cfg.refit)?;
    let pair = mlp::adjusted_weight_cov(&fim, &d1, &posterior, n)?;
    let intervals = mlp::prediction_ci(&spec, &params, &pair, test, cfg.level, cfg.gradient_path, cfg.quantile_rule)?;

    let p = spec.primary_weight_count();
    let last = spec.layer_sizes[spec.n_layers() - 1] * spec.output_dim();
    let weight_pair = [p - last, p - last + 1];
    let w = params.primary_weights(&spec);
    let center = [w[weight_pair[0]], w[weight_pair[1]]];
    let (bu, ba) = pair.pair_block(weight_pair[0], weight_pair[1]);

    Ok(NnRun {
        seed,
        depth,
        test_accuracy,
        accuracy_reached,
        epochs_run: out.epochs_run,
        final_train_loss: out.loss_trace.last().copied().unwrap_or(f64::NAN),
        primary_weights: p,
        biases: spec.bias_count(),
        fim_min_eigenvalue: numcore::min_eigenvalue(&fim),
        bias_variance_mean: posterior.variance_diag.mean(),
        tau2: posterior.tau2,
        relative_trace_inflation: pair.relative_trace_inflation(),
        psd_floor: relative_inflation_floor(&pair.unadjusted, &pair.adjusted),
        median_widening: intervals.median_widening(),
        adjusted_contains_unadjusted: intervals.adjusted_contains_unadjusted(),
        intervals,
        weight_pair,
        weight_ellipse_unadjusted: adjust::confidence_ellipse(center, &bu, cfg.level)?,
        weight_ellipse_adjusted: adjust::confidence_ellipse(center, &ba, cfg.level)?,
    })
}

/// Trains one network per `(seed, depth)`, then compares how much the
/// bias adjustment widens the class-probability intervals at each depth.
pub fn run_nn_depth_study(cfg: &NnDepthConfig, train: &Dataset, test: &Dataset) -> Result<NnDepthReport> {
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::InvalidProbability(cfg.level));
    }
    if cfg.seeds.is_empty() || cfg.depths.is_empty() {
        return Err(Error::InvalidParams("need at least one seed and one depth".into()));
    }
    let start = Instant::now();
    let train_aug = if cfg.augment_radius > 0 && train.image_shape.is_some() {
        data::shift_augment(train, cfg.augment_radius)?
    } else {
        train.clone()
    };
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.depths.iter().map(move |&d| (s, d)))
        .collect();
    let results: Vec<Result<NnRun>> = jobs.iter().map(|&(s, d)| nn_run(cfg, &train_aug, test, s, d)).collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut psd = PsdAudit::empty();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(run) => {
                if !run.accuracy_reached {
                    let e = Error::AccuracyNotReached {
                        hidden_layers: run.depth,
                        accuracy: run.test_accuracy,
                        required: cfg.target_accuracy,
                    };
                    failures.push(ReplicationFailure::new(i, &e));
                }
                psd.record(run.psd_floor);
                runs.push(run);
            }
            Err(e) => {
                if cfg.require_accuracy && matches!(e, Error::AccuracyNotReached { .. }) {
                    return Err(e);
                }
                failures.push(ReplicationFailure::new(i, &e));
            }
        }
    }
    let mut depths_sorted = cfg.depths.clone();
    depths_sorted.sort_unstable();
    let comparisons = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let widening: Vec<f64> = cfg
                .depths
                .iter()
                .map(|&d| {
                    runs.iter()
                        .find(|r| r.seed == seed && r.depth == d)
                        .map_or(f64::NAN, |r| r.median_widening)
                })
                .collect();
            let by_depth: Vec<f64> = depths_sorted
                .iter()
                .map(|&d| widening[cfg.depths.iter().position(|x| *x == d).unwrap_or(0)])
                .collect();
            let ordering_holds = by_depth.windows(2).all(|w| w[0] > w[1]);
            SeedComparison {
                seed,
                median_widening: widening,
                ordering_holds,
            }
        })
        .collect();
    Ok(NnDepthReport {
        schema_version: SCHEMA_VERSION.into(),
        experiment: "nn-depth".into(),
        config: cfg.clone(),
        train_rows: train_aug.len(),
        test_rows: test.len(),
        runs,
        comparisons,
        failures,
        psd,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

pub const WALL_TIME_FIELD: &str = "wall_time_seconds";

/// Removes every wall-time field, at any depth.
pub fn strip_wall_time(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(obj) => {
            obj.remove(WALL_TIME_FIELD);
            obj.values_mut().for_each(strip_wall_time);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_time),
        _ => {}
    }
}

/// Serializes a report with its wall-time fields removed, for comparing runs.
pub fn canonical_json<T: Serialize>(report: &T) -> Result<String> {
    let mut v = serde_json::to_value(report).map_err(|e| Error::InvalidData(e.to_string()))?;
    strip_wall_time(&mut v);
    serde_json::to_string_pretty(&v).map_err(|e| Error::InvalidData(e.to_string()))
}
