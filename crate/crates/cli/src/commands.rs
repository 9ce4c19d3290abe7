use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nuisance_core::adjust::{self, QuantileRule};
use nuisance_core::data::{self, Dataset};
use nuisance_core::expreg::{self, CovariateLaw, FimMethod, Scenario};
use nuisance_core::garch::{self, PipelineOptions};
use nuisance_core::harness::{
    self, ExpRegCoverageConfig, GarchCasesConfig, NnDepthConfig, SCHEMA_VERSION,
};
use nuisance_core::mlp::GradientPath;
use nuisance_core::{EllipseSpec, ExpRegParams, GarchParams, Mat};
use serde::Serialize;

use crate::config::{self, FileConfig};
use crate::error::{CliError, CliResult};
use crate::ingest::{self, IngestOptions};
use crate::svg::{self, EllipseLayer, Figure, Marker, MarkerShape, StrokeStyle};

#[derive(Debug, Parser)]
#[command(name = "nuisance", version, about = "Confidence regions adjusted for externally estimated nuisance parameters")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Confidence level in (0, 1).
    #[arg(long, global = true)]
    pub level: Option<f64>,
    /// TOML file of flat settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Use z = 1.959964 for prediction intervals whatever the level.
    #[arg(long, global = true)]
    pub paper_quantile: bool,
    /// Take natural logs of ingested series values.
    #[arg(long, global = true)]
    pub log: bool,
    /// Subtract the sample mean of ingested series.
    #[arg(long, global = true)]
    pub demean: bool,
    /// Cap on worker threads (also read from NUISANCE_ADJUST_WORKERS).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Expreg,
    Garch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Expreg,
    Garch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IngestKind {
    Series,
    Expreg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FimArg {
    Opg,
    NegHessian,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate datasets: two regression samples or two GARCH series.
    Simulate {
        #[arg(long, value_enum)]
        model: Model,
        /// Size of the primary sample (A, or the primary series).
        #[arg(long)]
        n: Option<usize>,
        /// Size of the nuisance sample (B, or the nuisance series).
        #[arg(long)]
        m: Option<usize>,
        /// True parameters: `b0,b1,b2` or `omega,a,b`.
        #[arg(long)]
        params: Option<String>,
    },
    /// Maximum-likelihood fit of one dataset.
    Fit {
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long)]
        input: PathBuf,
        /// GARCH only: hold ω at this value and fit (a, b).
        #[arg(long)]
        omega: Option<f64>,
    },
    /// Adjusted and unadjusted covariance from a primary and a nuisance dataset.
    Adjust {
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long)]
        primary: PathBuf,
        #[arg(long)]
        nuisance: PathBuf,
        #[arg(long, value_enum)]
        fim: Option<FimArg>,
    },
    /// A single confidence ellipse from a center and covariance.
    Ellipse {
        /// `x,y`
        #[arg(long, allow_hyphen_values = true)]
        center: String,
        /// Row-major `c11,c12,c21,c22`.
        #[arg(long, allow_hyphen_values = true)]
        cov: String,
    },
    /// Monte Carlo coverage of the confidence ellipses.
    Coverage {
        #[arg(long, value_enum, default_value = "expreg")]
        experiment: Experiment,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// GARCH only: comma-separated relative errors of ω.
        #[arg(long)]
        rel_errors: Option<String>,
    },
    /// GARCH(1,1) with ω perturbed by fixed relative errors.
    GarchPipeline {
        #[arg(long)]
        rel_errors: Option<String>,
        /// Coverage replications per case; 0 runs only the illustrated case.
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        t_len: Option<usize>,
    },
    /// Train networks at several depths and compare interval widening.
    NnStudy {
        /// Directory with the four MNIST IDX files.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Use Gaussian blobs instead of images.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        depths: Option<String>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        train_limit: Option<usize>,
        #[arg(long)]
        test_limit: Option<usize>,
        /// Backpropagate the class probability instead of the chain-rule gradient.
        #[arg(long)]
        direct_gradient: bool,
    },
    /// Validate and normalize a CSV file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "series")]
        kind: IngestKind,
    },
}

/// Every file written by a command.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReportBundle {
    pub json: PathBuf,
    pub csv: Vec<PathBuf>,
    pub svg: Vec<PathBuf>,
    pub data: Vec<PathBuf>,
}

impl ReportBundle {
    pub fn all(&self) -> Vec<&PathBuf> {
        std::iter::once(&self.json)
            .chain(&self.csv)
            .chain(&self.svg)
            .chain(&self.data)
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    level: f64,
    wall_time_seconds: f64,
    result: T,
}

pub const DEFAULT_OUT: &str = "out";
pub const DEFAULT_LEVEL: f64 = 0.9;

/// Settings after merging flags, config file and defaults.
struct Ctx {
    file: FileConfig,
    seed: Option<u64>,
    out: PathBuf,
    level: f64,
    paper_quantile: bool,
    ingest: IngestOptions,
    workers: Option<usize>,
    started: Instant,
}

impl Ctx {
    fn new(g: &GlobalArgs) -> CliResult<Self> {
        let file = match &g.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let level = g.level.or(file.level).unwrap_or(DEFAULT_LEVEL);
        if !(level > 0.0 && level < 1.0) {
            return Err(CliError::Usage(format!("--level must lie in (0, 1), got {level}")));
        }
        Ok(Ctx {
            seed: g.seed.or(file.seed),
            out: g.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            level,
            paper_quantile: g.paper_quantile || file.paper_quantile.unwrap_or(false),
            ingest: IngestOptions {
                log_transform: g.log || file.log.unwrap_or(false),
                demean: g.demean || file.demean.unwrap_or(false),
            },
            workers: g.workers.or_else(config::workers_from_env).or(file.workers),
            file,
            started: Instant::now(),
        })
    }

    fn seed_or(&self, default: u64) -> u64 {
        self.seed.unwrap_or(default)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare_out(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::output(&self.out, e))
    }

    fn write_json<T: Serialize>(&self, command: &str, result: T) -> CliResult<PathBuf> {
        let path = self.path("report.json");
        let env = Envelope {
            schema_version: SCHEMA_VERSION,
            command,
            seed: self.seed,
            level: self.level,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            result,
        };
        let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::output(&path, e))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::output(&path, e))?;
        Ok(path)
    }

    fn quantile_rule(&self) -> QuantileRule {
        if self.paper_quantile {
            QuantileRule::FixedUpper025
        } else {
            QuantileRule::MatchLevel
        }
    }
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::input(p, "file not found"))
    }
}

fn f(v: f64) -> String {
    v.to_string()
}

pub fn dispatch(cli: Cli) -> CliResult<ReportBundle> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::Simulate { model, n, m, params } => simulate(&ctx, model, n, m, params.as_deref()),
        Command::Fit { model, input, omega } => fit(&ctx, model, &input, omega),
        Command::Adjust {
            model,
            primary,
            nuisance,
            fim,
        } => adjust_cmd(&ctx, model, &primary, &nuisance, fim),
        Command::Ellipse { center, cov } => ellipse_cmd(&ctx, &center, &cov),
        Command::Coverage {
            experiment,
            reps,
            n,
            m,
            rel_errors,
        } => match experiment {
            Experiment::Expreg => coverage_expreg(&ctx, reps, n, m),
            Experiment::Garch => {
                let r = rel_errors.as_deref().map(|s| config::parse_list("rel-errors", s)).transpose()?;
                garch_cases(&ctx, r, Some(reps.unwrap_or(200)), None, "coverage")
            }
        },
        Command::GarchPipeline { rel_errors, reps, t_len } => {
            let r = rel_errors.as_deref().map(|s| config::parse_list("rel-errors", s)).transpose()?;
            garch_cases(&ctx, r, reps, t_len, "garch-pipeline")
        }
        Command::NnStudy {
            data_dir,
            synthetic,
            seeds,
            depths,
            hidden,
            epochs,
            train_limit,
            test_limit,
            direct_gradient,
        } => {
            let opts = NnArgs {
                data_dir,
                synthetic,
                seeds: seeds.as_deref().map(|s| config::parse_list("seeds", s)).transpose()?,
                depths: depths.as_deref().map(|s| config::parse_list("depths", s)).transpose()?,
                hidden,
                epochs,
                train_limit,
                test_limit,
                direct_gradient,
            };
            nn_study(&ctx, opts)
        }
        Command::Ingest { input, kind } => ingest_cmd(&ctx, &input, kind),
    }
}

fn expreg_truth(ctx: &Ctx, params: Option<&str>) -> CliResult<ExpRegParams> {
    let d = ExpRegParams::default();
    if let Some(p) = params {
        let v: Vec<f64> = config::parse_list("params", p)?;
        return ExpRegParams::from_slice(&v).map_err(|_| CliError::Usage("--params needs b0,b1,b2".into()));
    }
    let c = &ctx.file;
    Ok(ExpRegParams {
        b0: c.b0.unwrap_or(d.b0),
        b1: c.b1.unwrap_or(d.b1),
        b2: c.b2.unwrap_or(d.b2),
    })
}

fn garch_truth(ctx: &Ctx, params: Option<&str>) -> CliResult<GarchParams> {
    let d = GarchParams::default();
    let p = if let Some(p) = params {
        match config::parse_list::<f64>("params", p)?[..] {
            [omega, a, b] => GarchParams::new(omega, a, b),
            _ => return Err(CliError::Usage("--params needs omega,a,b".into())),
        }
    } else {
        let c = &ctx.file;
        GarchParams::new(c.omega.unwrap_or(d.omega), c.a.unwrap_or(d.a), c.b.unwrap_or(d.b))
    };
    p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(p)
}

fn simulate(ctx: &Ctx, model: Model, n: Option<usize>, m: Option<usize>, params: Option<&str>) -> CliResult<ReportBundle> {
    ctx.prepare_out()?;
    let seed = ctx.seed_or(ExpRegCoverageConfig::default().master_seed);
    let mut rng = harness::replication_rng(seed, 0);
    let mut bundle = ReportBundle::default();
    #[derive(Serialize)]
    struct Sim<P: Serialize> {
        model: &'static str,
        params: P,
        primary_rows: usize,
        nuisance_rows: usize,
        files: Vec<PathBuf>,
    }
    match model {
        Model::Expreg => {
            let truth = expreg_truth(ctx, params)?;
            let n = n.or(ctx.file.n).unwrap_or(1000);
            let m = m.or(ctx.file.m).unwrap_or(50);
            let a = expreg::simulate(&truth, n, &CovariateLaw::StandardNormal, &mut rng);
            let b = expreg::simulate(&truth, m, &CovariateLaw::StandardNormal, &mut rng);
            let (pa, pb) = (ctx.path("sample_a.csv"), ctx.path("sample_b.csv"));
            ingest::write_expreg(&pa, &a)?;
            ingest::write_expreg(&pb, &b)?;
            bundle.data = vec![pa, pb];
            bundle.json = ctx.write_json(
                "simulate",
                Sim {
                    model: "expreg",
                    params: truth,
                    primary_rows: n,
                    nuisance_rows: m,
                    files: bundle.data.clone(),
                },
            )?;
        }
        Model::Garch => {
            let truth = garch_truth(ctx, params)?;
            let n = n.or(ctx.file.t_len).unwrap_or(1000);
            let m = m.or(ctx.file.m_len).unwrap_or(1000);
            let burn = ctx.file.burn_in.unwrap_or(garch::DEFAULT_BURN_IN);
            let p = garch::simulate(&truth, n, burn, &mut rng)?;
            let q = garch::simulate(&truth, m, burn, &mut rng)?;
            let (pp, pq) = (ctx.path("series_primary.csv"), ctx.path("series_nuisance.csv"));
            ingest::write_series(&pp, &p, None)?;
            ingest::write_series(&pq, &q, None)?;
            bundle.data = vec![pp, pq];
            bundle.json = ctx.write_json(
                "simulate",
                Sim {
                    model: "garch",
                    params: truth,
                    primary_rows: n,
                    nuisance_rows: m,
                    files: bundle.data.clone(),
                },
            )?;
        }
    }
    Ok(bundle)
}

fn fim_method(ctx: &Ctx, flag: Option<FimArg>) -> CliResult<FimMethod> {
    let from_file = match ctx.file.fim.as_deref() {
        None => None,
        Some("opg") => Some(FimArg::Opg),
        Some("neg-hessian") => Some(FimArg::NegHessian),
        Some(other) => return Err(CliError::Usage(format!("fim must be opg or neg-hessian, got {other:?}"))),
    };
    Ok(match flag.or(from_file).unwrap_or(FimArg::Opg) {
        FimArg::Opg => FimMethod::OuterProduct,
        FimArg::NegHessian => FimMethod::NegHessian,
    })
}

fn fit(ctx: &Ctx, model: Model, input: &Path, omega: Option<f64>) -> CliResult<ReportBundle> {
    require_file(input)?;
    ctx.prepare_out()?;
    let json = match model {
        Model::Expreg => {
            let data = ingest::read_expreg(input)?;
            let (p, report) = expreg::fit(&data, &[0, 1, 2], &ExpRegParams::default())?;
            let fim = expreg::fim(&p, &data, FimMethod::OuterProduct)?;
            let cov = nuisance_core::numcore::inverse_spd(&fim)?.x / data.len() as f64;
            #[derive(Serialize)]
            struct Out {
                params: ExpRegParams,
                iterations: usize,
                grad_norm: f64,
                rows: usize,
                covariance: Vec<Vec<f64>>,
                standard_errors: Vec<f64>,
            }
            ctx.write_json(
                "fit",
                Out {
                    params: p,
                    iterations: report.iterations,
                    grad_norm: report.grad_norm,
                    rows: data.len(),
                    standard_errors: (0..3).map(|i| cov[(i, i)].sqrt()).collect(),
                    covariance: harness::mat_rows(&cov),
                },
            )?
        }
        Model::Garch => {
            let s = ingest::read_series(input, ctx.ingest)?;
            match omega {
                Some(w) => {
                    let fit = garch::fit_primary(&s.series, w)?;
                    ctx.write_json("fit", fit)?
                }
                None => {
                    let fit = garch::fit_omega(&s.series)?;
                    ctx.write_json("fit", fit)?
                }
            }
        }
    };
    Ok(ReportBundle {
        json,
        ..Default::default()
    })
}

const SCENARIO_STYLES: [(&str, StrokeStyle); 4] = [
    ("#2c3e50", StrokeStyle::Dashed),
    ("#c0392b", StrokeStyle::Solid),
    ("#27ae60", StrokeStyle::Dotted),
    ("#8e44ad", StrokeStyle::Solid),
];

fn scenario_figure(title: &str, ellipses: &[(Scenario, EllipseSpec)], truth: Option<[f64; 2]>) -> Figure {
    let layers = ellipses
        .iter()
        .enumerate()
        .map(|(i, (s, e))| EllipseLayer {
            ellipse: *e,
            label: s.label().to_string(),
            color: SCENARIO_STYLES[i % 4].0.into(),
            style: SCENARIO_STYLES[i % 4].1,
        })
        .collect();
    let mut markers = Vec::new();
    if let Some(t) = truth {
        markers.push(Marker {
            at: t,
            label: "true value".into(),
            shape: MarkerShape::Cross,
        });
    }
    Figure {
        title: title.into(),
        x_label: "b0".into(),
        y_label: "b2".into(),
        layers,
        markers,
    }
}

fn adjust_cmd(ctx: &Ctx, model: Model, primary: &Path, nuisance: &Path, fim: Option<FimArg>) -> CliResult<ReportBundle> {
    require_file(primary)?;
    require_file(nuisance)?;
    ctx.prepare_out()?;
    let mut bundle = ReportBundle::default();
    match model {
        Model::Expreg => {
            let a = ingest::read_expreg(primary)?;
            let b = ingest::read_expreg(nuisance)?;
            let set = expreg::scenario_covariances(&a, &b, fim_method(ctx, fim)?)?;
            let mut ellipses = Vec::new();
            let mut rows = Vec::new();
            for s in Scenario::ALL {
                let est = set.get(s);
                let e = adjust::confidence_ellipse(est.theta_hat, &est.cov, ctx.level)?;
                rows.push(vec![
                    s.label().to_string(),
                    f(est.theta_hat[0]),
                    f(est.theta_hat[1]),
                    f(e.area()),
                ]);
                ellipses.push((s, e));
            }
            #[derive(Serialize)]
            struct Out<'a> {
                model: &'static str,
                alpha_hat: f64,
                scenarios: &'a expreg::ScenarioSet,
                ellipses: &'a [(Scenario, EllipseSpec)],
                inflation_min_eigenvalue: f64,
            }
            let csv = ctx.path("summary.csv");
            ingest::write_table(&csv, &["scenario", "b0_hat", "b2_hat", "ellipse_area"], &rows)?;
            let svg_path = ctx.path("adjust.svg");
            svg::write_svg(&svg_path, &scenario_figure("Confidence ellipses for (b0, b2)", &ellipses, None))?;
            bundle.json = ctx.write_json(
                "adjust",
                Out {
                    model: "expreg",
                    alpha_hat: set.alpha_hat,
                    scenarios: &set,
                    ellipses: &ellipses,
                    inflation_min_eigenvalue: set.pair.inflation_min_eigenvalue(),
                },
            )?;
            bundle.csv.push(csv);
            bundle.svg.push(svg_path);
        }
        Model::Garch => {
            let p = ingest::read_series(primary, ctx.ingest)?;
            let q = ingest::read_series(nuisance, ctx.ingest)?;
            let res = garch::adjusted_pipeline(
                &p.series,
                &q.series,
                &PipelineOptions {
                    level: Some(ctx.level),
                    ..Default::default()
                },
            )?;
            let csv = ctx.path("summary.csv");
            ingest::write_table(
                &csv,
                &["omega_hat", "a_hat", "b_hat", "v_omega_over_m", "area_unadjusted", "area_adjusted", "area_ratio"],
                &[vec![
                    f(res.omega_used),
                    f(res.primary.a_hat),
                    f(res.primary.b_hat),
                    f(res.pair.v_alpha_over_m[(0, 0)]),
                    f(res.ellipse_unadjusted.area()),
                    f(res.ellipse_adjusted.area()),
                    f(res.area_ratio()),
                ]],
            )?;
            let svg_path = ctx.path("adjust.svg");
            svg::write_svg(
                &svg_path,
                &svg::adjusted_pair_figure(
                    "GARCH(1,1) confidence ellipses",
                    ("a", "b"),
                    &res.ellipse_unadjusted,
                    &res.ellipse_adjusted,
                    None,
                ),
            )?;
            #[derive(Serialize)]
            struct Out<'a> {
                model: &'static str,
                primary_removed_mean: Option<f64>,
                nuisance_removed_mean: Option<f64>,
                log_transform: bool,
                pipeline: &'a garch::PipelineResult,
                area_ratio: f64,
            }
            bundle.json = ctx.write_json(
                "adjust",
                Out {
                    model: "garch",
                    primary_removed_mean: p.removed_mean,
                    nuisance_removed_mean: q.removed_mean,
                    log_transform: ctx.ingest.log_transform,
                    pipeline: &res,
                    area_ratio: res.area_ratio(),
                },
            )?;
            bundle.csv.push(csv);
            bundle.svg.push(svg_path);
        }
    }
    Ok(bundle)
}

fn ellipse_cmd(ctx: &Ctx, center: &str, cov: &str) -> CliResult<ReportBundle> {
    let c: Vec<f64> = config::parse_list("center", center)?;
    let v: Vec<f64> = config::parse_list("cov", cov)?;
    let ([cx, cy], [a, b, c2, d]) = (
        <[f64; 2]>::try_from(c).map_err(|_| CliError::Usage("--center needs two values".into()))?,
        <[f64; 4]>::try_from(v).map_err(|_| CliError::Usage("--cov needs four values".into()))?,
    );
    if (b - c2).abs() > 1e-10 * a.abs().max(d.abs()).max(1.0) {
        return Err(CliError::Usage("--cov must be symmetric".into()));
    }
    ctx.prepare_out()?;
    let e = adjust::confidence_ellipse([cx, cy], &Mat::from_row_slice(2, 2, &[a, b, b, d]), ctx.level)?;
    let svg_path = ctx.path("ellipse.svg");
    svg::write_svg(
        &svg_path,
        &Figure {
            title: format!("{:.0}% confidence ellipse", 100.0 * ctx.level),
            x_label: "x".into(),
            y_label: "y".into(),
            layers: vec![EllipseLayer {
                ellipse: e,
                label: "ellipse".into(),
                color: "#2c3e50".into(),
                style: StrokeStyle::Solid,
            }],
            markers: vec![Marker {
                at: e.center,
                label: "center".into(),
                shape: MarkerShape::Dot,
            }],
        },
    )?;
    #[derive(Serialize)]
    struct Out {
        ellipse: EllipseSpec,
        axes: adjust::EllipseAxes,
        area: f64,
    }
    let json = ctx.write_json(
        "ellipse",
        Out {
            ellipse: e,
            axes: e.axes(),
            area: e.area(),
        },
    )?;
    Ok(ReportBundle {
        json,
        svg: vec![svg_path],
        ..Default::default()
    })
}

fn coverage_expreg(ctx: &Ctx, reps: Option<usize>, n: Option<usize>, m: Option<usize>) -> CliResult<ReportBundle> {
    let d = ExpRegCoverageConfig::default();
    let cfg = ExpRegCoverageConfig {
        replications: reps.or(ctx.file.reps).unwrap_or(d.replications),
        master_seed: ctx.seed_or(d.master_seed),
        n: n.or(ctx.file.n).unwrap_or(d.n),
        m: m.or(ctx.file.m).unwrap_or(d.m),
        level: ctx.level,
        truth: expreg_truth(ctx, None)?,
        fim_method: fim_method(ctx, None)?,
        workers: ctx.workers,
        ..d
    };
    ctx.prepare_out()?;
    let summary = harness::run_expreg_coverage(&cfg)?;
    if summary.exclusion_rate >= harness::MAX_EXCLUSION_RATE {
        log::error!(
            "{} of {} replications failed, above the {:.0}% cap",
            summary.failures.len(),
            cfg.replications,
            100.0 * harness::MAX_EXCLUSION_RATE
        );
    }
    let csv = ctx.path("summary.csv");
    let rows: Vec<Vec<String>> = summary
        .scenarios
        .iter()
        .map(|c| {
            vec![
                c.label.clone(),
                c.contained.to_string(),
                c.total.to_string(),
                f(c.coverage_ratio),
                f(c.mean_ellipse_area),
            ]
        })
        .collect();
    ingest::write_table(&csv, &["scenario", "contained", "total", "coverage_ratio", "mean_ellipse_area"], &rows)?;
    let mut bundle = ReportBundle {
        csv: vec![csv],
        ..Default::default()
    };
    if let Some(rep) = &summary.representative {
        let p = ctx.path("coverage_median_replication.svg");
        svg::write_svg(
            &p,
            &scenario_figure(
                &format!("Replication {} (median distance)", rep.replication),
                &rep.ellipses,
                Some(rep.truth),
            ),
        )?;
        bundle.svg.push(p);
    }
    bundle.json = ctx.write_json("coverage", &summary)?;
    Ok(bundle)
}

fn garch_cases(
    ctx: &Ctx,
    rel_errors: Option<Vec<f64>>,
    reps: Option<usize>,
    t_len: Option<usize>,
    command: &str,
) -> CliResult<ReportBundle> {
    let d = GarchCasesConfig::default();
    let t = t_len.or(ctx.file.t_len).unwrap_or(d.t_len);
    let cfg = GarchCasesConfig {
        master_seed: ctx.seed_or(d.master_seed),
        truth: garch_truth(ctx, None)?,
        t_len: t,
        m_len: ctx.file.m_len.unwrap_or(t),
        burn_in: ctx.file.burn_in.unwrap_or(d.burn_in),
        rel_errors: rel_errors.or(ctx.file.rel_errors.clone()).unwrap_or(d.rel_errors.clone()),
        level: ctx.level,
        coverage_replications: reps.or(ctx.file.reps).unwrap_or(d.coverage_replications),
        workers: ctx.workers,
    };
    ctx.prepare_out()?;
    let report = harness::run_garch_cases(&cfg)?;
    let mut bundle = ReportBundle::default();
    let mut rows = Vec::new();
    for c in &report.cases {
        let cov = c.coverage.as_ref();
        rows.push(vec![
            f(c.rel_error),
            f(c.omega_used),
            f(c.theta_hat[0]),
            f(c.theta_hat[1]),
            f(c.area_ratio),
            c.unadjusted_contains_truth.to_string(),
            c.adjusted_contains_truth.to_string(),
            cov.map_or(String::new(), |v| v.completed.to_string()),
            cov.map_or(String::new(), |v| f(v.unadjusted_ratio)),
            cov.map_or(String::new(), |v| f(v.adjusted_ratio)),
            cov.map_or(String::new(), |v| f(v.median_area_ratio)),
        ]);
        let name = format!("garch_rel_error_{:03}.svg", (c.rel_error * 100.0).round() as i64);
        let p = ctx.path(&name);
        svg::write_svg(
            &p,
            &svg::adjusted_pair_figure(
                &format!("GARCH(1,1), {:.0}% error in omega", 100.0 * c.rel_error),
                ("a", "b"),
                &c.ellipse_unadjusted,
                &c.ellipse_adjusted,
                Some(c.truth),
            ),
        )?;
        bundle.svg.push(p);
    }
    let csv = ctx.path("summary.csv");
    ingest::write_table(
        &csv,
        &[
            "rel_error",
            "omega_used",
            "a_hat",
            "b_hat",
            "area_ratio",
            "unadjusted_contains_truth",
            "adjusted_contains_truth",
            "coverage_completed",
            "coverage_unadjusted",
            "coverage_adjusted",
            "median_area_ratio",
        ],
        &rows,
    )?;
    bundle.csv.push(csv);
    bundle.json = ctx.write_json(command, &report)?;
    Ok(bundle)
}

struct NnArgs {
    data_dir: Option<PathBuf>,
    synthetic: bool,
    seeds: Option<Vec<u64>>,
    depths: Option<Vec<usize>>,
    hidden: Option<usize>,
    epochs: Option<usize>,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
    direct_gradient: bool,
}

pub const DEFAULT_MNIST_DIR: &str = "data/mnist";

fn nn_study(ctx: &Ctx, a: NnArgs) -> CliResult<ReportBundle> {
    let file = &ctx.file;
    let d = NnDepthConfig::default();
    let master_seed = ctx.seed_or(d.master_seed);
    let (train, test) = if a.synthetic {
        let mut rng = harness::replication_rng(master_seed, u64::MAX);
        let all = data::gaussian_blobs(4000, 20, 10, 2.0, &mut rng)?;
        let idx: Vec<usize> = (0..all.len()).collect();
        (all.select(&idx[..2500]), all.select(&idx[2500..]))
    } else {
        let dir = a
            .data_dir
            .clone()
            .or(file.data_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR));
        if !dir.is_dir() {
            return Err(CliError::input(&dir, "data directory not found"));
        }
        data::load_mnist_dir(&dir)?
    };
    let limit = |ds: Dataset, l: Option<usize>| match l {
        Some(l) => ds.head(l),
        None => ds,
    };
    let train = limit(train, a.train_limit.or(file.train_limit));
    let test = limit(test, a.test_limit.or(file.test_limit));

    let mut tcfg = d.train.clone();
    if let Some(e) = a.epochs.or(file.epochs) {
        tcfg.epochs = e;
        tcfg.max_epochs = tcfg.max_epochs.max(e);
    }
    if let Some(e) = file.max_epochs {
        tcfg.max_epochs = e.max(tcfg.epochs);
    }
    if let Some(lr) = file.learning_rate {
        tcfg.learning_rate = lr;
    }
    if let Some(b) = file.batch_size {
        tcfg.batch_size = b;
    }
    let cfg = NnDepthConfig {
        master_seed,
        seeds: a.seeds.or(file.seeds.clone()).unwrap_or(d.seeds.clone()),
        depths: a.depths.or(file.depths.clone()).unwrap_or(d.depths.clone()),
        hidden: a.hidden.or(file.hidden).unwrap_or(d.hidden),
        train: tcfg,
        augment_radius: file.augment_radius.unwrap_or(d.augment_radius),
        target_accuracy: file.target_accuracy.unwrap_or(d.target_accuracy),
        groups: file.groups.unwrap_or(d.groups),
        group_size: file.group_size.unwrap_or(d.group_size),
        level: ctx.level,
        quantile_rule: ctx.quantile_rule(),
        gradient_path: if a.direct_gradient {
            GradientPath::Direct
        } else {
            GradientPath::ChainRule
        },
        ..d
    };
    ctx.prepare_out()?;
    let report = harness::run_nn_depth_study(&cfg, &train, &test)?;
    for fail in &report.failures {
        log::warn!("{}: {}", fail.kind, fail.message);
    }

    let mut bundle = ReportBundle::default();
    let summary = ctx.path("summary.csv");
    let rows: Vec<Vec<String>> = report
        .runs
        .iter()
        .map(|r| {
            vec![
                r.seed.to_string(),
                r.depth.to_string(),
                f(r.test_accuracy),
                r.accuracy_reached.to_string(),
                r.epochs_run.to_string(),
                r.primary_weights.to_string(),
                r.biases.to_string(),
                f(r.relative_trace_inflation),
                f(r.median_widening),
                r.adjusted_contains_unadjusted.to_string(),
            ]
        })
        .collect();
    ingest::write_table(
        &summary,
        &[
            "seed",
            "depth",
            "test_accuracy",
            "accuracy_reached",
            "epochs_run",
            "primary_weights",
            "biases",
            "relative_trace_inflation",
            "median_widening",
            "adjusted_contains_unadjusted",
        ],
        &rows,
    )?;
    let intervals = ctx.path("intervals.csv");
    let mut irows = Vec::new();
    for r in &report.runs {
        for (u, v) in r.intervals.unadjusted.classes.iter().zip(&r.intervals.adjusted.classes) {
            irows.push(vec![
                r.seed.to_string(),
                r.depth.to_string(),
                u.class.to_string(),
                f(u.mu_hat),
                f(u.lower),
                f(u.upper),
                f(v.lower),
                f(v.upper),
            ]);
        }
    }
    ingest::write_table(
        &intervals,
        &["seed", "depth", "class", "mu_hat", "unadjusted_lower", "unadjusted_upper", "adjusted_lower", "adjusted_upper"],
        &irows,
    )?;
    bundle.csv = vec![summary, intervals];
    // One weight ellipse per depth, from the first seed.
    for &depth in &cfg.depths {
        if let Some(r) = report.runs.iter().find(|r| r.depth == depth) {
            let p = ctx.path(&format!("nn_weights_depth{depth}.svg"));
            svg::write_svg(
                &p,
                &svg::adjusted_pair_figure(
                    &format!("{depth} hidden layers, seed {}", r.seed),
                    (
                        &format!("output weight {}", r.weight_pair[0]),
                        &format!("output weight {}", r.weight_pair[1]),
                    ),
                    &r.weight_ellipse_unadjusted,
                    &r.weight_ellipse_adjusted,
                    None,
                ),
            )?;
            bundle.svg.push(p);
        }
    }
    bundle.json = ctx.write_json("nn-study", &report)?;
    Ok(bundle)
}

fn ingest_cmd(ctx: &Ctx, input: &Path, kind: IngestKind) -> CliResult<ReportBundle> {
    require_file(input)?;
    ctx.prepare_out()?;
    let out = ctx.path("ingested.csv");
    #[derive(Serialize)]
    struct Out {
        kind: &'static str,
        input: PathBuf,
        rows: usize,
        log_transform: bool,
        removed_mean: Option<f64>,
        output: PathBuf,
    }
    let (kind_name, rows, removed_mean) = match kind {
        IngestKind::Series => {
            let s = ingest::read_series(input, ctx.ingest)?;
            ingest::write_series(&out, &s.series, s.dates.as_deref())?;
            ("series", s.series.len(), s.removed_mean)
        }
        IngestKind::Expreg => {
            let d = ingest::read_expreg(input)?;
            ingest::write_expreg(&out, &d)?;
            ("expreg", d.len(), None)
        }
    };
    let json = ctx.write_json(
        "ingest",
        Out {
            kind: kind_name,
            input: input.to_path_buf(),
            rows,
            log_transform: ctx.ingest.log_transform,
            removed_mean,
            output: out.clone(),
        },
    )?;
    Ok(ReportBundle {
        json,
        data: vec![out],
        ..Default::default()
    })
}
