//! Command-line front end. Every experiment option lives in the key=value
//! config layer; flags are thin overrides that reuse the same parser, so a
//! bad flag value fails exactly like a bad config line (exit 1).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use demandcast::config::ExperimentConfig;
use demandcast::runner;
use demandcast::{Error, Result};

#[derive(Parser)]
#[command(name = "demandcast", version, about = "Probabilistic demand forecasting over retail hierarchies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config overrides shared by every subcommand. Precedence: config file,
/// then repeated --set pairs, then the named flags.
#[derive(Args, Default)]
struct Overrides {
    /// Key=value config file read first.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra KEY=VALUE override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Long-format sales CSV (series_id,date,quantity).
    #[arg(long)]
    sales: Option<String>,
    /// Hierarchy CSV (lower_id,aggregate_id), or `none`.
    #[arg(long)]
    hierarchy: Option<String>,
    /// Directory for all run artifacts.
    #[arg(long = "out", alias = "output-dir")]
    output_dir: Option<String>,
    /// Dataset profile: m5, favorita, or generic.
    #[arg(long)]
    profile: Option<String>,
    /// RNG seed for every stochastic step.
    #[arg(long)]
    seed: Option<String>,
    /// Step distribution: poisson or negbin.
    #[arg(long)]
    dist: Option<String>,
    /// Demand-class filter: smooth, erratic, lumpy, intermittent, or all.
    #[arg(long)]
    class: Option<String>,
    /// Global model: pr, lasso, or gbt-{l2,l1,huber,poisson,tweedie,negbin}.
    #[arg(long)]
    model: Option<String>,
    /// Forecast steps held out for evaluation.
    #[arg(long)]
    horizon: Option<String>,
    /// Autoregressive window length.
    #[arg(long)]
    n_lags: Option<String>,
    /// Comma-separated quantile levels in (0,1).
    #[arg(long)]
    levels: Option<String>,
    /// Trailing days for variance estimation, or `none` for the full span.
    #[arg(long)]
    variance_window: Option<String>,
    /// Reuse the aggregate-level success probability for lower series.
    #[arg(long)]
    shared_p: Option<String>,
    /// Boosting preset: default or large.
    #[arg(long)]
    gbt_profile: Option<String>,
    /// Short-history handling: zeropad or drop.
    #[arg(long)]
    pad: Option<String>,
    /// Transition point of the robust squared loss.
    #[arg(long)]
    huber_delta: Option<String>,
    /// Power parameter of the compound-Poisson loss, in (1,2).
    #[arg(long)]
    tweedie_p: Option<String>,
    /// Mean inter-demand interval above which demand counts as intermittent.
    #[arg(long)]
    adi_threshold: Option<String>,
    /// Squared coefficient of variation above which demand counts as erratic.
    #[arg(long)]
    cv2_threshold: Option<String>,
    /// Compute the size variation over nonzero days only.
    #[arg(long)]
    cv2_nonzero_only: Option<String>,
    /// Comma-separated subsample sizes for the sampling study.
    #[arg(long = "sizes", alias = "sample-sizes")]
    sample_sizes: Option<String>,
    /// Repeated draws per sample size.
    #[arg(long)]
    repeats: Option<String>,
    /// Disjoint training folds for the ensemble run.
    #[arg(long)]
    folds: Option<String>,
}

impl Overrides {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut pairs = match &self.config {
            Some(path) => demandcast::config::parse_config_file(path)?,
            None => Vec::new(),
        };
        for item in &self.set {
            let (k, v) = item.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects KEY=VALUE, got '{item}'"))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("sales", self.sales),
            ("hierarchy", self.hierarchy),
            ("output_dir", self.output_dir),
            ("profile", self.profile),
            ("seed", self.seed),
            ("dist", self.dist),
            ("class", self.class),
            ("model", self.model),
            ("horizon", self.horizon),
            ("n_lags", self.n_lags),
            ("levels", self.levels),
            ("variance_window", self.variance_window),
            ("shared_p", self.shared_p),
            ("gbt_profile", self.gbt_profile),
            ("pad", self.pad),
            ("huber_delta", self.huber_delta),
            ("tweedie_p", self.tweedie_p),
            ("adi_threshold", self.adi_threshold),
            ("cv2_threshold", self.cv2_threshold),
            ("cv2_nonzero_only", self.cv2_nonzero_only),
            ("sample_sizes", self.sample_sizes),
            ("repeats", self.repeats),
            ("folds", self.folds),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                pairs.push((key.to_string(), v));
            }
        }
        ExperimentConfig::build(&pairs)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Label every series with its demand class.
    Classify(Overrides),
    /// Aggregate-level models, proportional disaggregation, count
    /// distributions, and scores at both levels.
    Topdown(Overrides),
    /// One pinball-loss boosted model per (quantile, step) benchmark.
    Direct(Overrides),
    /// Forecast accuracy as a function of training subsample size.
    SampleStudy(Overrides),
    /// Average of models trained on disjoint series folds.
    Ensemble(Overrides),
    /// Reference forecasters: mean, naive, seasonal naive, drift, and
    /// empirical training quantiles.
    Eval(Overrides),
    /// Rebuild plot-ready CSVs from a finished run directory.
    EmitPlots(Overrides),
}

/// Print wspl rows and any per-class failures; the artifacts for healthy
/// classes are already on disk, so a failure only sets the exit code.
fn summarize(bundle: &runner::RunBundle, out: &std::path::Path) -> Option<u8> {
    for row in &bundle.metrics {
        if row.metric == "wspl" {
            println!(
                "{:<14} {:<12} wspl {:>12.6}  ({} series, {} omitted)",
                row.group, row.model, row.value, row.n_series, row.n_omitted
            );
        }
    }
    for (class, err) in &bundle.failures {
        eprintln!("class {} failed: {err}", class.as_str());
    }
    println!("metrics written to {}", out.join("metrics.csv").display());
    bundle.first_failure().map(Error::exit_code)
}

fn dispatch(command: Command) -> Result<Option<u8>> {
    match command {
        Command::Classify(o) => {
            let cfg = o.into_config()?;
            runner::run_classify(&cfg)?;
            println!(
                "classes written to {}",
                cfg.output_dir.join("demand_classes.csv").display()
            );
            Ok(None)
        }
        Command::Topdown(o) => {
            let cfg = o.into_config()?;
            let bundle = runner::run_topdown(&cfg)?;
            Ok(summarize(&bundle, &cfg.output_dir))
        }
        Command::Direct(o) => {
            let cfg = o.into_config()?;
            let bundle = runner::run_direct(&cfg)?;
            Ok(summarize(&bundle, &cfg.output_dir))
        }
        Command::SampleStudy(o) => {
            let cfg = o.into_config()?;
            let bundle = runner::run_sampling_study(&cfg)?;
            println!(
                "{} draws over {} series; curve written to {}",
                bundle.rows.len(),
                bundle.population,
                cfg.output_dir.join("sampling_curve.csv").display()
            );
            Ok(None)
        }
        Command::Ensemble(o) => {
            let cfg = o.into_config()?;
            let bundle = runner::run_fold_ensemble(&cfg)?;
            Ok(summarize(&bundle, &cfg.output_dir))
        }
        Command::Eval(o) => {
            let cfg = o.into_config()?;
            let bundle = runner::run_eval(&cfg)?;
            Ok(summarize(&bundle, &cfg.output_dir))
        }
        Command::EmitPlots(o) => {
            let cfg = o.into_config()?;
            runner::emit_plot_data(&cfg.output_dir)?;
            println!("plot data written to {}", cfg.output_dir.display());
            Ok(None)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // flag and usage mistakes are configuration errors
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help and --version land here
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli.command) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(code)) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
