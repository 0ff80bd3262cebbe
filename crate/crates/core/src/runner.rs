//! End-to-end experiment drivers behind the command-line interface: the
//! top-down pipeline, the subsampling study, the fold ensemble, and the
//! plot-data emitters.

use std::collections::BTreeMap;
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::classify::{partition_by_class, write_demand_classes_csv, DemandClass};
use crate::config::{ExperimentConfig, ModelChoice};
use crate::error::{Error, Result};
use crate::eval::{
    mse, spl, write_metrics_csv, wspl, MetricRow, SplReport,
};
use crate::features::{embed, recursive_forecast, ForecastPath, PointModel};
use crate::gbt::{fit_gbt, fit_gbt_negbin, save_gbt, LossKind};
use crate::linear::{fit_lasso, save_linear, solve_ols, NormalAccumulator};
use crate::series::{ingest_long_csv, read_hierarchy_csv, Dataset, IngestOptions, Level, SalesSeries};
use crate::topdown::{
    compute_proportions, disaggregate, estimate_params, estimate_params_shared_p, quantiles,
    write_params_csv, write_quantile_csv, DistChoice, DistributionParams, ProportionMap,
};

/// Per-class outcome collection. A class that fails is recorded and skipped;
/// the remaining classes still run.
#[derive(Debug, Default)]
pub struct RunBundle {
    pub metrics: Vec<MetricRow>,
    pub failures: Vec<(DemandClass, Error)>,
    /// Lag-matrix row counts per fold, per class (fold-ensemble runs only).
    pub fold_rows: BTreeMap<DemandClass, Vec<u64>>,
}

impl RunBundle {
    /// First recorded failure, for the process exit code.
    pub fn first_failure(&self) -> Option<&Error> {
        self.failures.first().map(|(_, e)| e)
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let lower = ingest_long_csv(&cfg.sales, &IngestOptions::default())?;
    let hierarchy_path = cfg.hierarchy.as_ref().ok_or_else(|| {
        Error::Config("this command needs hierarchy=<path> (lower_id,aggregate_id)".into())
    })?;
    let parent_of = read_hierarchy_csv(hierarchy_path)?;
    Dataset::assemble(lower, &parent_of, cfg.horizon)
}

/// Fit the configured global model on the given series and save it in the
/// class directory.
fn fit_global_model(
    cfg: &ExperimentConfig,
    series: &[SalesSeries],
    train_end: usize,
    dir: &Path,
) -> Result<Box<dyn PointModel>> {
    match cfg.model {
        ModelChoice::Pr => {
            let mut acc = NormalAccumulator::new(cfg.n_lags);
            for s in series {
                acc.add_series(s, train_end, cfg.pad)?;
            }
            let model = solve_ols(&acc, None)?;
            save_linear(&model, &dir.join("model_linear.txt"))?;
            Ok(Box::new(model))
        }
        ModelChoice::Lasso => {
            let matrix = embed(series, train_end, cfg.n_lags, cfg.pad)?;
            let model = fit_lasso(&matrix, None, 5, cfg.seed)?;
            save_linear(&model, &dir.join("model_linear.txt"))?;
            Ok(Box::new(model))
        }
        _ => {
            let matrix = embed(series, train_end, cfg.n_lags, cfg.pad)?;
            let loss = cfg.gbt_loss().expect("non-linear model must map to a loss");
            let params = cfg.gbt_params();
            let model = if matches!(loss, LossKind::NegBin(_)) {
                let fit = fit_gbt_negbin(&matrix, &params, None, 20)?;
                if !fit.converged {
                    log::warn!("dispersion loop did not converge; using best iterate");
                }
                fit.model
            } else {
                fit_gbt(&matrix, loss, &params)?
            };
            save_gbt(&model, &dir.join("model_gbt.txt"))?;
            Ok(Box::new(model))
        }
    }
}

fn truth_f64(dataset: &Dataset, series: &SalesSeries) -> Vec<f64> {
    dataset.test_values(series).iter().map(|&v| v as f64).collect()
}

fn group_label(level: Level, class: DemandClass) -> String {
    format!("{}:{}", level.as_str(), class.as_str())
}

/// Metrics rows for one (level, class) evaluation: WSPL over the quantile
/// sets plus the point-forecast MSE.
fn level_metrics(
    level: Level,
    class: DemandClass,
    model: &str,
    reports: &[SplReport],
    truth: &[Vec<f64>],
    points: &[Vec<f64>],
) -> Result<Vec<MetricRow>> {
    let summary = wspl(reports)?;
    let group = group_label(level, class);
    Ok(vec![
        MetricRow {
            group: group.clone(),
            model: model.to_string(),
            metric: "wspl".into(),
            value: summary.wspl,
            n_series: summary.n_valid,
            n_omitted: summary.n_omitted,
        },
        MetricRow {
            group,
            model: model.to_string(),
            metric: "mse".into(),
            value: mse(truth, points)?,
            n_series: truth.len(),
            n_omitted: 0,
        },
    ])
}

fn class_series<'a>(
    dataset: &'a Dataset,
    level: Level,
    ids: &[String],
) -> Vec<&'a SalesSeries> {
    ids.iter().filter_map(|id| dataset.find(level, id)).collect()
}

fn run_topdown_class(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    proportions: &ProportionMap,
    class: DemandClass,
    agg_ids: &[String],
) -> Result<Vec<MetricRow>> {
    let class_dir = cfg.output_dir.join(class.as_str());
    std::fs::create_dir_all(&class_dir)?;
    let aggs = class_series(dataset, Level::Aggregate, agg_ids);
    let owned: Vec<SalesSeries> = aggs.iter().map(|&s| s.clone()).collect();
    let model = fit_global_model(cfg, &owned, dataset.train_end, &class_dir)?;

    let mut paths_a = Vec::with_capacity(aggs.len());
    for s in &aggs {
        paths_a.push(recursive_forecast(model.as_ref(), s, dataset.train_end, dataset.horizon, cfg.n_lags)?);
    }

    // distribution layer at the aggregate level
    let mut params_a = Vec::with_capacity(aggs.len());
    for (s, path) in aggs.iter().zip(&paths_a) {
        params_a.push(estimate_params(path, s, dataset.train_end, cfg.dist, cfg.variance_window)?);
    }
    let qsets_a: Vec<_> = params_a
        .iter()
        .map(|p| quantiles(p, &cfg.levels))
        .collect::<Result<_>>()?;

    // share out to the children and repeat the layer at the lower level
    let mut paths_l: Vec<ForecastPath> = Vec::new();
    let mut params_l: Vec<DistributionParams> = Vec::new();
    for (agg_path, agg_params) in paths_a.iter().zip(&params_a) {
        for child_path in disaggregate(agg_path, proportions)? {
            let child = dataset.find(Level::Lower, &child_path.series_id).ok_or_else(|| {
                Error::Data(format!("lower series {} missing", child_path.series_id))
            })?;
            let p = if cfg.shared_p && cfg.dist == DistChoice::NegBin {
                estimate_params_shared_p(&child_path, agg_params)?
            } else {
                estimate_params(&child_path, child, dataset.train_end, cfg.dist, cfg.variance_window)?
            };
            params_l.push(p);
            paths_l.push(child_path);
        }
    }
    let qsets_l: Vec<_> = params_l
        .iter()
        .map(|p| quantiles(p, &cfg.levels))
        .collect::<Result<_>>()?;

    write_quantile_csv(&qsets_a, &class_dir.join("quantiles_A.csv"))?;
    write_quantile_csv(&qsets_l, &class_dir.join("quantiles_L.csv"))?;
    write_params_csv(&params_a, &class_dir.join("params_A.csv"))?;
    write_params_csv(&params_l, &class_dir.join("params_L.csv"))?;

    // evaluate both levels against the held-out horizon
    let mut rows = Vec::new();
    let mut reports = Vec::with_capacity(aggs.len());
    let mut truth = Vec::with_capacity(aggs.len());
    for (s, q) in aggs.iter().zip(&qsets_a) {
        truth.push(truth_f64(dataset, s));
        reports.push(spl(truth.last().unwrap(), q, s, dataset.train_end)?);
    }
    let points: Vec<Vec<f64>> = paths_a.iter().map(|p| p.values.clone()).collect();
    rows.extend(level_metrics(Level::Aggregate, class, cfg.model.as_str(), &reports, &truth, &points)?);

    let mut reports = Vec::with_capacity(paths_l.len());
    let mut truth = Vec::with_capacity(paths_l.len());
    for (path, q) in paths_l.iter().zip(&qsets_l) {
        let s = dataset
            .find(Level::Lower, &path.series_id)
            .expect("checked during disaggregation");
        truth.push(truth_f64(dataset, s));
        reports.push(spl(truth.last().unwrap(), q, s, dataset.train_end)?);
    }
    let points: Vec<Vec<f64>> = paths_l.iter().map(|p| p.values.clone()).collect();
    rows.extend(level_metrics(Level::Lower, class, cfg.model.as_str(), &reports, &truth, &points)?);
    Ok(rows)
}

/// Classify the dataset and write the per-series class table.
pub fn run_classify(cfg: &ExperimentConfig) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.write_manifest()?;
    write_demand_classes_csv(
        &cfg.output_dir.join("demand_classes.csv"),
        &dataset,
        &cfg.classify_options(),
    )
}

/// Forecast at the aggregate level per demand class, disaggregate by
/// historical proportions, wrap both levels in count distributions, and
/// score them. Each class is trained and evaluated independently.
pub fn run_topdown(cfg: &ExperimentConfig) -> Result<RunBundle> {
    let dataset = load_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.write_manifest()?;
    let opts = cfg.classify_options();
    write_demand_classes_csv(&cfg.output_dir.join("demand_classes.csv"), &dataset, &opts)?;
    let partition = partition_by_class(&dataset, Level::Aggregate, &opts);
    let proportions = compute_proportions(&dataset)?;

    let mut bundle = RunBundle::default();
    for class in cfg.class_filter.classes() {
        let ids = partition.ids(class);
        if ids.is_empty() {
            log::info!("class {} has no aggregates; skipping", class.as_str());
            continue;
        }
        match run_topdown_class(cfg, &dataset, &proportions, class, ids) {
            Ok(rows) => bundle.metrics.extend(rows),
            Err(e) => {
                log::error!("class {} failed: {e}", class.as_str());
                bundle.failures.push((class, e));
            }
        }
    }
    write_metrics_csv(&bundle.metrics, &cfg.output_dir.join("metrics.csv"))?;
    Ok(bundle)
}

fn run_ensemble_class(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    class: DemandClass,
    lower_ids: &[String],
) -> Result<(Vec<MetricRow>, Vec<u64>)> {
    let k = cfg.folds;
    let series = class_series(dataset, Level::Lower, lower_ids);
    if series.len() < k {
        return Err(Error::Data(format!(
            "class {} has {} series, fewer than {k} folds",
            class.as_str(),
            series.len()
        )));
    }
    let class_dir = cfg.output_dir.join(class.as_str());
    std::fs::create_dir_all(&class_dir)?;

    // disjoint, exhaustive folds from a seeded shuffle
    let mut order: Vec<usize> = (0..series.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut StdRng::seed_from_u64(cfg.seed));
    let mut folds: Vec<Vec<SalesSeries>> = vec![Vec::new(); k];
    for (pos, &idx) in order.iter().enumerate() {
        folds[pos % k].push(series[idx].clone());
    }

    let mut models: Vec<Box<dyn PointModel>> = Vec::with_capacity(k);
    let mut fold_rows = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let fold_dir = class_dir.join(format!("fold{f}"));
        std::fs::create_dir_all(&fold_dir)?;
        let matrix = embed(fold, dataset.train_end, cfg.n_lags, cfg.pad)?;
        fold_rows.push(matrix.n_rows() as u64);
        models.push(fit_global_model(cfg, fold, dataset.train_end, &fold_dir)?);
    }

    // simple average of the member forecasts, then the usual layer at L
    let model_name = format!("{}-ens{k}", cfg.model.as_str());
    let mut paths = Vec::with_capacity(series.len());
    let mut params = Vec::with_capacity(series.len());
    for s in &series {
        let mut avg = vec![0.0; dataset.horizon];
        for m in &models {
            let p = recursive_forecast(m.as_ref(), s, dataset.train_end, dataset.horizon, cfg.n_lags)?;
            for (a, v) in avg.iter_mut().zip(&p.values) {
                *a += v / k as f64;
            }
        }
        let path = ForecastPath { series_id: s.id.clone(), values: avg };
        params.push(estimate_params(&path, s, dataset.train_end, cfg.dist, cfg.variance_window)?);
        paths.push(path);
    }
    let qsets: Vec<_> = params.iter().map(|p| quantiles(p, &cfg.levels)).collect::<Result<_>>()?;
    write_quantile_csv(&qsets, &class_dir.join("quantiles_L.csv"))?;
    write_params_csv(&params, &class_dir.join("params_L.csv"))?;

    let mut reports = Vec::with_capacity(series.len());
    let mut truth = Vec::with_capacity(series.len());
    for (s, q) in series.iter().zip(&qsets) {
        truth.push(truth_f64(dataset, s));
        reports.push(spl(truth.last().unwrap(), q, s, dataset.train_end)?);
    }
    let points: Vec<Vec<f64>> = paths.iter().map(|p| p.values.clone()).collect();
    let rows = level_metrics(Level::Lower, class, &model_name, &reports, &truth, &points)?;
    Ok((rows, fold_rows))
}

/// Train one model per disjoint fold of the lower level and average their
/// forecasts, trading one huge lag matrix for `folds` small ones.
pub fn run_fold_ensemble(cfg: &ExperimentConfig) -> Result<RunBundle> {
    if cfg.folds <= 1 {
        return Err(Error::Config("folds must be at least 2".into()));
    }
    let dataset = load_dataset(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.write_manifest()?;
    let opts = cfg.classify_options();
    let partition = partition_by_class(&dataset, Level::Lower, &opts);

    let mut bundle = RunBundle::default();
    for class in cfg.class_filter.classes() {
        let ids = partition.ids(class);
        if ids.is_empty() {
            log::info!("class {} has no lower series; skipping", class.as_str());
            continue;
        }
        match run_ensemble_class(cfg, &dataset, class, ids) {
            Ok((rows, fold_rows)) => {
                bundle.metrics.extend(rows);
                bundle.fold_rows.insert(class, fold_rows);
            }
            Err(e) => {
                log::error!("class {} failed: {e}", class.as_str());
                bundle.failures.push((class, e));
            }
        }
    }
    write_metrics_csv(&bundle.metrics, &cfg.output_dir.join("metrics.csv"))?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join("fold_rows.csv"))?;
    w.write_record(["class", "fold", "n_rows"])?;
    for (class, rows) in &bundle.fold_rows {
        for (f, n) in rows.iter().enumerate() {
            w.write_record([class.as_str(), &f.to_string(), &n.to_string()])?;
        }
    }
    w.flush().map_err(Error::from)?;
    Ok(bundle)
}

/// One subsampling draw result.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingRow {
    pub size: usize,
    pub repeat: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingBundle {
    pub rows: Vec<SamplingRow>,
    pub baseline_mean_mse: f64,
    pub baseline_zero_mse: f64,
    pub population: usize,
}

/// Distinct stream per (size index, repeat) so draws are reproducible
/// regardless of execution order.
fn draw_seed(seed: u64, size_idx: usize, repeat: usize) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(1 + size_idx as u64))
        .wrapping_add(0x517cc1b727220a95u64.wrapping_mul(1 + repeat as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// MSE of pooled-least-squares forecasts over repeated subsamples of a
/// demand-class population, against the class-wide mean and all-zero
/// reference forecasts. Per-series normal-equation blocks are accumulated
/// once and summed per draw, so draw cost is independent of history length.
pub fn run_sampling_study(cfg: &ExperimentConfig) -> Result<SamplingBundle> {
    if cfg.sample_sizes.is_empty() {
        return Err(Error::Config("sample_sizes must list at least one size".into()));
    }
    let all = ingest_long_csv(&cfg.sales, &IngestOptions::default())?;
    let horizon = cfg.horizon;
    let len = all[0].len();
    if len <= horizon {
        return Err(Error::Data(format!(
            "series length {len} leaves no training data before a {horizon}-day holdout"
        )));
    }
    let train_end = len - horizon - 1;

    // population = series of the requested class, by their own statistics
    let opts = cfg.classify_options();
    let wanted = cfg.class_filter.classes();
    let population: Vec<SalesSeries> = all
        .into_iter()
        .filter(|s| {
            crate::classify::demand_stats(s, train_end, &opts)
                .map(|p| wanted.contains(&p.class))
                .unwrap_or(false)
        })
        .collect();
    if population.is_empty() {
        return Err(Error::Data(format!(
            "no series of class {} in {}",
            cfg.class_filter.as_str(),
            cfg.sales.display()
        )));
    }
    let mut sizes = cfg.sample_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    if *sizes.last().unwrap() > population.len() {
        return Err(Error::Config(format!(
            "sample size {} exceeds the population of {}",
            sizes.last().unwrap(),
            population.len()
        )));
    }

    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.write_manifest()?;

    let truth: Vec<Vec<f64>> = population
        .iter()
        .map(|s| s.values[train_end + 1..=train_end + horizon].iter().map(|&v| v as f64).collect())
        .collect();
    let mean_points: Vec<Vec<f64>> = population
        .iter()
        .map(|s| {
            let m = s.values[..=train_end].iter().map(|&v| v as f64).sum::<f64>()
                / (train_end + 1) as f64;
            vec![m; horizon]
        })
        .collect();
    let zero_points: Vec<Vec<f64>> = vec![vec![0.0; horizon]; population.len()];
    let baseline_mean_mse = mse(&truth, &mean_points)?;
    let baseline_zero_mse = mse(&truth, &zero_points)?;

    // one normal-equation block per series, reused across all draws
    let blocks: Vec<NormalAccumulator> = population
        .par_iter()
        .map(|s| {
            let mut acc = NormalAccumulator::new(cfg.n_lags);
            acc.add_series(s, train_end, cfg.pad)?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(si, _)| (0..cfg.repeats).map(move |rep| (si, rep)))
        .collect();
    let rows: Vec<Result<SamplingRow>> = jobs
        .par_iter()
        .map(|&(si, rep)| {
            let size = sizes[si];
            let mut rng = StdRng::seed_from_u64(draw_seed(cfg.seed, si, rep));
            let mut picked = rand::seq::index::sample(&mut rng, population.len(), size).into_vec();
            picked.sort_unstable();
            let mut acc = NormalAccumulator::new(cfg.n_lags);
            for &i in &picked {
                acc.merge(&blocks[i])?;
            }
            let model = solve_ols(&acc, None)?;
            let points: Vec<Vec<f64>> = population
                .iter()
                .map(|s| {
                    recursive_forecast(&model, s, train_end, horizon, cfg.n_lags)
                        .map(|p| p.values)
                })
                .collect::<Result<_>>()?;
            Ok(SamplingRow { size, repeat: rep, mse: mse(&truth, &points)? })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let bundle = SamplingBundle {
        rows,
        baseline_mean_mse,
        baseline_zero_mse,
        population: population.len(),
    };
    write_sampling_curve_csv(&bundle, &cfg.output_dir.join("sampling_curve.csv"))?;
    Ok(bundle)
}

/// Tidy `size,repeat,mse,baseline_mean_mse,baseline_zero_mse` rows.
pub fn write_sampling_curve_csv(bundle: &SamplingBundle, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["size", "repeat", "mse", "baseline_mean_mse", "baseline_zero_mse"])?;
    for row in &bundle.rows {
        w.write_record([
            row.size.to_string(),
            row.repeat.to_string(),
            row.mse.to_string(),
            bundle.baseline_mean_mse.to_string(),
            bundle.baseline_zero_mse.to_string(),
        ])?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

/// Leaderboard of WSPL rows, best first; ties break on group then model.
pub fn write_leaderboard_csv(metrics: &[MetricRow], path: &Path) -> Result<()> {
    let mut rows: Vec<&MetricRow> = metrics.iter().filter(|r| r.metric == "wspl").collect();
    rows.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then_with(|| a.group.cmp(&b.group))
            .then_with(|| a.model.cmp(&b.model))
    });
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "group", "wspl", "n_series", "n_omitted"])?;
    for r in rows {
        w.write_record([
            r.model.as_str(),
            r.group.as_str(),
            &r.value.to_string(),
            &r.n_series.to_string(),
            &r.n_omitted.to_string(),
        ])?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

/// Parse a metrics.csv back into rows (used by the plot emitter).
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let expect = ["group", "model", "metric", "value", "n_series", "n_omitted"];
    let head = r.headers()?.clone();
    if head.iter().collect::<Vec<_>>() != expect {
        return Err(Error::Data(format!(
            "{}: expected header {}, got {}",
            path.display(),
            expect.join(","),
            head.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default().to_string();
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or_default()
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad number in {:?}", path.display(), rec)))
        };
        out.push(MetricRow {
            group: field(0),
            model: field(1),
            metric: field(2),
            value: num(3)?,
            n_series: num(4)? as usize,
            n_omitted: num(5)? as usize,
        });
    }
    Ok(out)
}

/// Lower-level series grouped by demand class. With a hierarchy file the
/// classes are inherited from each series' aggregate; without one every
/// series is classified on its own history.
struct Population {
    series: Vec<SalesSeries>,
    train_end: usize,
    horizon: usize,
    by_class: BTreeMap<DemandClass, Vec<usize>>,
}

fn lower_population(cfg: &ExperimentConfig) -> Result<Population> {
    if cfg.hierarchy.is_some() {
        let dataset = load_dataset(cfg)?;
        let opts = cfg.classify_options();
        let partition = partition_by_class(&dataset, Level::Lower, &opts);
        let mut series = Vec::new();
        let mut by_class = BTreeMap::new();
        for class in DemandClass::ALL {
            let ids = partition.ids(class);
            if ids.is_empty() {
                continue;
            }
            let mut idxs = Vec::with_capacity(ids.len());
            for id in ids {
                let s = dataset
                    .find(Level::Lower, id)
                    .expect("partition ids come from the dataset");
                idxs.push(series.len());
                series.push(s.clone());
            }
            by_class.insert(class, idxs);
        }
        Ok(Population {
            series,
            train_end: dataset.train_end,
            horizon: dataset.horizon,
            by_class,
        })
    } else {
        let series = ingest_long_csv(&cfg.sales, &IngestOptions::default())?;
        let len = series[0].len();
        if len <= cfg.horizon {
            return Err(Error::Data(format!(
                "series length {len} leaves no training data before a {}-day holdout",
                cfg.horizon
            )));
        }
        let train_end = len - cfg.horizon - 1;
        let opts = cfg.classify_options();
        let mut by_class: BTreeMap<DemandClass, Vec<usize>> = BTreeMap::new();
        for (i, s) in series.iter().enumerate() {
            if let Ok(profile) = crate::classify::demand_stats(s, train_end, &opts) {
                by_class.entry(profile.class).or_default().push(i);
            }
        }
        Ok(Population { series, train_end, horizon: cfg.horizon, by_class })
    }
}

fn pop_truth(pop: &Population, idxs: &[usize]) -> Vec<Vec<f64>> {
    idxs.iter()
        .map(|&i| {
            pop.series[i].values[pop.train_end + 1..=pop.train_end + pop.horizon]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect()
}

fn eval_class(
    cfg: &ExperimentConfig,
    pop: &Population,
    class: DemandClass,
    idxs: &[usize],
) -> Result<Vec<MetricRow>> {
    use crate::eval::{baseline_forecast, BaselineKind};
    let group = group_label(Level::Lower, class);
    let truth = pop_truth(pop, idxs);
    let mut rows = Vec::new();
    let baselines = [
        BaselineKind::Mean,
        BaselineKind::Naive,
        BaselineKind::SNaive { period: 7 },
        BaselineKind::Drift,
    ];
    for kind in baselines {
        let mut reports = Vec::with_capacity(idxs.len());
        let mut points = Vec::with_capacity(idxs.len());
        for (&i, t) in idxs.iter().zip(&truth) {
            let s = &pop.series[i];
            let (path, qset) =
                baseline_forecast(kind, s, pop.train_end, pop.horizon, &cfg.levels)?;
            reports.push(spl(t, &qset, s, pop.train_end)?);
            points.push(path.values);
        }
        rows.extend(level_metrics(Level::Lower, class, kind.as_str(), &reports, &truth, &points)?);
    }
    // empirical training quantiles carry no point forecast, so no mse row
    let mut reports = Vec::with_capacity(idxs.len());
    for (&i, t) in idxs.iter().zip(&truth) {
        let s = &pop.series[i];
        let qset = crate::topdown::in_sample_quantiles(s, pop.train_end, &cfg.levels, pop.horizon)?;
        reports.push(spl(t, &qset, s, pop.train_end)?);
    }
    let summary = wspl(&reports)?;
    rows.push(MetricRow {
        group,
        model: "insample".into(),
        metric: "wspl".into(),
        value: summary.wspl,
        n_series: summary.n_valid,
        n_omitted: summary.n_omitted,
    });
    Ok(rows)
}

/// Score the reference forecasters (mean, naive, weekly seasonal naive,
/// drift, and raw training quantiles) per demand class.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<RunBundle> {
    let pop = lower_population(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.write_manifest()?;
    let mut bundle = RunBundle::default();
    for class in cfg.class_filter.classes() {
        let Some(idxs) = pop.by_class.get(&class) else { continue };
        match eval_class(cfg, &pop, class, idxs) {
            Ok(rows) => bundle.metrics.extend(rows),
            Err(e) => {
                log::error!("class {} failed: {e}", class.as_str());
                bundle.failures.push((class, e));
            }
        }
    }
    write_metrics_csv(&bundle.metrics, &cfg.output_dir.join("metrics.csv"))?;
    write_leaderboard_csv(&bundle.metrics, &cfg.output_dir.join("leaderboard.csv"))?;
    Ok(bundle)
}

fn direct_class(
    cfg: &ExperimentConfig,
    pop: &Population,
    class: DemandClass,
    idxs: &[usize],
) -> Result<Vec<MetricRow>> {
    use crate::eval::direct_quantile_gbt;
    let series: Vec<SalesSeries> = idxs.iter().map(|&i| pop.series[i].clone()).collect();
    let result = direct_quantile_gbt(
        &series,
        pop.train_end,
        cfg.n_lags,
        cfg.pad,
        &cfg.levels,
        pop.horizon,
        &cfg.gbt_params(),
    )?;
    debug_assert_eq!(result.models_fitted, pop.horizon * cfg.levels.len());
    let class_dir = cfg.output_dir.join(class.as_str());
    std::fs::create_dir_all(&class_dir)?;
    write_quantile_csv(&result.sets, &class_dir.join("quantiles_direct.csv"))?;

    let truth = pop_truth(pop, idxs);
    let mut reports = Vec::with_capacity(series.len());
    for ((s, q), t) in series.iter().zip(&result.sets).zip(&truth) {
        reports.push(spl(t, q, s, pop.train_end)?);
    }
    let summary = wspl(&reports)?;
    Ok(vec![MetricRow {
        group: group_label(Level::Lower, class),
        model: "gbt-direct".into(),
        metric: "wspl".into(),
        value: summary.wspl,
        n_series: summary.n_valid,
        n_omitted: summary.n_omitted,
    }])
}

/// Direct multi-horizon benchmark: an independent pinball-loss boosted
/// model per (quantile level, step) instead of one recursive point model
/// plus a distribution layer.
pub fn run_direct(cfg: &ExperimentConfig) -> Result<RunBundle> {
    let pop = lower_population(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    cfg.write_manifest()?;
    let mut bundle = RunBundle::default();
    for class in cfg.class_filter.classes() {
        let Some(idxs) = pop.by_class.get(&class) else { continue };
        match direct_class(cfg, &pop, class, idxs) {
            Ok(rows) => bundle.metrics.extend(rows),
            Err(e) => {
                log::error!("class {} failed: {e}", class.as_str());
                bundle.failures.push((class, e));
            }
        }
    }
    write_metrics_csv(&bundle.metrics, &cfg.output_dir.join("metrics.csv"))?;
    Ok(bundle)
}

/// Rebuild the plot-ready artifacts from a finished run directory.
pub fn emit_plot_data(output_dir: &Path) -> Result<()> {
    let metrics_path = output_dir.join("metrics.csv");
    let mut emitted = false;
    if metrics_path.exists() {
        let metrics = read_metrics_csv(&metrics_path)?;
        write_leaderboard_csv(&metrics, &output_dir.join("leaderboard.csv"))?;
        emitted = true;
    }
    if output_dir.join("sampling_curve.csv").exists() {
        emitted = true;
    }
    if !emitted {
        return Err(Error::Data(format!(
            "{}: no metrics.csv or sampling_curve.csv to plot from",
            output_dir.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ClassFilter;
    use crate::series::write_long_csv;
    use chrono::NaiveDate;
    use rand::Rng;
    use rand_distr::{Distribution, Poisson};
    use std::path::PathBuf;

    fn day0() -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 6, 1).unwrap()
    }

    /// Two aggregates with two children each, Poisson-ish demand.
    fn toy_files(dir: &Path, days: usize, seed: u64) -> (PathBuf, PathBuf) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut lower = Vec::new();
        let mut mapping = Vec::new();
        for (agg, rates) in [("g1", [2.0, 4.0]), ("g2", [1.0, 3.0])] {
            for (c, &rate) in rates.iter().enumerate() {
                let id = format!("{agg}_c{c}");
                let values: Vec<u32> = (0..days)
                    .map(|_| Poisson::new(rate).unwrap().sample(&mut rng) as u32)
                    .collect();
                lower.push(SalesSeries::new(id.clone(), day0(), values));
                mapping.push((id, agg.to_string()));
            }
        }
        let sales = dir.join("sales.csv");
        write_long_csv(&sales, &lower).unwrap();
        let hier = dir.join("hierarchy.csv");
        let mut text = String::from("lower_id,aggregate_id\n");
        for (l, a) in mapping {
            text.push_str(&format!("{l},{a}\n"));
        }
        std::fs::write(&hier, text).unwrap();
        (sales, hier)
    }

    fn toy_config(dir: &Path, sales: PathBuf, hier: PathBuf) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(crate::config::Profile::Generic);
        cfg.sales = sales;
        cfg.hierarchy = Some(hier);
        cfg.output_dir = dir.join("out");
        cfg.horizon = 7;
        cfg.n_lags = 5;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn topdown_toy_run_emits_coherent_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let (sales, hier) = toy_files(dir.path(), 120, 1);
        let cfg = toy_config(dir.path(), sales, hier);
        let bundle = run_topdown(&cfg).unwrap();
        assert!(bundle.failures.is_empty(), "{:?}", bundle.failures);
        assert!(!bundle.metrics.is_empty());
        for name in ["manifest.txt", "demand_classes.csv", "metrics.csv"] {
            assert!(cfg.output_dir.join(name).exists(), "missing {name}");
        }
        // every metric row carries a level:class group and our model name
        for row in &bundle.metrics {
            assert!(row.group.starts_with("A:") || row.group.starts_with("L:"));
            assert_eq!(row.model, "pr");
        }
    }

    #[test]
    fn topdown_rerun_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (sales, hier) = toy_files(dir.path(), 120, 2);
        let mut cfg = toy_config(dir.path(), sales, hier);
        run_topdown(&cfg).unwrap();
        let first = std::fs::read(cfg.output_dir.join("metrics.csv")).unwrap();
        cfg.output_dir = dir.path().join("out2");
        run_topdown(&cfg).unwrap();
        let second = std::fs::read(cfg.output_dir.join("metrics.csv")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn disaggregated_quantile_artifacts_cover_all_children() {
        let dir = tempfile::tempdir().unwrap();
        let (sales, hier) = toy_files(dir.path(), 120, 4);
        let cfg = toy_config(dir.path(), sales, hier);
        run_topdown(&cfg).unwrap();
        let mut child_rows = 0;
        for class in DemandClass::ALL {
            let p = cfg.output_dir.join(class.as_str()).join("quantiles_L.csv");
            if p.exists() {
                child_rows += std::fs::read_to_string(p).unwrap().lines().count() - 1;
            }
        }
        // 4 children × 7 steps × 2 levels of quantiles
        assert_eq!(child_rows, 4 * 7 * 2);
    }

    #[test]
    fn sampling_study_prefers_larger_samples_on_homogeneous_data() {
        let dir = tempfile::tempdir().unwrap();
        // AR(1)-ish homogeneous counts so pooling more series helps
        let mut rng = StdRng::seed_from_u64(7);
        let mut series = Vec::new();
        for i in 0..40 {
            let mut values = vec![3u32];
            for _ in 1..100 {
                let prev = *values.last().unwrap() as f64;
                let rate = (0.5 + 0.8 * prev).max(0.05);
                values.push(Poisson::new(rate).unwrap().sample(&mut rng) as u32);
            }
            series.push(SalesSeries::new(format!("s{i:02}"), day0(), values));
        }
        let sales = dir.path().join("sales.csv");
        write_long_csv(&sales, &series).unwrap();

        let mut cfg = ExperimentConfig::defaults(crate::config::Profile::Generic);
        cfg.sales = sales;
        cfg.output_dir = dir.path().join("out");
        cfg.horizon = 7;
        cfg.n_lags = 3;
        cfg.sample_sizes = vec![2, 40];
        cfg.repeats = 8;
        cfg.seed = 11;
        let bundle = run_sampling_study(&cfg).unwrap();
        assert_eq!(bundle.rows.len(), 16);
        let mean_at = |size: usize| {
            let v: Vec<f64> =
                bundle.rows.iter().filter(|r| r.size == size).map(|r| r.mse).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(
            mean_at(40) <= mean_at(2),
            "full-sample MSE {} should not exceed tiny-sample MSE {}",
            mean_at(40),
            mean_at(2)
        );
        assert!(cfg.output_dir.join("sampling_curve.csv").exists());
    }

    #[test]
    fn sampling_degenerate_draw_equals_full_fit() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let series: Vec<SalesSeries> = (0..6)
            .map(|i| {
                SalesSeries::new(
                    format!("s{i}"),
                    day0(),
                    (0..60).map(|_| rng.random_range(0u32..7)).collect(),
                )
            })
            .collect();
        let sales = dir.path().join("sales.csv");
        write_long_csv(&sales, &series).unwrap();

        let mut cfg = ExperimentConfig::defaults(crate::config::Profile::Generic);
        cfg.sales = sales;
        cfg.output_dir = dir.path().join("out");
        cfg.horizon = 5;
        cfg.n_lags = 3;
        cfg.sample_sizes = vec![6];
        cfg.repeats = 2;
        let bundle = run_sampling_study(&cfg).unwrap();
        // drawing the whole population leaves nothing to vary
        assert_eq!(bundle.rows[0].mse, bundle.rows[1].mse);

        // zero-forecast reference is the mean of squared truths
        let train_end = 60 - 5 - 1;
        let mut expect = 0.0;
        for s in &series {
            expect += s.values[train_end + 1..]
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                / 5.0;
        }
        expect /= series.len() as f64;
        assert!((bundle.baseline_zero_mse - expect).abs() < 1e-12);
    }

    #[test]
    fn oversized_sample_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (sales, _) = toy_files(dir.path(), 60, 9);
        let mut cfg = ExperimentConfig::defaults(crate::config::Profile::Generic);
        cfg.sales = sales;
        cfg.output_dir = dir.path().join("out");
        cfg.horizon = 5;
        cfg.n_lags = 3;
        cfg.sample_sizes = vec![500];
        cfg.repeats = 1;
        assert!(matches!(run_sampling_study(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn fold_ensemble_covers_every_series_exactly_once() {
        let dir = tempfile::tempdir().unwrap();
        let (sales, hier) = toy_files(dir.path(), 120, 6);
        let mut cfg = toy_config(dir.path(), sales, hier);
        cfg.folds = 2;
        let bundle = run_fold_ensemble(&cfg).unwrap();
        assert!(bundle.failures.is_empty(), "{:?}", bundle.failures);
        for rows in bundle.fold_rows.values() {
            assert_eq!(rows.len(), 2);
            // the toy classes have 4 children × 113 training rows
            let total: u64 = rows.iter().sum();
            assert!(rows.iter().all(|&r| r > 0));
            assert_eq!(total % 113, 0);
        }
        assert!(cfg.output_dir.join("fold_rows.csv").exists());

        let mut bad = toy_config(dir.path(), PathBuf::new(), PathBuf::new());
        bad.folds = 1;
        assert!(matches!(run_fold_ensemble(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn leaderboard_sorts_ascending_by_wspl() {
        let rows = vec![
            MetricRow { group: "A:smooth".into(), model: "pr".into(), metric: "wspl".into(), value: 0.9, n_series: 2, n_omitted: 0 },
            MetricRow { group: "A:smooth".into(), model: "pr".into(), metric: "mse".into(), value: 9.0, n_series: 2, n_omitted: 0 },
            MetricRow { group: "L:smooth".into(), model: "lasso".into(), metric: "wspl".into(), value: 0.4, n_series: 2, n_omitted: 0 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("leaderboard.csv");
        write_leaderboard_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "model,group,wspl,n_series,n_omitted");
        assert!(lines[1].starts_with("lasso,L:smooth,0.4"));
        assert!(lines[2].starts_with("pr,A:smooth,0.9"));
        assert_eq!(lines.len(), 3, "non-wspl rows must not leak in");
    }

    #[test]
    fn plot_emission_round_trips_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![MetricRow {
            group: "L:lumpy".into(),
            model: "pr".into(),
            metric: "wspl".into(),
            value: 0.5,
            n_series: 3,
            n_omitted: 1,
        }];
        write_metrics_csv(&rows, &dir.path().join("metrics.csv")).unwrap();
        emit_plot_data(dir.path()).unwrap();
        let board = std::fs::read_to_string(dir.path().join("leaderboard.csv")).unwrap();
        assert!(board.contains("pr,L:lumpy,0.5,3,1"));
        assert_eq!(read_metrics_csv(&dir.path().join("metrics.csv")).unwrap(), rows);

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(emit_plot_data(empty.path()), Err(Error::Data(_))));
    }

    #[test]
    fn eval_scores_all_reference_models_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let (sales, hier) = toy_files(dir.path(), 120, 10);
        let cfg = toy_config(dir.path(), sales, hier);
        let bundle = run_eval(&cfg).unwrap();
        assert!(bundle.failures.is_empty(), "{:?}", bundle.failures);
        let models: std::collections::BTreeSet<&str> =
            bundle.metrics.iter().map(|r| r.model.as_str()).collect();
        for m in ["mean", "naive", "snaive", "drift", "insample"] {
            assert!(models.contains(m), "missing {m} rows");
        }
        // point baselines get an mse row, the quantile-only one does not
        assert!(bundle
            .metrics
            .iter()
            .any(|r| r.model == "drift" && r.metric == "mse"));
        assert!(!bundle
            .metrics
            .iter()
            .any(|r| r.model == "insample" && r.metric == "mse"));
        assert!(cfg.output_dir.join("leaderboard.csv").exists());
    }

    #[test]
    fn eval_without_hierarchy_classifies_each_series_alone() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![
            named_series("flat", &[4; 60]),
            named_series("spiky", &{
                let mut v = [0u32; 60];
                for i in (0..60).step_by(9) {
                    v[i] = 7;
                }
                v
            }),
        ];
        let sales = dir.path().join("sales.csv");
        write_long_csv(&sales, &series).unwrap();
        let mut cfg = ExperimentConfig::defaults(crate::config::Profile::Generic);
        cfg.sales = sales;
        cfg.output_dir = dir.path().join("out");
        cfg.horizon = 5;
        cfg.n_lags = 3;
        let bundle = run_eval(&cfg).unwrap();
        // the flat series has no one-step movement, so its class errors out
        // of the weighted score while the lumpy one still succeeds
        assert!(bundle
            .failures
            .iter()
            .any(|(c, e)| *c == DemandClass::Smooth && e.exit_code() == 3));
        assert!(bundle.metrics.iter().any(|r| r.group == "L:lumpy"));
    }

    fn named_series(id: &str, values: &[u32]) -> SalesSeries {
        SalesSeries::new(id.to_string(), day0(), values.to_vec())
    }

    #[test]
    fn direct_benchmark_writes_sorted_quantile_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (sales, hier) = toy_files(dir.path(), 100, 12);
        let mut cfg = toy_config(dir.path(), sales, hier);
        cfg.horizon = 4;
        cfg.n_lags = 4;
        let bundle = run_direct(&cfg).unwrap();
        assert!(bundle.failures.is_empty(), "{:?}", bundle.failures);
        assert!(bundle.metrics.iter().all(|r| r.model == "gbt-direct"));
        let mut found = false;
        for class in DemandClass::ALL {
            let p = cfg.output_dir.join(class.as_str()).join("quantiles_direct.csv");
            if p.exists() {
                found = true;
                let text = std::fs::read_to_string(p).unwrap();
                assert_eq!(text.lines().next().unwrap(), "series_id,step,u,quantile");
            }
        }
        assert!(found, "no class produced a quantile file");
    }

    #[test]
    fn class_filter_restricts_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let (sales, hier) = toy_files(dir.path(), 120, 8);
        let mut cfg = toy_config(dir.path(), sales, hier);
        cfg.class_filter = ClassFilter::One(DemandClass::Lumpy);
        let bundle = run_topdown(&cfg).unwrap();
        // the toy generator makes smooth-ish series, so lumpy is empty
        assert!(bundle.metrics.is_empty());
        assert!(bundle.failures.is_empty());
        let metrics = std::fs::read_to_string(cfg.output_dir.join("metrics.csv")).unwrap();
        assert_eq!(metrics, "group,model,metric,value,n_series,n_omitted\n");
    }
}
