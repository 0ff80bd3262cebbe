//! Python bindings for the demandcast core: demand classification, count
//! quantiles, top-down splits, scaled pinball scores, and the pooled
//! global models (least squares and boosted trees).
//!
//! Scalar and vector arguments cross the boundary as plain lists and
//! tuples; errors surface as `ValueError` except numeric breakdowns,
//! which raise `ArithmeticError`.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use demandcast::classify::ClassifyOptions;
use demandcast::dist::CountDist;
use demandcast::features::{recursive_forecast, ForecastPath, LagMatrix, PointModel};
use demandcast::gbt::loss::empirical_quantile as type1_quantile;
use demandcast::gbt::{fit_gbt, fit_gbt_negbin, GbtModel, GbtParams, LossKind};
use demandcast::linear::{solve_ols, LinearModel, NormalAccumulator};
use demandcast::series::{Dataset, SalesSeries};
use demandcast::topdown::{compute_proportions, disaggregate, QuantileForecastSet};
use demandcast::{classify, eval, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) | Error::Csv(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Data(_) => PyValueError::new_err(e.to_string()),
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> PyResult<()> {
    if cond {
        Ok(())
    } else {
        Err(PyValueError::new_err(msg.into()))
    }
}

/// The bound operations never look at calendar dates, so every series gets
/// the same anchor.
fn mk_series(id: &str, values: Vec<u32>) -> SalesSeries {
    SalesSeries::new(id, NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(), values)
}

/// Resolve an optional inclusive training cutoff against the series length.
fn resolve_train_end(len: usize, train_end: Option<usize>) -> PyResult<usize> {
    ensure(len > 0, "series must not be empty")?;
    let end = train_end.unwrap_or(len - 1);
    ensure(end < len, format!("train_end {end} out of range for {len} observations"))?;
    Ok(end)
}

/// Average demand interval and squared coefficient of variation of one
/// series of daily counts, with its demand class.
///
/// Returns `(adi, cv2, class)` where class is one of `smooth`, `erratic`,
/// `intermittent`, `lumpy`. Statistics run from the first sale through
/// `train_end` (default: the last observation).
#[pyfunction]
#[pyo3(signature = (values, train_end=None, adi_threshold=1.32, cv2_threshold=0.49, nonzero_sizes_only=false))]
fn demand_stats(
    values: Vec<u32>,
    train_end: Option<usize>,
    adi_threshold: f64,
    cv2_threshold: f64,
    nonzero_sizes_only: bool,
) -> PyResult<(f64, f64, String)> {
    let s = mk_series("series", values);
    let end = resolve_train_end(s.len(), train_end)?;
    let opts = ClassifyOptions { adi_threshold, cv2_threshold, nonzero_sizes_only };
    let p = classify::demand_stats(&s, end, &opts).map_err(py_err)?;
    Ok((p.adi, p.cv2, p.class.as_str().to_string()))
}

/// Negative-binomial negative log likelihood of raw (log-mean) scores
/// against observed counts, summed over samples.
#[pyfunction]
fn nb_nll(targets: Vec<f64>, scores: Vec<f64>, r: f64) -> PyResult<f64> {
    ensure(
        targets.len() == scores.len(),
        format!("{} targets but {} scores", targets.len(), scores.len()),
    )?;
    demandcast::gbt::nb_nll(&targets, &scores, r).map_err(py_err)
}

/// Gradient and hessian of one negative-binomial likelihood term with
/// respect to the raw score.
#[pyfunction]
fn nb_grad_hess(target: f64, score: f64, r: f64) -> PyResult<(f64, f64)> {
    let loss = LossKind::NegBin(r);
    loss.validate().map_err(py_err)?;
    loss.grad_hess(target, score).map_err(py_err)
}

/// Integer quantiles of a Poisson count distribution at ascending levels.
#[pyfunction]
fn poisson_quantiles(mean: f64, levels: Vec<f64>) -> PyResult<Vec<u64>> {
    let d = CountDist::poisson(mean).map_err(py_err)?;
    d.quantile_set(&levels).map_err(py_err)
}

/// Integer quantiles of a negative-binomial count distribution with
/// dispersion `r` and success probability `p`, at ascending levels.
#[pyfunction]
fn negbin_quantiles(r: f64, p: f64, levels: Vec<f64>) -> PyResult<Vec<u64>> {
    let d = CountDist::negbin(r, p).map_err(py_err)?;
    d.quantile_set(&levels).map_err(py_err)
}

/// Smallest observed value whose empirical CDF reaches `u`.
#[pyfunction]
fn empirical_quantile(values: Vec<f64>, u: f64) -> PyResult<f64> {
    ensure(!values.is_empty(), "values must not be empty")?;
    ensure(values.iter().all(|v| !v.is_nan()), "values must not contain NaN")?;
    ensure(u > 0.0 && u < 1.0, format!("quantile level {u} outside (0, 1)"))?;
    Ok(type1_quantile(&values, u))
}

/// Pinball loss of quantile forecast `q` against outcome `y` at level `u`.
#[pyfunction]
fn pinball(y: f64, q: f64, u: f64) -> f64 {
    eval::pinball(y, q, u)
}

/// Scaled pinball loss of one series' quantile forecasts.
///
/// `rows` holds one integer quantile row per forecast step, one column per
/// level; the scale is the in-sample one-step naive MAE of `history` up to
/// `train_end`. Returns per-level losses, or None when the history never
/// moves and the scale is undefined.
#[pyfunction]
#[pyo3(signature = (truth, rows, levels, history, train_end=None))]
fn spl(
    truth: Vec<f64>,
    rows: Vec<Vec<u32>>,
    levels: Vec<f64>,
    history: Vec<u32>,
    train_end: Option<usize>,
) -> PyResult<Option<Vec<f64>>> {
    ensure(
        rows.iter().all(|r| r.len() == levels.len()),
        format!("every quantile row needs one entry per level ({})", levels.len()),
    )?;
    let s = mk_series("series", history);
    let end = resolve_train_end(s.len(), train_end)?;
    let qset = QuantileForecastSet { series_id: s.id.clone(), levels, rows };
    let report = eval::spl(&truth, &qset, &s, end).map_err(py_err)?;
    Ok(report.valid.then_some(report.per_u))
}

/// Average the per-level outputs of `spl` across series, skipping the
/// scale-less ones. Returns `(wspl, n_valid, n_omitted)`.
#[pyfunction]
fn wspl(reports: Vec<Option<Vec<f64>>>) -> PyResult<(f64, usize, usize)> {
    let reports: Vec<eval::SplReport> = reports
        .into_iter()
        .enumerate()
        .map(|(i, per_u)| match per_u {
            Some(per_u) => eval::SplReport { series_id: format!("s{i}"), per_u, valid: true },
            None => eval::SplReport { series_id: format!("s{i}"), per_u: Vec::new(), valid: false },
        })
        .collect();
    let summary = eval::wspl(&reports).map_err(py_err)?;
    Ok((summary.wspl, summary.n_valid, summary.n_omitted))
}

/// Split an aggregate forecast path across its children by their share of
/// training-window sales.
///
/// `children` maps child id to its daily history; histories must share one
/// length. Shares are computed through `train_end` (default: the full
/// history); an all-zero window falls back to uniform shares. Returns
/// `(child_id, path)` pairs sorted by id; the paths sum back to `path`.
#[pyfunction]
#[pyo3(signature = (path, children, train_end=None))]
fn split_aggregate(
    path: Vec<f64>,
    children: Vec<(String, Vec<u32>)>,
    train_end: Option<usize>,
) -> PyResult<Vec<(String, Vec<f64>)>> {
    ensure(!children.is_empty(), "need at least one child series")?;
    let len = children[0].1.len();
    ensure(
        children.iter().all(|(_, v)| v.len() == len),
        "child histories must share one length",
    )?;
    let end = resolve_train_end(len, train_end)?;
    let mut ids = std::collections::BTreeSet::new();
    for (id, _) in &children {
        ensure(ids.insert(id.clone()), format!("duplicate child id `{id}`"))?;
    }

    let lower: Vec<SalesSeries> =
        children.into_iter().map(|(id, v)| mk_series(&id, v)).collect();
    let parent_of: BTreeMap<String, String> =
        lower.iter().map(|s| (s.id.clone(), "total".to_string())).collect();
    // horizon 0 keeps the whole window in training; the cutoff is applied
    // below instead.
    let mut ds = Dataset::assemble(lower, &parent_of, 0).map_err(py_err)?;
    ds.train_end = end;
    let map = compute_proportions(&ds).map_err(py_err)?;
    let agg = ForecastPath { series_id: "total".into(), values: path };
    let split = disaggregate(&agg, &map).map_err(py_err)?;
    Ok(split.into_iter().map(|p| (p.series_id, p.values)).collect())
}

fn parse_loss(name: &str) -> PyResult<LossKind> {
    let (head, arg) = match name.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (name, None),
    };
    let param = |example: &str| -> PyResult<f64> {
        arg.ok_or_else(|| {
            PyValueError::new_err(format!("loss `{head}` needs a parameter, e.g. `{head}:{example}`"))
        })?
        .parse()
        .map_err(|_| PyValueError::new_err(format!("bad numeric parameter in loss `{name}`")))
    };
    let kind = match head {
        "l2" => LossKind::L2,
        "l1" => LossKind::L1,
        "poisson" => LossKind::Poisson,
        "huber" => LossKind::Huber(param("1.0")?),
        "tweedie" => LossKind::Tweedie(param("1.5")?),
        "pinball" => LossKind::Pinball(param("0.9")?),
        "negbin" => LossKind::NegBin(param("2.0")?),
        _ => return Err(PyValueError::new_err(format!("unknown loss `{name}`"))),
    };
    if arg.is_some() && matches!(kind, LossKind::L2 | LossKind::L1 | LossKind::Poisson) {
        return Err(PyValueError::new_err(format!("loss `{head}` takes no parameter")));
    }
    kind.validate().map_err(py_err)?;
    Ok(kind)
}

#[allow(clippy::too_many_arguments)]
fn build_params(
    n_trees: usize,
    max_leaves: usize,
    learning_rate: f64,
    min_data_in_leaf: usize,
    l2_leaf_reg: f64,
    row_subsample: f64,
    feature_subsample: f64,
    max_bins: usize,
    seed: u64,
) -> GbtParams {
    GbtParams {
        n_trees,
        max_leaves,
        learning_rate,
        min_data_in_leaf,
        l2_leaf_reg,
        row_subsample,
        feature_subsample,
        max_bins,
        seed,
    }
}

fn dense_matrix(features: Vec<f64>, targets: Vec<f64>, n_lags: usize) -> PyResult<LagMatrix> {
    LagMatrix::from_dense(features, targets, n_lags).map_err(py_err)
}

fn forecast_with(
    model: &dyn PointModel,
    history: Vec<u32>,
    horizon: usize,
    train_end: Option<usize>,
    n_lags: usize,
) -> PyResult<Vec<f64>> {
    let s = mk_series("series", history);
    let end = resolve_train_end(s.len(), train_end)?;
    recursive_forecast(model, &s, end, horizon, n_lags)
        .map(|p| p.values)
        .map_err(py_err)
}

/// Gradient-boosted trees over lag features.
///
/// `features` is row-major with `n_lags` columns, the most recent lag
/// first; Booster.forecast feeds predictions back in the same layout.
#[pyclass]
struct Booster {
    model: GbtModel,
    n_lags: usize,
}

#[pymethods]
impl Booster {
    /// Fit with a named loss: `l2`, `l1`, `poisson`, or parameterized
    /// `huber:δ`, `tweedie:ρ`, `pinball:u`, `negbin:r`.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (features, targets, n_lags, loss="l2", n_trees=100, max_leaves=31,
                        learning_rate=0.1, min_data_in_leaf=20, l2_leaf_reg=0.0,
                        row_subsample=1.0, feature_subsample=1.0, max_bins=255, seed=0))]
    fn fit(
        features: Vec<f64>,
        targets: Vec<f64>,
        n_lags: usize,
        loss: &str,
        n_trees: usize,
        max_leaves: usize,
        learning_rate: f64,
        min_data_in_leaf: usize,
        l2_leaf_reg: f64,
        row_subsample: f64,
        feature_subsample: f64,
        max_bins: usize,
        seed: u64,
    ) -> PyResult<Booster> {
        let kind = parse_loss(loss)?;
        let matrix = dense_matrix(features, targets, n_lags)?;
        let params = build_params(
            n_trees,
            max_leaves,
            learning_rate,
            min_data_in_leaf,
            l2_leaf_reg,
            row_subsample,
            feature_subsample,
            max_bins,
            seed,
        );
        let model = fit_gbt(&matrix, kind, &params).map_err(py_err)?;
        Ok(Booster { model, n_lags })
    }

    /// Alternate boosting with profiling of the negative-binomial
    /// dispersion. Returns `(booster, r, converged)`; a non-converged fit
    /// still carries the best model seen.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (features, targets, n_lags, n_trees=100, max_leaves=31,
                        learning_rate=0.1, min_data_in_leaf=20, l2_leaf_reg=0.0,
                        row_subsample=1.0, feature_subsample=1.0, max_bins=255, seed=0,
                        r_init=None, max_outer=20))]
    fn fit_negbin(
        features: Vec<f64>,
        targets: Vec<f64>,
        n_lags: usize,
        n_trees: usize,
        max_leaves: usize,
        learning_rate: f64,
        min_data_in_leaf: usize,
        l2_leaf_reg: f64,
        row_subsample: f64,
        feature_subsample: f64,
        max_bins: usize,
        seed: u64,
        r_init: Option<f64>,
        max_outer: usize,
    ) -> PyResult<(Booster, f64, bool)> {
        let matrix = dense_matrix(features, targets, n_lags)?;
        let params = build_params(
            n_trees,
            max_leaves,
            learning_rate,
            min_data_in_leaf,
            l2_leaf_reg,
            row_subsample,
            feature_subsample,
            max_bins,
            seed,
        );
        let fit = fit_gbt_negbin(&matrix, &params, r_init, max_outer).map_err(py_err)?;
        Ok((Booster { model: fit.model, n_lags }, fit.r, fit.converged))
    }

    /// Mean-scale prediction for one feature row.
    fn predict(&self, row: Vec<f64>) -> PyResult<f64> {
        ensure(
            row.len() == self.n_lags,
            format!("expected {} lag features, got {}", self.n_lags, row.len()),
        )?;
        Ok(self.model.predict_row(&row))
    }

    /// Forecast `horizon` steps past `train_end` (default: the last
    /// observation), feeding each prediction back as the newest lag.
    #[pyo3(signature = (history, horizon, train_end=None))]
    fn forecast(
        &self,
        history: Vec<u32>,
        horizon: usize,
        train_end: Option<usize>,
    ) -> PyResult<Vec<f64>> {
        forecast_with(&self.model, history, horizon, train_end, self.n_lags)
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.model.trees.len()
    }

    #[getter]
    fn n_lags(&self) -> usize {
        self.n_lags
    }
}

/// Pooled least squares over lag features, solved from streaming normal
/// equations. Same feature layout as Booster.
#[pyclass]
struct PooledLinear {
    model: LinearModel,
    n_lags: usize,
}

#[pymethods]
impl PooledLinear {
    #[staticmethod]
    fn fit(features: Vec<f64>, targets: Vec<f64>, n_lags: usize) -> PyResult<PooledLinear> {
        let matrix = dense_matrix(features, targets, n_lags)?;
        let mut acc = NormalAccumulator::new(n_lags);
        acc.add_matrix(&matrix).map_err(py_err)?;
        let model = solve_ols(&acc, None).map_err(py_err)?;
        Ok(PooledLinear { model, n_lags })
    }

    /// Coefficients with the intercept first.
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.model.beta.clone()
    }

    #[getter]
    fn n_lags(&self) -> usize {
        self.n_lags
    }

    fn predict(&self, row: Vec<f64>) -> PyResult<f64> {
        ensure(
            row.len() == self.n_lags,
            format!("expected {} lag features, got {}", self.n_lags, row.len()),
        )?;
        Ok(self.model.predict_row(&row))
    }

    #[pyo3(signature = (history, horizon, train_end=None))]
    fn forecast(
        &self,
        history: Vec<u32>,
        horizon: usize,
        train_end: Option<usize>,
    ) -> PyResult<Vec<f64>> {
        forecast_with(&self.model, history, horizon, train_end, self.n_lags)
    }
}

#[pymodule]
fn demandcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(demand_stats, m)?)?;
    m.add_function(wrap_pyfunction!(nb_nll, m)?)?;
    m.add_function(wrap_pyfunction!(nb_grad_hess, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_quantiles, m)?)?;
    m.add_function(wrap_pyfunction!(negbin_quantiles, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(pinball, m)?)?;
    m.add_function(wrap_pyfunction!(spl, m)?)?;
    m.add_function(wrap_pyfunction!(wspl, m)?)?;
    m.add_function(wrap_pyfunction!(split_aggregate, m)?)?;
    m.add_class::<Booster>()?;
    m.add_class::<PooledLinear>()?;
    Ok(())
}
