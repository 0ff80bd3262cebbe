//! Scaled pinball loss, its equal-weight aggregate, MSE, and the benchmark
//! forecasters the probabilistic pipeline is measured against.

use std::path::Path;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::features::{embed, window, ForecastPath, PadPolicy, PointModel};
use crate::gbt::{fit_gbt, GbtParams, LossKind};
use crate::series::SalesSeries;
use crate::topdown::QuantileForecastSet;

/// u·(y−q)⁺ + (1−u)·(q−y)⁺.
pub fn pinball(y: f64, q: f64, u: f64) -> f64 {
    if y >= q {
        u * (y - q)
    } else {
        (1.0 - u) * (q - y)
    }
}

/// Per-series scaled pinball losses, one per quantile level. `valid` is
/// false when the scaling denominator is undefined; such series are
/// omitted from aggregation but still counted.
#[derive(Debug, Clone, PartialEq)]
pub struct SplReport {
    pub series_id: String,
    pub per_u: Vec<f64>,
    pub valid: bool,
}

impl SplReport {
    /// Mean SPL across quantile levels.
    pub fn mean_spl(&self) -> f64 {
        self.per_u.iter().sum::<f64>() / self.per_u.len() as f64
    }
}

/// Mean absolute one-step difference of the training values between the
/// first sale and `train_end`; None when fewer than two observations or no
/// movement (the scale is then undefined).
fn naive_scale(history: &SalesSeries, train_end: usize) -> Option<f64> {
    let start = history.first_nonzero?;
    if start >= train_end {
        return None;
    }
    let span = &history.values[start..=train_end];
    let total: f64 =
        span.windows(2).map(|w| (w[1] as f64 - w[0] as f64).abs()).sum();
    if total == 0.0 {
        return None;
    }
    Some(total / (span.len() - 1) as f64)
}

/// Scaled pinball loss of one series' quantile forecasts against the
/// held-out truth. The scale is the in-sample one-step naive MAE.
pub fn spl(
    truth: &[f64],
    qset: &QuantileForecastSet,
    history: &SalesSeries,
    train_end: usize,
) -> Result<SplReport> {
    if qset.rows.len() != truth.len() {
        return Err(Error::Data(format!(
            "series {}: {} forecast steps but {} truth values",
            qset.series_id,
            qset.rows.len(),
            truth.len()
        )));
    }
    let Some(scale) = naive_scale(history, train_end) else {
        return Ok(SplReport { series_id: qset.series_id.clone(), per_u: Vec::new(), valid: false });
    };
    let h = truth.len() as f64;
    let per_u = qset
        .levels
        .iter()
        .enumerate()
        .map(|(j, &u)| {
            let num: f64 = truth
                .iter()
                .zip(&qset.rows)
                .map(|(&y, row)| pinball(y, row[j] as f64, u))
                .sum();
            num / h / scale
        })
        .collect();
    Ok(SplReport { series_id: qset.series_id.clone(), per_u, valid: true })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WsplSummary {
    pub wspl: f64,
    pub n_valid: usize,
    pub n_omitted: usize,
}

/// Equal-weight average of mean SPL over the valid series.
pub fn wspl(reports: &[SplReport]) -> Result<WsplSummary> {
    let valid: Vec<&SplReport> = reports.iter().filter(|r| r.valid).collect();
    if valid.is_empty() {
        return Err(Error::Numeric(
            "no series with a defined pinball scale; cannot aggregate".into(),
        ));
    }
    let wspl = valid.iter().map(|r| r.mean_spl()).sum::<f64>() / valid.len() as f64;
    Ok(WsplSummary { wspl, n_valid: valid.len(), n_omitted: reports.len() - valid.len() })
}

/// Mean over series of the per-series horizon-mean squared error.
pub fn mse(truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Data(format!(
            "MSE needs matching non-empty sets, got {} truth and {} forecast series",
            truth.len(),
            pred.len()
        )));
    }
    let mut total = 0.0;
    for (y, f) in truth.iter().zip(pred) {
        if y.len() != f.len() || y.is_empty() {
            return Err(Error::Data(format!(
                "MSE horizon mismatch: {} truth vs {} forecast values",
                y.len(),
                f.len()
            )));
        }
        total += y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    }
    Ok(total / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Mean,
    Naive,
    SNaive { period: usize },
    Drift,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Mean => "mean",
            BaselineKind::Naive => "naive",
            BaselineKind::SNaive { .. } => "snaive",
            BaselineKind::Drift => "drift",
        }
    }
}

/// Point forecast plus Gaussian-interval count quantiles for the classic
/// local benchmarks. Interval widths follow the standard textbook scalings
/// of the in-sample residual standard deviation.
pub fn baseline_forecast(
    kind: BaselineKind,
    history: &SalesSeries,
    train_end: usize,
    horizon: usize,
    levels: &[f64],
) -> Result<(ForecastPath, QuantileForecastSet)> {
    crate::dist::validate_levels(levels)?;
    if train_end >= history.values.len() {
        return Err(Error::Data(format!(
            "train_end {train_end} out of range for series {}",
            history.id
        )));
    }
    let y: Vec<f64> = history.values[..=train_end].iter().map(|&v| v as f64).collect();
    let n = y.len();
    let last = y[n - 1];

    // point rule, residuals, and the lost-degrees count for the sd estimate
    let (points, residuals, dof_loss): (Vec<f64>, Vec<f64>, usize) = match kind {
        BaselineKind::Mean => {
            let mean = y.iter().sum::<f64>() / n as f64;
            (vec![mean; horizon], y.iter().map(|v| v - mean).collect(), 1)
        }
        BaselineKind::Naive => {
            let diffs: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
            (vec![last; horizon], diffs, 0)
        }
        BaselineKind::SNaive { period } => {
            if period == 0 {
                return Err(Error::Config("seasonal period must be at least 1".into()));
            }
            if n < period {
                return Err(Error::Data(format!(
                    "series {}: seasonal naive needs at least {period} observations, got {n}",
                    history.id
                )));
            }
            let points = (1..=horizon).map(|k| y[n - period + (k - 1) % period]).collect();
            let resid = (period..n).map(|t| y[t] - y[t - period]).collect();
            (points, resid, 0)
        }
        BaselineKind::Drift => {
            if n < 2 {
                return Err(Error::Data(format!(
                    "series {}: drift needs at least 2 observations",
                    history.id
                )));
            }
            let slope = (last - y[0]) / (n - 1) as f64;
            let points = (1..=horizon).map(|k| last + k as f64 * slope).collect();
            let resid = y.windows(2).map(|w| w[1] - w[0] - slope).collect();
            (points, resid, 1)
        }
    };

    let sd = if residuals.len() > dof_loss {
        let denom = (residuals.len() - dof_loss) as f64;
        (residuals.iter().map(|e| e * e).sum::<f64>() / denom).sqrt()
    } else {
        0.0
    };

    // per-step sd multiplier for the interval width
    let scale = |k: usize| -> f64 {
        let k = k as f64;
        match kind {
            BaselineKind::Mean => (1.0 + 1.0 / n as f64).sqrt(),
            BaselineKind::Naive => k.sqrt(),
            BaselineKind::SNaive { period } => {
                (((k - 1.0) / period as f64).floor() + 1.0).sqrt()
            }
            BaselineKind::Drift => (k * (1.0 + k / (n - 1) as f64)).sqrt(),
        }
    };

    let normal = Normal::standard();
    let z: Vec<f64> = levels.iter().map(|&u| normal.inverse_cdf(u)).collect();
    let rows = (1..=horizon)
        .map(|k| {
            let sigma = sd * scale(k);
            z.iter()
                .map(|&z| (points[k - 1] + z * sigma).max(0.0).round() as u32)
                .collect()
        })
        .collect();

    let path = ForecastPath { series_id: history.id.clone(), values: points };
    let qset = QuantileForecastSet {
        series_id: history.id.clone(),
        levels: levels.to_vec(),
        rows,
    };
    Ok((path, qset))
}

/// Sets of per-series quantile forecasts from one boosted model per
/// (level, step) pair, plus how many models that took.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectQuantileResult {
    pub sets: Vec<QuantileForecastSet>,
    pub models_fitted: usize,
}

/// Direct multi-horizon quantile benchmark: a pinball-loss boosted model
/// for every (quantile level, forecast step). Crossing predictions from
/// the independent fits are repaired by sorting within each step.
pub fn direct_quantile_gbt(
    series: &[SalesSeries],
    train_end: usize,
    n_lags: usize,
    pad: PadPolicy,
    levels: &[f64],
    horizon: usize,
    params: &GbtParams,
) -> Result<DirectQuantileResult> {
    crate::dist::validate_levels(levels)?;
    if levels.is_empty() || horizon == 0 {
        return Err(Error::Config("need at least one quantile level and one step".into()));
    }
    let base = embed(series, train_end, n_lags, pad)?;

    // lag window ending at train_end, the predictor for every future step
    let mut query = vec![0.0; n_lags * series.len()];
    for (i, s) in series.iter().enumerate() {
        let values: Vec<f64> = s.values[..=train_end].iter().map(|&v| v as f64).collect();
        window(&values, train_end + 1, &mut query[i * n_lags..(i + 1) * n_lags]);
    }

    let jobs: Vec<(usize, usize)> = (0..horizon)
        .flat_map(|k| (0..levels.len()).map(move |j| (k, j)))
        .collect();
    let fits: Vec<Result<(usize, usize, Vec<f64>)>> = jobs
        .par_iter()
        .map(|&(k, j)| {
            let shifted = base.shift_targets(series, k, train_end);
            if shifted.n_rows() == 0 {
                return Err(Error::Data(format!(
                    "no training rows left after shifting targets {k} steps"
                )));
            }
            let model = fit_gbt(&shifted, LossKind::Pinball(levels[j]), params)?;
            let preds = (0..series.len())
                .map(|i| model.predict_row(&query[i * n_lags..(i + 1) * n_lags]))
                .collect();
            Ok((k, j, preds))
        })
        .collect();

    let mut rows = vec![vec![vec![0u32; levels.len()]; horizon]; series.len()];
    let models_fitted = fits.len();
    for fit in fits {
        let (k, j, preds) = fit?;
        for (i, &p) in preds.iter().enumerate() {
            rows[i][k][j] = p.max(0.0).round() as u32;
        }
    }
    let sets = series
        .iter()
        .zip(rows)
        .map(|(s, mut series_rows)| {
            for row in &mut series_rows {
                row.sort_unstable();
            }
            QuantileForecastSet {
                series_id: s.id.clone(),
                levels: levels.to_vec(),
                rows: series_rows,
            }
        })
        .collect();
    Ok(DirectQuantileResult { sets, models_fitted })
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub group: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub n_series: usize,
    pub n_omitted: usize,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "model", "metric", "value", "n_series", "n_omitted"])?;
    for row in rows {
        w.write_record([
            row.group.as_str(),
            row.model.as_str(),
            row.metric.as_str(),
            &row.value.to_string(),
            &row.n_series.to_string(),
            &row.n_omitted.to_string(),
        ])?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn history(values: Vec<u32>) -> SalesSeries {
        named("s", values)
    }

    fn named(id: impl Into<String>, values: Vec<u32>) -> SalesSeries {
        SalesSeries::new(id, NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), values)
    }

    fn qset(levels: Vec<f64>, rows: Vec<Vec<u32>>) -> QuantileForecastSet {
        QuantileForecastSet { series_id: "s".into(), levels, rows }
    }

    #[test]
    fn hand_example_scores_point_one_five() {
        // history [0,1,3]: sales start at index 1, one diff of 2, scale 2;
        // the 0.9 quantile forecast 5 against truth 2 costs 0.1 * 3 = 0.3
        let hist = history(vec![0, 1, 3, 2]);
        let report = spl(&[2.0], &qset(vec![0.9], vec![vec![5]]), &hist, 2).unwrap();
        assert!(report.valid);
        // 0.1 * 3 / 2 lands one ulp under the decimal 0.15
        assert!((report.per_u[0] - 0.15).abs() < 1e-15);
        assert!((report.mean_spl() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn perfect_forecast_scores_zero() {
        let hist = history(vec![0, 1, 3, 2, 4]);
        let report = spl(
            &[2.0, 4.0],
            &qset(vec![0.1, 0.9], vec![vec![2, 2], vec![4, 4]]),
            &hist,
            2,
        )
        .unwrap();
        assert_eq!(report.per_u, vec![0.0, 0.0]);
    }

    #[test]
    fn flat_history_is_invalid() {
        // single observation in the sale-to-T span
        let hist = history(vec![0, 0, 5, 5]);
        let report = spl(&[5.0], &qset(vec![0.5], vec![vec![5]]), &hist, 2).unwrap();
        assert!(!report.valid);
        // constant positive history: diffs all zero
        let hist = history(vec![5, 5, 5, 5]);
        let report = spl(&[5.0], &qset(vec![0.5], vec![vec![5]]), &hist, 2).unwrap();
        assert!(!report.valid);
        // never sold at all
        let hist = history(vec![0, 0, 0, 0]);
        let report = spl(&[0.0], &qset(vec![0.5], vec![vec![0]]), &hist, 2).unwrap();
        assert!(!report.valid);
    }

    #[test]
    fn pinball_at_the_median_is_half_absolute_error() {
        for (y, q) in [(3.0, 7.0), (7.0, 3.0), (2.0, 2.0)] {
            assert_eq!(pinball(y, q, 0.5), 0.5 * (y - q).abs());
        }
    }

    #[test]
    fn wspl_averages_valid_series_only() {
        let reports = vec![
            SplReport { series_id: "a".into(), per_u: vec![0.2], valid: true },
            SplReport { series_id: "b".into(), per_u: vec![0.4], valid: true },
            SplReport { series_id: "c".into(), per_u: vec![], valid: false },
        ];
        let summary = wspl(&reports).unwrap();
        assert!((summary.wspl - 0.3).abs() < 1e-15);
        assert_eq!((summary.n_valid, summary.n_omitted), (2, 1));

        let all_invalid = vec![SplReport { series_id: "c".into(), per_u: vec![], valid: false }];
        assert!(matches!(wspl(&all_invalid), Err(Error::Numeric(_))));
    }

    #[test]
    fn wspl_matches_flat_recomputation() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut reports = Vec::new();
        let mut flat = Vec::new();
        for i in 0..10 {
            let per_u: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0)).collect();
            flat.push(per_u.iter().sum::<f64>() / 4.0);
            reports.push(SplReport { series_id: format!("s{i}"), per_u, valid: true });
        }
        let expect = flat.iter().sum::<f64>() / flat.len() as f64;
        assert!((wspl(&reports).unwrap().wspl - expect).abs() < 1e-12);
    }

    #[test]
    fn singleton_group_equals_its_mean_spl() {
        let r = SplReport { series_id: "a".into(), per_u: vec![0.1, 0.3], valid: true };
        assert_eq!(wspl(std::slice::from_ref(&r)).unwrap().wspl, r.mean_spl());
    }

    proptest! {
        #[test]
        fn spl_is_invariant_to_integer_rescaling(
            hist in proptest::collection::vec(0u32..6, 4..20),
            truth in proptest::collection::vec(0u32..6, 1..5),
            c in 2u32..5,
        ) {
            let train_end = hist.len() - 1;
            let q: Vec<Vec<u32>> = truth.iter().map(|&y| vec![y / 2, y + 1]).collect();
            let base = spl(
                &truth.iter().map(|&y| y as f64).collect::<Vec<_>>(),
                &qset(vec![0.25, 0.75], q.clone()),
                &history(hist.clone()),
                train_end,
            )
            .unwrap();
            let scaled = spl(
                &truth.iter().map(|&y| (c * y) as f64).collect::<Vec<_>>(),
                &qset(
                    vec![0.25, 0.75],
                    q.iter().map(|row| row.iter().map(|&v| c * v).collect()).collect(),
                ),
                &history(hist.iter().map(|&v| c * v).collect()),
                train_end,
            )
            .unwrap();
            prop_assert_eq!(base.valid, scaled.valid);
            if base.valid {
                for (a, b) in base.per_u.iter().zip(&scaled.per_u) {
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn mse_matches_hand_values_and_double_loop() {
        assert_eq!(mse(&[vec![0.0, 2.0]], &[vec![1.0, 1.0]]).unwrap(), 1.0);
        assert_eq!(mse(&[vec![3.0, 4.0]], &[vec![3.0, 4.0]]).unwrap(), 0.0);

        let mut rng = StdRng::seed_from_u64(2);
        let truth: Vec<Vec<f64>> =
            (0..5).map(|_| (0..7).map(|_| rng.random_range(0.0..9.0)).collect()).collect();
        let pred: Vec<Vec<f64>> =
            (0..5).map(|_| (0..7).map(|_| rng.random_range(0.0..9.0)).collect()).collect();
        let mut flat = 0.0;
        for i in 0..5 {
            let mut acc = 0.0;
            for t in 0..7 {
                acc += (truth[i][t] - pred[i][t]).powi(2);
            }
            flat += acc / 7.0;
        }
        flat /= 5.0;
        assert!((mse(&truth, &pred).unwrap() - flat).abs() < 1e-12);

        assert!(matches!(mse(&[vec![1.0]], &[]), Err(Error::Data(_))));
        assert!(matches!(mse(&[vec![1.0]], &[vec![1.0, 2.0]]), Err(Error::Data(_))));
    }

    #[test]
    fn naive_repeats_the_last_value() {
        let hist = history(vec![1, 9, 4]);
        let (path, _) =
            baseline_forecast(BaselineKind::Naive, &hist, 2, 3, &[0.5]).unwrap();
        assert_eq!(path.values, vec![4.0, 4.0, 4.0]);
    }

    #[test]
    fn drift_extends_the_first_to_last_slope() {
        let hist = history(vec![1, 2, 3, 4, 5]);
        let (path, _) =
            baseline_forecast(BaselineKind::Drift, &hist, 4, 2, &[0.5]).unwrap();
        assert_eq!(path.values, vec![6.0, 7.0]);
    }

    #[test]
    fn seasonal_naive_repeats_the_last_cycle() {
        let week = [3u32, 0, 0, 5, 1, 0, 2];
        let mut values = Vec::new();
        for _ in 0..3 {
            values.extend_from_slice(&week);
        }
        let hist = history(values);
        let (path, _) =
            baseline_forecast(BaselineKind::SNaive { period: 7 }, &hist, 20, 14, &[0.5])
                .unwrap();
        let expect: Vec<f64> = week.iter().chain(&week).map(|&v| v as f64).collect();
        assert_eq!(path.values, expect);
    }

    #[test]
    fn mean_baseline_centers_quantiles_on_the_mean() {
        let hist = history(vec![2, 4, 2, 4]);
        let (path, q) =
            baseline_forecast(BaselineKind::Mean, &hist, 3, 2, &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(path.values, vec![3.0, 3.0]);
        for row in &q.rows {
            assert_eq!(row[1], 3);
            assert!(row[0] <= row[1] && row[1] <= row[2]);
        }
    }

    #[test]
    fn short_history_errors_for_seasonal_and_drift() {
        let hist = history(vec![5, 6]);
        assert!(matches!(
            baseline_forecast(BaselineKind::SNaive { period: 7 }, &hist, 1, 2, &[0.5]),
            Err(Error::Data(_))
        ));
        let single = history(vec![5]);
        assert!(matches!(
            baseline_forecast(BaselineKind::Drift, &single, 0, 2, &[0.5]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn baselines_are_deterministic() {
        let hist = history(vec![0, 3, 1, 4, 1, 5, 9, 2, 6]);
        for kind in [
            BaselineKind::Mean,
            BaselineKind::Naive,
            BaselineKind::SNaive { period: 3 },
            BaselineKind::Drift,
        ] {
            let a = baseline_forecast(kind, &hist, 8, 5, &[0.1, 0.9]).unwrap();
            let b = baseline_forecast(kind, &hist, 8, 5, &[0.1, 0.9]).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn direct_benchmark_fits_one_model_per_level_and_step() {
        let mut rng = StdRng::seed_from_u64(4);
        let series: Vec<SalesSeries> = (0..3)
            .map(|i| named(format!("s{i}"), (0..60).map(|_| rng.random_range(0u32..6)).collect()))
            .collect();
        let params = GbtParams { n_trees: 5, min_data_in_leaf: 1, ..GbtParams::default() };
        let out = direct_quantile_gbt(
            &series,
            49,
            3,
            PadPolicy::ZeroPad,
            &[0.1, 0.9],
            2,
            &params,
        )
        .unwrap();
        assert_eq!(out.models_fitted, 4);
        assert_eq!(out.sets.len(), 3);
        for set in &out.sets {
            assert_eq!(set.rows.len(), 2);
            for row in &set.rows {
                assert!(row.windows(2).all(|w| w[0] <= w[1]), "crossing left unsorted");
            }
        }
    }

    #[test]
    fn median_models_land_near_the_unconditional_median() {
        let mut rng = StdRng::seed_from_u64(13);
        let series: Vec<SalesSeries> = (0..4)
            .map(|i| named(format!("s{i}"), (0..80).map(|_| rng.random_range(3u32..8)).collect()))
            .collect();
        let params = GbtParams { n_trees: 30, ..GbtParams::default() };
        let out = direct_quantile_gbt(
            &series,
            69,
            4,
            PadPolicy::ZeroPad,
            &[0.5],
            1,
            &params,
        )
        .unwrap();
        for set in &out.sets {
            let q = set.rows[0][0] as f64;
            assert!((q - 5.0).abs() <= 1.0, "median prediction {q} far from 5");
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![MetricRow {
            group: "lumpy".into(),
            model: "pr".into(),
            metric: "wspl".into(),
            value: 0.25,
            n_series: 10,
            n_omitted: 2,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "group,model,metric,value,n_series,n_omitted\nlumpy,pr,wspl,0.25,10,2\n"
        );
    }
}
