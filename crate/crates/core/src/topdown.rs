//! Top-down distribution layer: share out an aggregate point forecast to
//! its children by historical proportions, then wrap each point path in a
//! Poisson or negative-binomial distribution via method of moments.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dist::{validate_levels, CountDist};
use crate::error::{Error, Result};
use crate::features::ForecastPath;
use crate::gbt::loss::empirical_quantile;
use crate::series::{Dataset, SalesSeries};

/// Training-sum share of each child in its aggregate. Shares of the
/// children of one aggregate sum to 1; an all-zero aggregate falls back to
/// uniform shares and is recorded in `uniform_fallback`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProportionMap {
    rho: BTreeMap<String, Vec<(String, f64)>>,
    pub uniform_fallback: Vec<String>,
}

impl ProportionMap {
    pub fn children(&self, aggregate_id: &str) -> Option<&[(String, f64)]> {
        self.rho.get(aggregate_id).map(Vec::as_slice)
    }

    pub fn share(&self, aggregate_id: &str, child_id: &str) -> Option<f64> {
        self.rho
            .get(aggregate_id)?
            .iter()
            .find(|(id, _)| id == child_id)
            .map(|&(_, rho)| rho)
    }

    pub fn n_aggregates(&self) -> usize {
        self.rho.len()
    }
}

pub fn compute_proportions(dataset: &Dataset) -> Result<ProportionMap> {
    let mut rho = BTreeMap::new();
    let mut uniform_fallback = Vec::new();
    for agg_id in dataset.hierarchy.aggregates() {
        let child_ids = dataset.hierarchy.children(agg_id);
        let mut sums = Vec::with_capacity(child_ids.len());
        for child_id in child_ids {
            let child = dataset
                .find(crate::series::Level::Lower, child_id)
                .ok_or_else(|| Error::Data(format!("lower series {child_id} missing")))?;
            let sum: u64 =
                child.values[..=dataset.train_end].iter().map(|&v| v as u64).sum();
            sums.push(sum);
        }
        let total: u64 = sums.iter().sum();
        let shares = if total == 0 {
            log::warn!("aggregate {agg_id} has no training sales; using uniform shares");
            uniform_fallback.push(agg_id.to_string());
            let uniform = 1.0 / child_ids.len() as f64;
            child_ids.iter().map(|id| (id.clone(), uniform)).collect()
        } else {
            child_ids
                .iter()
                .zip(&sums)
                .map(|(id, &s)| (id.clone(), s as f64 / total as f64))
                .collect()
        };
        rho.insert(agg_id.to_string(), shares);
    }
    Ok(ProportionMap { rho, uniform_fallback })
}

/// Split an aggregate forecast into one path per child, scaled by its
/// share. Children sum back to the aggregate up to rounding error.
pub fn disaggregate(agg: &ForecastPath, map: &ProportionMap) -> Result<Vec<ForecastPath>> {
    let children = map
        .children(&agg.series_id)
        .ok_or_else(|| Error::Data(format!("no proportions for aggregate {}", agg.series_id)))?;
    Ok(children
        .iter()
        .map(|(id, rho)| ForecastPath {
            series_id: id.clone(),
            values: agg.values.iter().map(|v| rho * v).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistChoice {
    Poisson,
    NegBin,
}

impl DistChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            DistChoice::Poisson => "poisson",
            DistChoice::NegBin => "negbin",
        }
    }

    pub fn parse(s: &str) -> Result<DistChoice> {
        match s {
            "poisson" => Ok(DistChoice::Poisson),
            "negbin" => Ok(DistChoice::NegBin),
            other => Err(Error::Config(format!(
                "unknown distribution '{other}' (expected poisson or negbin)"
            ))),
        }
    }
}

/// Distribution for one forecast step plus the variance estimate behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepParams {
    pub dist: CountDist,
    pub variance: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionParams {
    pub series_id: String,
    pub steps: Vec<StepParams>,
}

/// Sample variance of the training span, or of its trailing `window` days.
pub fn train_variance(
    history: &SalesSeries,
    train_end: usize,
    window: Option<usize>,
) -> Result<f64> {
    if train_end >= history.values.len() {
        return Err(Error::Data(format!(
            "train_end {train_end} out of range for series {} of length {}",
            history.id,
            history.values.len()
        )));
    }
    if let Some(0) = window {
        return Err(Error::Config("variance window must be at least 1".into()));
    }
    let start = window.map_or(0, |w| (train_end + 1).saturating_sub(w));
    let slice = &history.values[start..=train_end];
    if slice.len() < 2 {
        return Ok(0.0);
    }
    let n = slice.len() as f64;
    let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / n;
    Ok(slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn check_point(point: &ForecastPath, y: f64) -> Result<()> {
    if !(y >= 0.0) || !y.is_finite() {
        return Err(Error::Numeric(format!(
            "point forecast for {} must be clamped non-negative before the distribution layer, got {y}",
            point.series_id
        )));
    }
    Ok(())
}

/// Method-of-moments step distributions for one series. Negative-binomial
/// steps fall back to Poisson when the forecast is 0 or the in-sample
/// variance shows no over-dispersion.
pub fn estimate_params(
    point: &ForecastPath,
    history: &SalesSeries,
    train_end: usize,
    dist: DistChoice,
    variance_window: Option<usize>,
) -> Result<DistributionParams> {
    let v_hat = match dist {
        DistChoice::Poisson => 0.0,
        DistChoice::NegBin => train_variance(history, train_end, variance_window)?,
    };
    let mut steps = Vec::with_capacity(point.values.len());
    for &y in &point.values {
        check_point(point, y)?;
        let step = match dist {
            DistChoice::Poisson => {
                StepParams { dist: CountDist::poisson(y)?, variance: y, fallback: false }
            }
            DistChoice::NegBin => {
                if y == 0.0 || v_hat <= y {
                    StepParams { dist: CountDist::poisson(y)?, variance: v_hat, fallback: true }
                } else {
                    let p = y / v_hat;
                    let r = y * p / (1.0 - p);
                    StepParams { dist: CountDist::negbin(r, p)?, variance: v_hat, fallback: false }
                }
            }
        };
        steps.push(step);
    }
    Ok(DistributionParams { series_id: point.series_id.clone(), steps })
}

/// Variant that fixes p across the hierarchy: each child step reuses the p
/// estimated for the matching aggregate step instead of its own variance.
pub fn estimate_params_shared_p(
    point: &ForecastPath,
    aggregate: &DistributionParams,
) -> Result<DistributionParams> {
    if point.values.len() != aggregate.steps.len() {
        return Err(Error::Data(format!(
            "point path for {} has {} steps but aggregate params have {}",
            point.series_id,
            point.values.len(),
            aggregate.steps.len()
        )));
    }
    let mut steps = Vec::with_capacity(point.values.len());
    for (&y, agg_step) in point.values.iter().zip(&aggregate.steps) {
        check_point(point, y)?;
        let step = match agg_step.dist {
            CountDist::NegBin { p, .. } if y > 0.0 => {
                let r = y * p / (1.0 - p);
                StepParams { dist: CountDist::negbin(r, p)?, variance: y / p, fallback: false }
            }
            _ => StepParams { dist: CountDist::poisson(y)?, variance: y, fallback: true },
        };
        steps.push(step);
    }
    Ok(DistributionParams { series_id: point.series_id.clone(), steps })
}

/// Integer count quantiles, one row per step, one column per level.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileForecastSet {
    pub series_id: String,
    pub levels: Vec<f64>,
    pub rows: Vec<Vec<u32>>,
}

pub fn quantiles(params: &DistributionParams, levels: &[f64]) -> Result<QuantileForecastSet> {
    let mut rows = Vec::with_capacity(params.steps.len());
    for step in &params.steps {
        let qs = step.dist.quantile_set(levels)?;
        let row = qs
            .into_iter()
            .map(|q| {
                u32::try_from(q).map_err(|_| {
                    Error::Numeric(format!("quantile {q} for {} exceeds u32", params.series_id))
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        rows.push(row);
    }
    Ok(QuantileForecastSet { series_id: params.series_id.clone(), levels: levels.to_vec(), rows })
}

/// Per-series empirical training quantiles, repeated across the horizon.
pub fn in_sample_quantiles(
    history: &SalesSeries,
    train_end: usize,
    levels: &[f64],
    horizon: usize,
) -> Result<QuantileForecastSet> {
    validate_levels(levels)?;
    if train_end >= history.values.len() {
        return Err(Error::Data(format!(
            "train_end {train_end} out of range for series {}",
            history.id
        )));
    }
    let train: Vec<f64> = history.values[..=train_end].iter().map(|&v| v as f64).collect();
    let row: Vec<u32> = levels.iter().map(|&u| empirical_quantile(&train, u) as u32).collect();
    Ok(QuantileForecastSet {
        series_id: history.id.clone(),
        levels: levels.to_vec(),
        rows: vec![row; horizon],
    })
}

/// Rows `series_id,step,u,quantile` with steps numbered from 1.
pub fn write_quantile_csv(sets: &[QuantileForecastSet], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "step", "u", "quantile"])?;
    for set in sets {
        for (t, row) in set.rows.iter().enumerate() {
            for (u, q) in set.levels.iter().zip(row) {
                w.write_record([
                    set.series_id.as_str(),
                    &(t + 1).to_string(),
                    &u.to_string(),
                    &q.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

/// Audit rows `series_id,step,dist,lambda_or_r,p,variance,fallback`.
/// Poisson rows carry λ and p = nan; fallback is 0/1.
pub fn write_params_csv(params: &[DistributionParams], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "step", "dist", "lambda_or_r", "p", "variance", "fallback"])?;
    for series in params {
        for (t, step) in series.steps.iter().enumerate() {
            let (dist, lambda_or_r, p) = match step.dist {
                CountDist::Poisson { lambda } => ("poisson", lambda, f64::NAN),
                CountDist::NegBin { r, p } => ("negbin", r, p),
            };
            w.write_record([
                series.series_id.as_str(),
                &(t + 1).to_string(),
                dist,
                &lambda_or_r.to_string(),
                &p.to_string(),
                &step.variance.to_string(),
                if step.fallback { "1" } else { "0" },
            ])?;
        }
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}
