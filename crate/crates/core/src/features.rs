//! Lag embedding of series into pooled training matrices, and the recursive
//! multi-step forecast driver shared by every point model.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::series::SalesSeries;

/// How to embed the first `n_lags` days of a series, where lag windows reach
/// before its start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadPolicy {
    /// Treat pre-start lags as zero sales; every training time yields a row.
    ZeroPad,
    /// Only fully observed windows yield rows.
    Drop,
}

/// Pooled lag-embedded design: one row per (series, target time), features
/// y_{t−1}..y_{t−n_lags} with the most recent lag first.
#[derive(Debug, Clone, PartialEq)]
pub struct LagMatrix {
    pub n_lags: usize,
    /// Distinct source series ids; `row_series` indexes into this.
    pub series_ids: Vec<String>,
    pub row_series: Vec<u32>,
    /// Target time t of each row on the series' own grid.
    pub row_t: Vec<u32>,
    /// Row-major, `n_rows × n_lags`.
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl LagMatrix {
    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn feature_row(&self, row: usize) -> &[f64] {
        &self.features[row * self.n_lags..(row + 1) * self.n_lags]
    }

    /// Wrap an already built dense design (used by tools and tests).
    pub fn from_dense(features: Vec<f64>, targets: Vec<f64>, n_lags: usize) -> Result<LagMatrix> {
        if n_lags == 0 || features.len() != targets.len() * n_lags {
            return Err(Error::Data(format!(
                "dense design shape mismatch: {} features, {} targets, {} lags",
                features.len(),
                targets.len(),
                n_lags
            )));
        }
        Ok(LagMatrix {
            n_lags,
            series_ids: vec!["dense".into()],
            row_series: vec![0; targets.len()],
            row_t: (0..targets.len() as u32).collect(),
            features,
            targets,
        })
    }

    /// Replace each row's target with the value `shift` steps after it,
    /// dropping rows that would reach past `train_end`. Used by the direct
    /// multi-horizon benchmark; `shift = 0` is the identity.
    pub fn shift_targets(&self, series: &[SalesSeries], shift: usize, train_end: usize) -> LagMatrix {
        let mut out = LagMatrix {
            n_lags: self.n_lags,
            series_ids: self.series_ids.clone(),
            row_series: Vec::new(),
            row_t: Vec::new(),
            features: Vec::new(),
            targets: Vec::new(),
        };
        for row in 0..self.n_rows() {
            let t = self.row_t[row] as usize + shift;
            if t > train_end {
                continue;
            }
            let s = &series[self.row_series[row] as usize];
            out.row_series.push(self.row_series[row]);
            out.row_t.push(t as u32);
            out.features.extend_from_slice(self.feature_row(row));
            out.targets.push(s.values[t] as f64);
        }
        out
    }
}

/// Lag window ending just before `t`, zero-filled before the series start.
/// `out.len()` is the number of lags.
pub(crate) fn window(values: &[f64], t: usize, out: &mut [f64]) {
    for (j, slot) in out.iter_mut().enumerate() {
        let lag = j + 1;
        *slot = if t >= lag { values[t - lag] } else { 0.0 };
    }
}

/// Embed all series into one pooled matrix over the training span
/// `[0, train_end]`.
pub fn embed(
    series: &[SalesSeries],
    train_end: usize,
    n_lags: usize,
    pad: PadPolicy,
) -> Result<LagMatrix> {
    if n_lags == 0 {
        return Err(Error::Config("n_lags must be at least 1".into()));
    }
    for s in series {
        if s.len() <= train_end {
            return Err(Error::Data(format!(
                "series `{}` has {} observations, train_end {train_end} out of range",
                s.id,
                s.len()
            )));
        }
    }

    let per_series: Vec<(Vec<u32>, Vec<f64>, Vec<f64>)> = series
        .par_iter()
        .map(|s| {
            let values: Vec<f64> = s.values[..=train_end].iter().map(|&v| v as f64).collect();
            let t_start = match pad {
                PadPolicy::ZeroPad => 0,
                PadPolicy::Drop => n_lags,
            };
            if t_start > train_end {
                if pad == PadPolicy::Drop {
                    log::warn!(
                        "series `{}`: training span shorter than {n_lags} lags, no rows under Drop",
                        s.id
                    );
                }
                return (Vec::new(), Vec::new(), Vec::new());
            }
            let n_rows = train_end - t_start + 1;
            let mut ts = Vec::with_capacity(n_rows);
            let mut feats = vec![0.0; n_rows * n_lags];
            let mut targets = Vec::with_capacity(n_rows);
            for (i, t) in (t_start..=train_end).enumerate() {
                window(&values, t, &mut feats[i * n_lags..(i + 1) * n_lags]);
                ts.push(t as u32);
                targets.push(values[t]);
            }
            (ts, feats, targets)
        })
        .collect();

    let mut out = LagMatrix {
        n_lags,
        series_ids: series.iter().map(|s| s.id.clone()).collect(),
        row_series: Vec::new(),
        row_t: Vec::new(),
        features: Vec::new(),
        targets: Vec::new(),
    };
    for (idx, (ts, feats, targets)) in per_series.into_iter().enumerate() {
        out.row_series.extend(std::iter::repeat(idx as u32).take(ts.len()));
        out.row_t.extend(ts);
        out.features.extend(feats);
        out.targets.extend(targets);
    }
    Ok(out)
}

/// Anything that maps one lag window to one point prediction.
pub trait PointModel: Send + Sync {
    fn predict_row(&self, features: &[f64]) -> f64;
}

/// Point forecasts for one series over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPath {
    pub series_id: String,
    pub values: Vec<f64>,
}

/// Forecast `h` steps by feeding each prediction back as the next step's
/// most recent lag. Predictions are clamped at 0 before feedback and output;
/// the fed-back values stay unrounded.
pub fn recursive_forecast(
    model: &dyn PointModel,
    series: &SalesSeries,
    train_end: usize,
    h: usize,
    n_lags: usize,
) -> Result<ForecastPath> {
    let mut extended: Vec<f64> = series.values[..=train_end.min(series.len() - 1)]
        .iter()
        .map(|&v| v as f64)
        .collect();
    let mut buf = vec![0.0; n_lags];
    let mut out = Vec::with_capacity(h);
    for step in 1..=h {
        window(&extended, extended.len(), &mut buf);
        let pred = model.predict_row(&buf);
        if !pred.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite prediction for series `{}` at step {step}",
                series.id
            )));
        }
        let pred = pred.max(0.0);
        extended.push(pred);
        out.push(pred);
    }
    Ok(ForecastPath { series_id: series.id.clone(), values: out })
}

/// Debug dump: raw little-endian f64 rows of `n_lags` features followed by
/// the target, with a plain-text sidecar describing the layout.
pub fn dump_lag_matrix(matrix: &LagMatrix, data_path: &Path, schema_path: &Path) -> Result<()> {
    let mut data = std::io::BufWriter::new(std::fs::File::create(data_path)?);
    for row in 0..matrix.n_rows() {
        for &v in matrix.feature_row(row) {
            data.write_all(&v.to_le_bytes())?;
        }
        data.write_all(&matrix.targets[row].to_le_bytes())?;
    }
    data.flush()?;

    let mut schema = std::io::BufWriter::new(std::fs::File::create(schema_path)?);
    writeln!(schema, "rows {}", matrix.n_rows())?;
    writeln!(schema, "cols {}", matrix.n_lags + 1)?;
    writeln!(schema, "dtype f64 little-endian row-major")?;
    let lag_names: Vec<String> = (1..=matrix.n_lags).map(|j| format!("lag_{j}")).collect();
    writeln!(schema, "columns {},target", lag_names.join(","))?;
    schema.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: &[u32]) -> SalesSeries {
        SalesSeries::new("s", "2020-01-01".parse().unwrap(), values.to_vec())
    }

    struct Fn2(Box<dyn Fn(&[f64]) -> f64 + Send + Sync>);
    impl PointModel for Fn2 {
        fn predict_row(&self, features: &[f64]) -> f64 {
            (self.0)(features)
        }
    }

    #[test]
    fn drop_padding_keeps_full_windows_only() {
        let m = embed(&[series(&[1, 2, 3])], 2, 2, PadPolicy::Drop).unwrap();
        assert_eq!(m.n_rows(), 1);
        assert_eq!(m.feature_row(0), &[2.0, 1.0]);
        assert_eq!(m.targets, vec![3.0]);
    }

    #[test]
    fn zero_padding_embeds_every_time() {
        let m = embed(&[series(&[1, 2, 3])], 2, 2, PadPolicy::ZeroPad).unwrap();
        assert_eq!(m.n_rows(), 3);
        assert_eq!(m.feature_row(0), &[0.0, 0.0]);
        assert_eq!(m.feature_row(1), &[1.0, 0.0]);
        assert_eq!(m.feature_row(2), &[2.0, 1.0]);
        assert_eq!(m.targets, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn drop_row_count_oracle() {
        let a = series(&vec![1; 400]);
        let b = SalesSeries::new("b", "2020-01-01".parse().unwrap(), vec![2; 400]);
        let m = embed(&[a, b], 399, 100, PadPolicy::Drop).unwrap();
        assert_eq!(m.n_rows(), 2 * (400 - 100));
    }

    #[test]
    fn zero_lags_is_a_config_error() {
        assert!(embed(&[series(&[1])], 0, 0, PadPolicy::Drop).is_err());
    }

    #[test]
    fn constant_model_forecasts_constant() {
        let m = Fn2(Box::new(|_| 5.0));
        let path = recursive_forecast(&m, &series(&[1, 2]), 1, 3, 2).unwrap();
        assert_eq!(path.values, vec![5.0, 5.0, 5.0]);
    }

    #[test]
    fn identity_lag_model_is_a_fixed_point() {
        let m = Fn2(Box::new(|f| f[0]));
        let path = recursive_forecast(&m, &series(&[3, 9, 7]), 2, 3, 2).unwrap();
        assert_eq!(path.values, vec![7.0, 7.0, 7.0]);
    }

    #[test]
    fn linear_recursion_matches_hand_oracle() {
        // f(x) = 1 + 0.5·x₁ on a series ending at 4
        let m = Fn2(Box::new(|f| 1.0 + 0.5 * f[0]));
        let path = recursive_forecast(&m, &series(&[0, 4]), 1, 3, 3).unwrap();
        let s1 = 1.0 + 0.5 * 4.0;
        let s2 = 1.0 + 0.5 * s1;
        let s3 = 1.0 + 0.5 * s2;
        assert_eq!(path.values, vec![s1, s2, s3]);
    }

    #[test]
    fn one_step_equals_single_model_call() {
        let m = Fn2(Box::new(|f| 2.0 * f[0] - f[1]));
        let s = series(&[5, 1, 8]);
        let path = recursive_forecast(&m, &s, 2, 1, 2).unwrap();
        assert_eq!(path.values, vec![2.0 * 8.0 - 1.0]);
    }

    #[test]
    fn negative_predictions_clamp_to_zero_before_feedback() {
        let m = Fn2(Box::new(|f| f[0] - 10.0));
        let path = recursive_forecast(&m, &series(&[4]), 0, 2, 1).unwrap();
        assert_eq!(path.values, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_prediction_names_series_and_step() {
        let m = Fn2(Box::new(|_| f64::NAN));
        let err = recursive_forecast(&m, &series(&[4]), 0, 2, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`s`") && msg.contains("step 1"), "{msg}");
    }

    #[test]
    fn shifted_targets_drop_out_of_span_rows() {
        let s = series(&[1, 2, 3, 4, 5]);
        let base = embed(std::slice::from_ref(&s), 4, 2, PadPolicy::Drop).unwrap();
        assert_eq!(base.n_rows(), 3); // t = 2, 3, 4
        let shifted = base.shift_targets(std::slice::from_ref(&s), 2, 4);
        assert_eq!(shifted.n_rows(), 1); // only t=2 can look 2 ahead
        assert_eq!(shifted.targets, vec![5.0]);
        assert_eq!(shifted.feature_row(0), &[2.0, 1.0]);
    }

    #[test]
    fn binary_dump_round_trips_via_raw_bytes() {
        let m = embed(&[series(&[1, 2, 3])], 2, 2, PadPolicy::ZeroPad).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("lags.bin");
        let schema = dir.path().join("lags.schema.txt");
        dump_lag_matrix(&m, &data, &schema).unwrap();

        let bytes = std::fs::read(&data).unwrap();
        assert_eq!(bytes.len(), m.n_rows() * (m.n_lags + 1) * 8);
        let first: Vec<f64> = bytes[..24]
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(first, vec![0.0, 0.0, 1.0]);
        let text = std::fs::read_to_string(&schema).unwrap();
        assert!(text.contains("rows 3") && text.contains("lag_2,target"), "{text}");
    }

    proptest! {
        /// Every embedded row reproduces the source slice exactly.
        #[test]
        fn rows_reproduce_source_windows(
            values in proptest::collection::vec(0u32..9, 5..30),
            n_lags in 1usize..6,
        ) {
            let s = series(&values);
            let train_end = values.len() - 1;
            let m = embed(std::slice::from_ref(&s), train_end, n_lags, PadPolicy::ZeroPad).unwrap();
            for row in 0..m.n_rows() {
                let t = m.row_t[row] as usize;
                prop_assert_eq!(m.targets[row], values[t] as f64);
                for (j, &f) in m.feature_row(row).iter().enumerate() {
                    let expect = if t > j { values[t - j - 1] as f64 } else { 0.0 };
                    prop_assert_eq!(f, expect);
                }
            }
        }
    }
}
