//! Data model and dataset ingestion: daily sales series, the two-level
//! hierarchy, and the CSV formats they are read from.
//!
//! All series produced by ingestion share one calendar grid spanning the
//! earliest to the latest date seen in the input; days without a row are
//! zero-sales days by default. Counts are stored as integers, so aggregation
//! is exact.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

/// One daily sales series on the common calendar grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SalesSeries {
    pub id: String,
    pub start_date: NaiveDate,
    /// Units sold per day, non-negative.
    pub values: Vec<u32>,
    /// Index of the first strictly positive value, if any sale exists.
    pub first_nonzero: Option<usize>,
}

impl SalesSeries {
    pub fn new(id: impl Into<String>, start_date: NaiveDate, values: Vec<u32>) -> Self {
        let first_nonzero = values.iter().position(|&v| v > 0);
        SalesSeries { id: id.into(), start_date, values, first_nonzero }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Training values `[0, train_end]` as floats.
    pub fn train_f64(&self, train_end: usize) -> Vec<f64> {
        self.values[..=train_end].iter().map(|&v| v as f64).collect()
    }
}

/// How to treat calendar days with no row in a long-format file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapPolicy {
    /// Missing days are zero-sales days (retail convention).
    FillZero,
    /// Missing days are an error (strict, fully dense inputs).
    Error,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Clamp negative quantities (returns, corrections) to zero instead of
    /// rejecting the row.
    pub clamp_negatives: bool,
    pub gap_policy: GapPolicy,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { clamp_negatives: false, gap_policy: GapPolicy::FillZero }
    }
}

fn parse_date(s: &str, line: u64) -> Result<NaiveDate> {
    s.parse::<NaiveDate>()
        .map_err(|_| Error::Data(format!("line {line}: invalid date `{s}` (expected ISO-8601)")))
}

fn parse_quantity(s: &str, line: u64, opts: &IngestOptions) -> Result<u32> {
    let q: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("line {line}: invalid quantity `{s}`")))?;
    if !q.is_finite() {
        return Err(Error::Data(format!("line {line}: non-finite quantity `{s}`")));
    }
    let q = if q < 0.0 {
        if opts.clamp_negatives {
            0.0
        } else {
            return Err(Error::Data(format!(
                "line {line}: negative quantity {q} (enable negative clamping to accept)"
            )));
        }
    } else {
        q
    };
    Ok(q.round() as u32)
}

/// Read a long-format file with header `series_id,date,quantity`.
///
/// Returns one series per distinct id, sorted by id, all on the common grid
/// spanning the full date range of the file.
pub fn ingest_long_csv(path: &Path, opts: &IngestOptions) -> Result<Vec<SalesSeries>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["series_id", "date", "quantity"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "unexpected header {:?}, expected `series_id,date,quantity`",
            headers
        )));
    }

    let mut per_series: BTreeMap<String, BTreeMap<NaiveDate, u32>> = BTreeMap::new();
    let mut min_date: Option<NaiveDate> = None;
    let mut max_date: Option<NaiveDate> = None;

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::Data(format!(
                "line {line}: expected 3 fields, found {}",
                record.len()
            )));
        }
        let id = record[0].to_string();
        let date = parse_date(&record[1], line)?;
        let qty = parse_quantity(&record[2], line, opts)?;

        min_date = Some(min_date.map_or(date, |d| d.min(date)));
        max_date = Some(max_date.map_or(date, |d| d.max(date)));
        if per_series.entry(id.clone()).or_default().insert(date, qty).is_some() {
            return Err(Error::Data(format!(
                "duplicate entry for series `{id}` at {date}"
            )));
        }
    }

    let (Some(min_date), Some(max_date)) = (min_date, max_date) else {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    };
    let grid_len = (max_date - min_date).num_days() as usize + 1;

    let mut out = Vec::with_capacity(per_series.len());
    for (id, dated) in per_series {
        if opts.gap_policy == GapPolicy::Error && dated.len() != grid_len {
            return Err(Error::Data(format!(
                "series `{id}` covers {} of {grid_len} grid days and gap filling is disabled",
                dated.len()
            )));
        }
        let mut values = vec![0u32; grid_len];
        for (date, qty) in dated {
            values[(date - min_date).num_days() as usize] = qty;
        }
        out.push(SalesSeries::new(id, min_date, values));
    }
    Ok(out)
}

/// Read a wide-format file with header `id,d_1,...,d_N` (one row per series,
/// one column per day). `start_date` is the calendar date of column `d_1`.
pub fn ingest_wide_csv(
    path: &Path,
    opts: &IngestOptions,
    start_date: NaiveDate,
) -> Result<Vec<SalesSeries>> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || &headers[0] != "id" {
        return Err(Error::Data(format!(
            "unexpected wide header start {:?}, expected `id,d_1,...`",
            headers.iter().next()
        )));
    }
    let n_days = headers.len() - 1;
    if n_days == 0 {
        return Err(Error::Data("wide file has no day columns".into()));
    }

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != n_days + 1 {
            return Err(Error::Data(format!(
                "line {line}: expected {} fields, found {}",
                n_days + 1,
                record.len()
            )));
        }
        let id = record[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate series id `{id}`")));
        }
        let mut values = Vec::with_capacity(n_days);
        for field in record.iter().skip(1) {
            values.push(parse_quantity(field, line, opts)?);
        }
        out.push(SalesSeries::new(id, start_date, values));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Write series densely in the long format (inverse of `ingest_long_csv`).
pub fn write_long_csv(path: &Path, series: &[SalesSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "date", "quantity"])?;
    for s in series {
        for (i, &v) in s.values.iter().enumerate() {
            let date = s.start_date + chrono::Days::new(i as u64);
            w.write_record([s.id.as_str(), &date.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read the two-column mapping file with header `lower_id,aggregate_id`.
pub fn read_hierarchy_csv(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["lower_id", "aggregate_id"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "unexpected header {:?}, expected `lower_id,aggregate_id`",
            headers
        )));
    }
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::Data(format!(
                "line {line}: expected 2 fields, found {}",
                record.len()
            )));
        }
        let lower = record[0].to_string();
        let agg = record[1].to_string();
        if let Some(prev) = map.insert(lower.clone(), agg.clone()) {
            if prev != agg {
                return Err(Error::Data(format!(
                    "series `{lower}` mapped to both `{prev}` and `{agg}`"
                )));
            }
        }
    }
    if map.is_empty() {
        return Err(Error::Data(format!("{}: no mapping rows", path.display())));
    }
    Ok(map)
}

/// Many-to-one mapping between the lower level and the aggregate level.
#[derive(Debug, Clone, Default)]
pub struct HierarchyMap {
    parent_of: BTreeMap<String, String>,
    children_of: BTreeMap<String, Vec<String>>,
}

impl HierarchyMap {
    pub fn parent(&self, lower_id: &str) -> Option<&str> {
        self.parent_of.get(lower_id).map(|s| s.as_str())
    }

    /// Children of an aggregate, sorted by id.
    pub fn children(&self, aggregate_id: &str) -> &[String] {
        self.children_of.get(aggregate_id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn aggregates(&self) -> impl Iterator<Item = &str> {
        self.children_of.keys().map(|s| s.as_str())
    }

    pub fn n_aggregates(&self) -> usize {
        self.children_of.len()
    }

    pub fn n_lower(&self) -> usize {
        self.parent_of.len()
    }
}

/// Sum lower series into their aggregates over the common grid.
///
/// Every lower id must appear in `parent_of`; aggregation is exact integer
/// arithmetic. Aggregates come back sorted by id.
pub fn build_aggregates(
    lower: &[SalesSeries],
    parent_of: &BTreeMap<String, String>,
) -> Result<(Vec<SalesSeries>, HierarchyMap)> {
    let Some(first) = lower.first() else {
        return Err(Error::Data("no lower-level series to aggregate".into()));
    };
    let mut sums: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    let mut children_of: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for s in lower {
        if s.start_date != first.start_date || s.len() != first.len() {
            return Err(Error::Data(format!(
                "series `{}` is not on the common calendar grid",
                s.id
            )));
        }
        let parent = parent_of
            .get(&s.id)
            .ok_or_else(|| Error::Data(format!("series `{}` missing from hierarchy map", s.id)))?;
        let acc = sums.entry(parent).or_insert_with(|| vec![0u64; first.len()]);
        for (a, &v) in acc.iter_mut().zip(&s.values) {
            *a += v as u64;
        }
        children_of.entry(parent.clone()).or_default().push(s.id.clone());
    }

    let mut aggregates = Vec::with_capacity(sums.len());
    for (agg_id, acc) in sums {
        let mut values = Vec::with_capacity(acc.len());
        for v in acc {
            values.push(u32::try_from(v).map_err(|_| {
                Error::Data(format!("aggregate `{agg_id}` overflows the count range"))
            })?);
        }
        aggregates.push(SalesSeries::new(agg_id, first.start_date, values));
    }
    for children in children_of.values_mut() {
        children.sort();
    }
    let parent_of = lower
        .iter()
        .map(|s| (s.id.clone(), parent_of[&s.id].clone()))
        .collect();
    Ok((aggregates, HierarchyMap { parent_of, children_of }))
}

/// A fully assembled two-level dataset with its train/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Lower-level series, sorted by id.
    pub lower: Vec<SalesSeries>,
    /// Aggregate-level series, sorted by id.
    pub aggregate: Vec<SalesSeries>,
    pub hierarchy: HierarchyMap,
    /// Forecast horizon in days; the last `horizon` grid days are the test span.
    pub horizon: usize,
    /// Inclusive index of the last training observation.
    pub train_end: usize,
}

/// Which level of the hierarchy an operation applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Aggregate,
    Lower,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Aggregate => "A",
            Level::Lower => "L",
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Dataset {
    /// Build aggregates from `lower` and hold out the last `horizon` days as
    /// the test span.
    pub fn assemble(
        mut lower: Vec<SalesSeries>,
        parent_of: &BTreeMap<String, String>,
        horizon: usize,
    ) -> Result<Dataset> {
        lower.sort_by(|a, b| a.id.cmp(&b.id));
        let (aggregate, hierarchy) = build_aggregates(&lower, parent_of)?;
        let len = lower[0].len();
        if len <= horizon {
            return Err(Error::Data(format!(
                "series length {len} leaves no training data before a {horizon}-day holdout"
            )));
        }
        Ok(Dataset { lower, aggregate, hierarchy, horizon, train_end: len - horizon - 1 })
    }

    pub fn series(&self, level: Level) -> &[SalesSeries] {
        match level {
            Level::Aggregate => &self.aggregate,
            Level::Lower => &self.lower,
        }
    }

    pub fn find(&self, level: Level, id: &str) -> Option<&SalesSeries> {
        let set = self.series(level);
        set.binary_search_by(|s| s.id.as_str().cmp(id)).ok().map(|i| &set[i])
    }

    /// Actual test-span values for one series, `horizon` days after train_end.
    pub fn test_values<'a>(&self, series: &'a SalesSeries) -> &'a [u32] {
        &series.values[self.train_end + 1..=self.train_end + self.horizon]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write as _;

    fn date(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn tmp_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn gap_fill_produces_zeros() {
        let f = tmp_csv("series_id,date,quantity\ns1,2020-01-01,3\ns1,2020-01-03,2\n");
        let out = ingest_long_csv(f.path(), &IngestOptions::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].values, vec![3, 0, 2]);
        assert_eq!(out[0].start_date, date("2020-01-01"));
    }

    #[test]
    fn clamping_negative_quantities() {
        let f = tmp_csv("series_id,date,quantity\ns1,2020-01-01,-4\n");
        let opts = IngestOptions { clamp_negatives: true, ..Default::default() };
        let out = ingest_long_csv(f.path(), &opts).unwrap();
        assert_eq!(out[0].values, vec![0]);
        assert_eq!(out[0].first_nonzero, None);

        let err = ingest_long_csv(f.path(), &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn ids_sorted_lexicographically() {
        let f = tmp_csv("series_id,date,quantity\nzeta,2020-01-01,1\nalpha,2020-01-01,2\n");
        let out = ingest_long_csv(f.path(), &IngestOptions::default()).unwrap();
        let ids: Vec<_> = out.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, vec!["alpha", "zeta"]);
    }

    #[test]
    fn duplicate_cell_is_an_error() {
        let f = tmp_csv("series_id,date,quantity\ns1,2020-01-01,1\ns1,2020-01-01,2\n");
        let err = ingest_long_csv(f.path(), &IngestOptions::default()).unwrap_err();
        assert!(err.to_string().contains("s1"), "{err}");
        assert!(err.to_string().contains("2020-01-01"), "{err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = tmp_csv("series_id,date,quantity\n");
        assert!(ingest_long_csv(f.path(), &IngestOptions::default()).is_err());
    }

    #[test]
    fn malformed_row_names_the_line() {
        let f = tmp_csv("series_id,date,quantity\ns1,2020-01-01,1\ns1,not-a-date,2\n");
        let err = ingest_long_csv(f.path(), &IngestOptions::default()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn strict_gap_policy_rejects_sparse_series() {
        let f = tmp_csv("series_id,date,quantity\ns1,2020-01-01,3\ns1,2020-01-03,2\n");
        let opts = IngestOptions { gap_policy: GapPolicy::Error, ..Default::default() };
        let err = ingest_long_csv(f.path(), &opts).unwrap_err();
        assert!(err.to_string().contains("s1"), "{err}");
    }

    #[test]
    fn all_series_share_the_global_grid() {
        let f = tmp_csv(
            "series_id,date,quantity\na,2020-01-01,1\nb,2020-01-05,2\n",
        );
        let out = ingest_long_csv(f.path(), &IngestOptions::default()).unwrap();
        assert_eq!(out[0].values, vec![1, 0, 0, 0, 0]);
        assert_eq!(out[1].values, vec![0, 0, 0, 0, 2]);
        assert_eq!(out[1].first_nonzero, Some(4));
    }

    #[test]
    fn wide_format_round_trip() {
        let f = tmp_csv("id,d_1,d_2,d_3\nitem_b,1,0,2\nitem_a,0,4,0\n");
        let out =
            ingest_wide_csv(f.path(), &IngestOptions::default(), date("2011-01-29")).unwrap();
        assert_eq!(out[0].id, "item_a");
        assert_eq!(out[0].values, vec![0, 4, 0]);
        assert_eq!(out[1].values, vec![1, 0, 2]);
    }

    #[test]
    fn long_round_trip_is_bit_exact() {
        let f = tmp_csv("series_id,date,quantity\ns1,2020-01-01,3\ns1,2020-01-03,2\ns2,2020-01-02,9\n");
        let first = ingest_long_csv(f.path(), &IngestOptions::default()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_long_csv(out.path(), &first).unwrap();
        let second = ingest_long_csv(out.path(), &IngestOptions::default()).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn ingestion_is_row_order_independent() {
        let fwd = tmp_csv("series_id,date,quantity\ns1,2020-01-01,3\ns2,2020-01-02,9\ns1,2020-01-03,2\n");
        let rev = tmp_csv("series_id,date,quantity\ns1,2020-01-03,2\ns2,2020-01-02,9\ns1,2020-01-01,3\n");
        let a = ingest_long_csv(fwd.path(), &IngestOptions::default()).unwrap();
        let b = ingest_long_csv(rev.path(), &IngestOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_is_elementwise_sum() {
        let lower = vec![
            SalesSeries::new("c1", date("2020-01-01"), vec![1, 0, 2]),
            SalesSeries::new("c2", date("2020-01-01"), vec![0, 0, 1]),
        ];
        let map: BTreeMap<_, _> =
            [("c1".to_string(), "agg".to_string()), ("c2".to_string(), "agg".to_string())]
                .into_iter()
                .collect();
        let (aggs, hier) = build_aggregates(&lower, &map).unwrap();
        assert_eq!(aggs.len(), 1);
        assert_eq!(aggs[0].values, vec![1, 0, 3]);
        assert_eq!(hier.children("agg"), ["c1", "c2"]);
        assert_eq!(hier.parent("c2"), Some("agg"));
    }

    #[test]
    fn single_child_aggregate_equals_child() {
        let lower = vec![SalesSeries::new("only", date("2020-01-01"), vec![4, 5, 6])];
        let map: BTreeMap<_, _> = [("only".to_string(), "agg".to_string())].into_iter().collect();
        let (aggs, _) = build_aggregates(&lower, &map).unwrap();
        assert_eq!(aggs[0].values, lower[0].values);
    }

    #[test]
    fn missing_mapping_names_the_id() {
        let lower = vec![SalesSeries::new("orphan", date("2020-01-01"), vec![1])];
        let err = build_aggregates(&lower, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("orphan"), "{err}");
    }

    #[test]
    fn assemble_splits_train_and_test() {
        let lower = vec![SalesSeries::new("c1", date("2020-01-01"), vec![1, 2, 3, 4, 5])];
        let map: BTreeMap<_, _> = [("c1".to_string(), "a".to_string())].into_iter().collect();
        let ds = Dataset::assemble(lower, &map, 2).unwrap();
        assert_eq!(ds.train_end, 2);
        assert_eq!(ds.test_values(&ds.lower[0]), &[4, 5]);
        assert!(ds.find(Level::Aggregate, "a").is_some());
        assert!(ds.find(Level::Lower, "nope").is_none());
    }

    proptest! {
        #[test]
        fn aggregates_match_column_sum_oracle(
            cols in proptest::collection::vec(
                proptest::collection::vec(0u32..10, 5), 1..6),
        ) {
            let lower: Vec<SalesSeries> = cols
                .iter()
                .enumerate()
                .map(|(i, v)| SalesSeries::new(format!("c{i}"), date("2020-01-01"), v.clone()))
                .collect();
            let map: BTreeMap<_, _> =
                lower.iter().map(|s| (s.id.clone(), "agg".to_string())).collect();
            let (aggs, _) = build_aggregates(&lower, &map).unwrap();
            for t in 0..5 {
                let oracle: u32 = cols.iter().map(|c| c[t]).sum();
                prop_assert_eq!(aggs[0].values[t], oracle);
            }
        }
    }
}
