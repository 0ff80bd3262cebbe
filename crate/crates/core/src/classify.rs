//! Demand classification: average demand interval (ADI) and squared
//! coefficient of variation (CV²) per series, mapped to the four classes
//! that partition all downstream training and evaluation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::series::{Dataset, Level, SalesSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DemandClass {
    Smooth,
    Erratic,
    Intermittent,
    Lumpy,
}

impl DemandClass {
    pub const ALL: [DemandClass; 4] =
        [DemandClass::Smooth, DemandClass::Erratic, DemandClass::Intermittent, DemandClass::Lumpy];

    pub fn as_str(self) -> &'static str {
        match self {
            DemandClass::Smooth => "smooth",
            DemandClass::Erratic => "erratic",
            DemandClass::Intermittent => "intermittent",
            DemandClass::Lumpy => "lumpy",
        }
    }

    pub fn parse(s: &str) -> Result<DemandClass> {
        match s.to_ascii_lowercase().as_str() {
            "smooth" => Ok(DemandClass::Smooth),
            "erratic" => Ok(DemandClass::Erratic),
            "intermittent" => Ok(DemandClass::Intermittent),
            "lumpy" => Ok(DemandClass::Lumpy),
            other => Err(Error::Config(format!("unknown demand class `{other}`"))),
        }
    }
}

impl std::fmt::Display for DemandClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Sparsity and size-variability statistics for one series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandProfile {
    /// Days available since first sale per day with a sale; ≥ 1.
    pub adi: f64,
    /// Squared coefficient of variation of daily sales.
    pub cv2: f64,
    pub class: DemandClass,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifyOptions {
    pub adi_threshold: f64,
    pub cv2_threshold: f64,
    /// Compute CV² over non-zero sale sizes only instead of every day from
    /// the first sale onward.
    pub nonzero_sizes_only: bool,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions { adi_threshold: 1.32, cv2_threshold: 0.49, nonzero_sizes_only: false }
    }
}

/// Mean and sample (n−1) standard deviation; sd is 0 when fewer than two
/// observations exist.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Classify one series from its training span `[0, train_end]`.
///
/// Statistics cover `[first_nonzero, train_end]`. Boundary ties on either
/// threshold fall into the ≥ branch.
pub fn demand_stats(
    series: &SalesSeries,
    train_end: usize,
    opts: &ClassifyOptions,
) -> Result<DemandProfile> {
    let first = series.first_nonzero.filter(|&i| i <= train_end).ok_or_else(|| {
        Error::Data(format!("unclassifiable: no sales in series `{}`", series.id))
    })?;
    let span = &series.values[first..=train_end];
    let days_with_sale = span.iter().filter(|&&v| v > 0).count();
    let adi = span.len() as f64 / days_with_sale as f64;

    let sizes: Vec<f64> = if opts.nonzero_sizes_only {
        span.iter().filter(|&&v| v > 0).map(|&v| v as f64).collect()
    } else {
        span.iter().map(|&v| v as f64).collect()
    };
    let (mean, sd) = mean_sd(&sizes);
    let cv2 = (sd / mean) * (sd / mean);

    let class = match (adi < opts.adi_threshold, cv2 < opts.cv2_threshold) {
        (true, true) => DemandClass::Smooth,
        (true, false) => DemandClass::Erratic,
        (false, true) => DemandClass::Intermittent,
        (false, false) => DemandClass::Lumpy,
    };
    Ok(DemandProfile { adi, cv2, class })
}

/// Class partition of one level's series ids, plus the ids excluded as
/// unclassifiable (all-zero training span).
#[derive(Debug, Clone, Default)]
pub struct ClassPartition {
    pub by_class: BTreeMap<DemandClass, Vec<String>>,
    pub excluded: Vec<String>,
}

impl ClassPartition {
    pub fn ids(&self, class: DemandClass) -> &[String] {
        self.by_class.get(&class).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn total(&self) -> usize {
        self.by_class.values().map(|v| v.len()).sum::<usize>() + self.excluded.len()
    }
}

/// Partition one level of the dataset by demand class.
///
/// Aggregates are classified from their own statistics. Lower series inherit
/// the class of their parent aggregate, the grouping used for lower-level
/// evaluation; a lower series whose parent is unclassifiable is excluded.
pub fn partition_by_class(
    dataset: &Dataset,
    level: Level,
    opts: &ClassifyOptions,
) -> ClassPartition {
    let mut out = ClassPartition::default();
    match level {
        Level::Aggregate => {
            for s in &dataset.aggregate {
                match demand_stats(s, dataset.train_end, opts) {
                    Ok(p) => out.by_class.entry(p.class).or_default().push(s.id.clone()),
                    Err(_) => out.excluded.push(s.id.clone()),
                }
            }
        }
        Level::Lower => {
            let mut parent_class: BTreeMap<&str, Option<DemandClass>> = BTreeMap::new();
            for s in &dataset.aggregate {
                let class = demand_stats(s, dataset.train_end, opts).ok().map(|p| p.class);
                parent_class.insert(s.id.as_str(), class);
            }
            for s in &dataset.lower {
                let class = dataset
                    .hierarchy
                    .parent(&s.id)
                    .and_then(|p| parent_class.get(p).copied().flatten());
                match class {
                    Some(c) => out.by_class.entry(c).or_default().push(s.id.clone()),
                    None => out.excluded.push(s.id.clone()),
                }
            }
        }
    }
    out
}

/// Write `demand_classes.csv` rows for both levels.
///
/// Aggregate rows carry their own statistics and class. Lower rows carry the
/// series' own adi/cv2 (nan when it has no sales) with the inherited parent
/// class used for evaluation grouping.
pub fn write_demand_classes_csv(path: &std::path::Path, dataset: &Dataset, opts: &ClassifyOptions) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "level", "adi", "cv2", "class"])?;
    let mut agg_class: BTreeMap<&str, Option<DemandClass>> = BTreeMap::new();
    for s in &dataset.aggregate {
        let profile = demand_stats(s, dataset.train_end, opts).ok();
        agg_class.insert(s.id.as_str(), profile.map(|p| p.class));
        let (adi, cv2, class) = match profile {
            Some(p) => (p.adi, p.cv2, p.class.as_str()),
            None => (f64::NAN, f64::NAN, "excluded"),
        };
        w.write_record([s.id.as_str(), "A", &adi.to_string(), &cv2.to_string(), class])?;
    }
    for s in &dataset.lower {
        let own = demand_stats(s, dataset.train_end, opts).ok();
        let (adi, cv2) = own.map(|p| (p.adi, p.cv2)).unwrap_or((f64::NAN, f64::NAN));
        let inherited = dataset
            .hierarchy
            .parent(&s.id)
            .and_then(|p| agg_class.get(p).copied().flatten())
            .map(|c| c.as_str())
            .unwrap_or("excluded");
        w.write_record([s.id.as_str(), "L", &adi.to_string(), &cv2.to_string(), inherited])?;
    }
    w.flush()?;
    Ok(())
}
