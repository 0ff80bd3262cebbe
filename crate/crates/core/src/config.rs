//! Experiment configuration: plain key=value files, profile defaults,
//! override layering, and the reproducibility manifest.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::classify::{ClassifyOptions, DemandClass};
use crate::error::{Error, Result};
use crate::features::PadPolicy;
use crate::gbt::{GbtParams, LossKind};
use crate::topdown::DistChoice;

/// Nine-level quantile grid used for the m5 profile.
pub const M5_LEVELS: [f64; 9] =
    [0.005, 0.025, 0.165, 0.25, 0.5, 0.75, 0.835, 0.975, 0.995];

/// Two-level grid used by the retail profiles.
pub const RETAIL_LEVELS: [f64; 2] = [0.1, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    M5,
    Favorita,
    Generic,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::M5 => "m5",
            Profile::Favorita => "favorita",
            Profile::Generic => "generic",
        }
    }

    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "m5" => Ok(Profile::M5),
            "favorita" => Ok(Profile::Favorita),
            "generic" => Ok(Profile::Generic),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected m5, favorita, or generic)"
            ))),
        }
    }

    fn default_levels(self) -> Vec<f64> {
        match self {
            Profile::M5 => M5_LEVELS.to_vec(),
            Profile::Favorita | Profile::Generic => RETAIL_LEVELS.to_vec(),
        }
    }
}

/// Which demand classes a run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassFilter {
    All,
    One(DemandClass),
}

impl ClassFilter {
    pub fn parse(s: &str) -> Result<ClassFilter> {
        if s == "all" {
            Ok(ClassFilter::All)
        } else {
            Ok(ClassFilter::One(DemandClass::parse(s)?))
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassFilter::All => "all",
            ClassFilter::One(c) => c.as_str(),
        }
    }

    /// Classes covered, in the fixed reporting order.
    pub fn classes(self) -> Vec<DemandClass> {
        match self {
            ClassFilter::All => DemandClass::ALL.to_vec(),
            ClassFilter::One(c) => vec![c],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Pr,
    Lasso,
    GbtL2,
    GbtL1,
    GbtHuber,
    GbtPoisson,
    GbtTweedie,
    GbtNegBin,
}

impl ModelChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelChoice::Pr => "pr",
            ModelChoice::Lasso => "lasso",
            ModelChoice::GbtL2 => "gbt-l2",
            ModelChoice::GbtL1 => "gbt-l1",
            ModelChoice::GbtHuber => "gbt-huber",
            ModelChoice::GbtPoisson => "gbt-poisson",
            ModelChoice::GbtTweedie => "gbt-tweedie",
            ModelChoice::GbtNegBin => "gbt-negbin",
        }
    }

    pub fn parse(s: &str) -> Result<ModelChoice> {
        match s {
            "pr" => Ok(ModelChoice::Pr),
            "lasso" => Ok(ModelChoice::Lasso),
            "gbt-l2" => Ok(ModelChoice::GbtL2),
            "gbt-l1" => Ok(ModelChoice::GbtL1),
            "gbt-huber" => Ok(ModelChoice::GbtHuber),
            "gbt-poisson" => Ok(ModelChoice::GbtPoisson),
            "gbt-tweedie" => Ok(ModelChoice::GbtTweedie),
            "gbt-negbin" => Ok(ModelChoice::GbtNegBin),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected pr, lasso, or gbt-<loss>)"
            ))),
        }
    }
}

/// Everything a run needs, resolved from profile defaults, a config file,
/// and command-line overrides, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sales: PathBuf,
    pub hierarchy: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub profile: Profile,
    pub seed: u64,
    pub dist: DistChoice,
    pub class_filter: ClassFilter,
    pub model: ModelChoice,
    pub horizon: usize,
    pub n_lags: usize,
    pub levels: Vec<f64>,
    pub variance_window: Option<usize>,
    pub shared_p: bool,
    pub gbt_large: bool,
    pub pad: PadPolicy,
    pub huber_delta: f64,
    pub tweedie_p: f64,
    pub adi_threshold: f64,
    pub cv2_threshold: f64,
    pub cv2_nonzero_only: bool,
    pub sample_sizes: Vec<usize>,
    pub repeats: usize,
    pub folds: usize,
}

impl ExperimentConfig {
    pub fn defaults(profile: Profile) -> ExperimentConfig {
        let base = ClassifyOptions::default();
        ExperimentConfig {
            sales: PathBuf::new(),
            hierarchy: None,
            output_dir: PathBuf::from("out"),
            profile,
            seed: 0,
            dist: DistChoice::Poisson,
            class_filter: ClassFilter::All,
            model: ModelChoice::Pr,
            horizon: 28,
            n_lags: 100,
            levels: profile.default_levels(),
            variance_window: None,
            shared_p: false,
            gbt_large: false,
            pad: PadPolicy::ZeroPad,
            huber_delta: 1.0,
            tweedie_p: 1.5,
            adi_threshold: base.adi_threshold,
            cv2_threshold: base.cv2_threshold,
            cv2_nonzero_only: base.nonzero_sizes_only,
            sample_sizes: Vec::new(),
            repeats: 100,
            folds: 5,
        }
    }

    /// Resolve a config from ordered key=value pairs; later pairs win. The
    /// profile (last occurrence) is resolved first so its defaults apply
    /// before any other override.
    pub fn build(pairs: &[(String, String)]) -> Result<ExperimentConfig> {
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| Profile::parse(v))
            .transpose()?
            .unwrap_or(Profile::Generic);
        let mut cfg = ExperimentConfig::defaults(profile);
        for (key, value) in pairs {
            cfg.apply(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad_num = |key: &str, value: &str| {
            Error::Config(format!("key '{key}': cannot parse '{value}' as a number"))
        };
        match key {
            "sales" => self.sales = PathBuf::from(value),
            "hierarchy" => {
                self.hierarchy =
                    if value == "none" { None } else { Some(PathBuf::from(value)) }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "profile" => self.profile = Profile::parse(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad_num(key, value))?,
            "dist" => self.dist = DistChoice::parse(value)?,
            "class" => self.class_filter = ClassFilter::parse(value)?,
            "model" => self.model = ModelChoice::parse(value)?,
            "horizon" => self.horizon = value.parse().map_err(|_| bad_num(key, value))?,
            "n_lags" => self.n_lags = value.parse().map_err(|_| bad_num(key, value))?,
            "levels" => {
                self.levels = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| bad_num(key, v)))
                    .collect::<Result<Vec<f64>>>()?
            }
            "variance_window" => {
                self.variance_window = if value == "none" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad_num(key, value))?)
                }
            }
            "shared_p" => self.shared_p = parse_bool(key, value)?,
            "gbt_profile" => {
                self.gbt_large = match value {
                    "default" => false,
                    "large" => true,
                    other => {
                        return Err(Error::Config(format!(
                            "key 'gbt_profile': expected default or large, got '{other}'"
                        )))
                    }
                }
            }
            "pad" => {
                self.pad = match value {
                    "zeropad" => PadPolicy::ZeroPad,
                    "drop" => PadPolicy::Drop,
                    other => {
                        return Err(Error::Config(format!(
                            "key 'pad': expected zeropad or drop, got '{other}'"
                        )))
                    }
                }
            }
            "huber_delta" => {
                self.huber_delta = value.parse().map_err(|_| bad_num(key, value))?
            }
            "tweedie_p" => self.tweedie_p = value.parse().map_err(|_| bad_num(key, value))?,
            "adi_threshold" => {
                self.adi_threshold = value.parse().map_err(|_| bad_num(key, value))?
            }
            "cv2_threshold" => {
                self.cv2_threshold = value.parse().map_err(|_| bad_num(key, value))?
            }
            "cv2_nonzero_only" => self.cv2_nonzero_only = parse_bool(key, value)?,
            "sample_sizes" => {
                self.sample_sizes = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| bad_num(key, v)))
                    .collect::<Result<Vec<usize>>>()?
            }
            "repeats" => self.repeats = value.parse().map_err(|_| bad_num(key, value))?,
            "folds" => self.folds = value.parse().map_err(|_| bad_num(key, value))?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.n_lags == 0 {
            return Err(Error::Config("n_lags must be at least 1".into()));
        }
        crate::dist::validate_levels(&self.levels)?;
        if self.levels.is_empty() {
            return Err(Error::Config("need at least one quantile level".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.sample_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("sample sizes must be at least 1".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        if !(self.tweedie_p > 1.0 && self.tweedie_p < 2.0) {
            return Err(Error::Config("tweedie_p must lie in (1, 2)".into()));
        }
        Ok(())
    }

    pub fn classify_options(&self) -> ClassifyOptions {
        ClassifyOptions {
            adi_threshold: self.adi_threshold,
            cv2_threshold: self.cv2_threshold,
            nonzero_sizes_only: self.cv2_nonzero_only,
        }
    }

    pub fn gbt_params(&self) -> GbtParams {
        if self.gbt_large {
            GbtParams::preset_large(self.seed)
        } else {
            GbtParams { seed: self.seed, ..GbtParams::default() }
        }
    }

    /// Boosting loss for the configured model, None for the linear models.
    pub fn gbt_loss(&self) -> Option<LossKind> {
        match self.model {
            ModelChoice::Pr | ModelChoice::Lasso => None,
            ModelChoice::GbtL2 => Some(LossKind::L2),
            ModelChoice::GbtL1 => Some(LossKind::L1),
            ModelChoice::GbtHuber => Some(LossKind::Huber(self.huber_delta)),
            ModelChoice::GbtPoisson => Some(LossKind::Poisson),
            ModelChoice::GbtTweedie => Some(LossKind::Tweedie(self.tweedie_p)),
            ModelChoice::GbtNegBin => Some(LossKind::NegBin(1.0)),
        }
    }

    /// Canonical sorted key=value rendering; the manifest hashes this.
    pub fn canonical_text(&self) -> String {
        let levels =
            self.levels.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let sizes =
            self.sample_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("adi_threshold={}", self.adi_threshold),
            format!("class={}", self.class_filter.as_str()),
            format!("cv2_nonzero_only={}", self.cv2_nonzero_only),
            format!("cv2_threshold={}", self.cv2_threshold),
            format!("dist={}", self.dist.as_str()),
            format!("folds={}", self.folds),
            format!("gbt_profile={}", if self.gbt_large { "large" } else { "default" }),
            format!(
                "hierarchy={}",
                self.hierarchy.as_deref().map_or("none".into(), |p| p.display().to_string())
            ),
            format!("horizon={}", self.horizon),
            format!("huber_delta={}", self.huber_delta),
            format!("levels={levels}"),
            format!("model={}", self.model.as_str()),
            format!("n_lags={}", self.n_lags),
            format!("output_dir={}", self.output_dir.display()),
            format!(
                "pad={}",
                if self.pad == PadPolicy::ZeroPad { "zeropad" } else { "drop" }
            ),
            format!("profile={}", self.profile.as_str()),
            format!("repeats={}", self.repeats),
            format!("sales={}", self.sales.display()),
            format!("sample_sizes={sizes}"),
            format!("seed={}", self.seed),
            format!("shared_p={}", self.shared_p),
            format!("tweedie_p={}", self.tweedie_p),
            format!(
                "variance_window={}",
                self.variance_window.map_or("none".into(), |w| w.to_string())
            ),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Write `manifest.txt` into the output directory: config hash, seed,
    /// crate version, then the canonical config. Deliberately free of
    /// timestamps so reruns are byte-identical.
    pub fn write_manifest(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join("manifest.txt");
        let body = format!(
            "config_sha256 {}\nseed {}\nversion {}\n\n{}",
            self.config_hash(),
            self.seed,
            env!("CARGO_PKG_VERSION"),
            self.canonical_text()
        );
        std::fs::write(&path, body)?;
        Ok(path)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "key '{key}': expected true or false, got '{other}'"
        ))),
    }
}

/// Read ordered key=value pairs from a config file. `#` starts a comment;
/// blank lines are skipped; a key may appear only once per file.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{} line {}: expected key=value, got '{raw}'",
                path.display(),
                lineno + 1
            )));
        };
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "{} line {}: empty key or value",
                path.display(),
                lineno + 1
            )));
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!(
                "{} line {}: duplicate key '{key}'",
                path.display(),
                lineno + 1
            )));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}
