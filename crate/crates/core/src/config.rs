//! Pipeline configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::filters::FilterCombo;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialising config: {0}")]
    Serialise(#[from] toml::ser::Error),
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

/// Input files. Relative paths resolve against the config file's folder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub ledger: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prices: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub breach_lists: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BucketSection {
    /// `l`: number of trailing tokens compared.
    pub suffix_len: usize,
    /// `t`: Jaccard merge threshold (strictly greater merges).
    pub threshold: f64,
    /// Pair sample size for within-bucket quality.
    pub quality_sample: usize,
}

impl Default for BucketSection {
    fn default() -> Self {
        Self {
            suffix_len: 50,
            threshold: 0.3,
            quality_sample: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerSection {
    pub check_fees: bool,
    pub require_resolved: bool,
}

impl Default for LedgerSection {
    fn default() -> Self {
        Self {
            check_fees: true,
            require_resolved: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub exclude_coinjoin: bool,
    pub supercluster_limit: usize,
    pub exclude_tagged: bool,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            exclude_coinjoin: true,
            supercluster_limit: 10_000,
            exclude_tagged: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeScope {
    Global,
    PerCampaign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub range_enabled: bool,
    /// `p`: relative widening of the ransom-amount span.
    pub tolerance: Decimal,
    pub range_scope: RangeScope,
    /// Overrides the amounts extracted from spam when non-empty.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ransom_amounts: Vec<Decimal>,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            range_enabled: true,
            tolerance: Decimal::new(1, 1),
            range_scope: RangeScope::Global,
            ransom_amounts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub max_depth: usize,
    pub width_limit: usize,
    /// Depth of the cluster table.
    pub report_depth: usize,
    /// Hops within which tagged entities are counted.
    pub tagged_within: usize,
    /// Clusters first seen before this date count as cash-out candidates.
    pub cutoff: NaiveDate,
    /// Payments traced and used as revenue denominator.
    pub combo: FilterCombo,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            max_depth: 3,
            width_limit: 100,
            report_depth: 2,
            tagged_within: 2,
            cutoff: NaiveDate::from_ymd_opt(2018, 6, 1).expect("valid date"),
            combo: FilterCombo::CollectorRange,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Language,
    Campaign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub alpha: f64,
    pub resamples: usize,
    pub sample_size: usize,
    pub group_by: GroupBy,
    pub breach_fraction: f64,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            resamples: 100,
            sample_size: 30,
            group_by: GroupBy::Language,
            breach_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub bucket: BucketSection,
    #[serde(default)]
    pub ledger: LedgerSection,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub flows: FlowSection,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub cutoff: Option<NaiveDate>,
    pub suffix_len: Option<usize>,
    pub threshold: Option<f64>,
    pub tolerance: Option<Decimal>,
}

impl PipelineConfig {
    pub fn new(paths: Paths) -> Self {
        Self {
            seed: 0,
            paths,
            bucket: Default::default(),
            ledger: Default::default(),
            cluster: Default::default(),
            filter: Default::default(),
            flows: Default::default(),
            stats: Default::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(c) = o.cutoff {
            self.flows.cutoff = c;
        }
        if let Some(l) = o.suffix_len {
            self.bucket.suffix_len = l;
        }
        if let Some(t) = o.threshold {
            self.bucket.threshold = t;
        }
        if let Some(p) = o.tolerance {
            self.filter.tolerance = p;
        }
        self.validate()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return Err(invalid("seed", format!("must not exceed {}", i64::MAX)));
        }
        if self.paths.corpus.as_os_str().is_empty() {
            return Err(invalid("paths.corpus", "must be set"));
        }
        if self.paths.ledger.as_os_str().is_empty() {
            return Err(invalid("paths.ledger", "must be set"));
        }
        if self.bucket.suffix_len == 0 {
            return Err(invalid("bucket.suffix_len", "must be at least 1"));
        }
        let t = self.bucket.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid("bucket.threshold", format!("must lie in (0, 1), got {t}")));
        }
        if self.bucket.quality_sample < 2 {
            return Err(invalid("bucket.quality_sample", "must be at least 2"));
        }
        let p = self.filter.tolerance;
        if p < Decimal::ZERO || p >= Decimal::ONE {
            return Err(invalid("filter.tolerance", format!("must lie in [0, 1), got {p}")));
        }
        if self.filter.ransom_amounts.iter().any(|a| *a <= Decimal::ZERO) {
            return Err(invalid("filter.ransom_amounts", "amounts must be positive"));
        }
        if self.cluster.supercluster_limit == 0 {
            return Err(invalid("cluster.supercluster_limit", "must be at least 1"));
        }
        if self.flows.width_limit == 0 {
            return Err(invalid("flows.width_limit", "must be at least 1"));
        }
        if self.flows.report_depth > self.flows.max_depth {
            return Err(invalid("flows.report_depth", "cannot exceed flows.max_depth"));
        }
        if self.flows.tagged_within > self.flows.max_depth {
            return Err(invalid("flows.tagged_within", "cannot exceed flows.max_depth"));
        }
        let a = self.stats.alpha;
        if !(a > 0.0 && a < 1.0) {
            return Err(invalid("stats.alpha", format!("must lie in (0, 1), got {a}")));
        }
        if self.stats.resamples < 2 || self.stats.sample_size < 2 {
            return Err(invalid("stats.resamples", "resamples and sample_size must be at least 2"));
        }
        let f = self.stats.breach_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(invalid("stats.breach_fraction", format!("must lie in [0, 1], got {f}")));
        }
        Ok(())
    }
}
