//! Service and CLI configuration file.
//!
//! ```toml
//! port = 8080
//! storage_path = "alpool.db"
//! budget = 400
//!
//! [[groups]]
//! group_id = 1
//! labelers = [1, 2, 3]
//!
//! [[labelers]]
//! labeler_id = 1
//! name = "ana"
//! token = "s3cret"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::committee::DEFAULT_N_MMAX;
use crate::domain::{validate_groups, DomainError, GroupId, LabelerGroup, LabelerId};
use crate::engine::{EngineConfig, DEFAULT_BUDGET};
use crate::partition::{PartitionConfig, DEFAULT_N_SMAX};
use crate::store::{Store, StoreError};

pub const ENV_PORT: &str = "ALPOOL_PORT";
pub const ENV_STORAGE: &str = "ALPOOL_STORAGE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid {var}: {value}")]
    Env { var: &'static str, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub group_id: u32,
    pub labelers: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelerConfig {
    pub labeler_id: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub token: String,
    #[serde(default)]
    pub expires_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorConfig {
    pub name: String,
    pub token: String,
    #[serde(default)]
    pub expires_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub port: u16,
    pub storage_path: PathBuf,
    pub budget: usize,
    pub n_smax: usize,
    pub n_mmax: usize,
    /// Approve ontology suggestions on submission instead of waiting for an
    /// operator.
    pub auto_approve: bool,
    pub console_dir: Option<PathBuf>,
    pub groups: Vec<GroupConfig>,
    pub labelers: Vec<LabelerConfig>,
    pub operators: Vec<OperatorConfig>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            port: 8080,
            storage_path: PathBuf::from("alpool.db"),
            budget: DEFAULT_BUDGET,
            n_smax: DEFAULT_N_SMAX,
            n_mmax: DEFAULT_N_MMAX,
            auto_approve: true,
            console_dir: None,
            groups: Vec::new(),
            labelers: Vec::new(),
            operators: Vec::new(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get(ENV_PORT) {
            self.port = v.trim().parse().map_err(|_| ConfigError::Env { var: ENV_PORT, value: v })?;
        }
        if let Some(v) = get(ENV_STORAGE) {
            if v.is_empty() {
                return Err(ConfigError::Env { var: ENV_STORAGE, value: v });
            }
            self.storage_path = PathBuf::from(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.budget == 0 || self.n_smax == 0 || self.n_mmax == 0 {
            return Err(ConfigError::Invalid("budget, n_smax and n_mmax must be positive".into()));
        }
        validate_groups(&self.label_groups())?;
        let grouped: BTreeSet<u32> = self.groups.iter().flat_map(|g| g.labelers.iter().copied()).collect();
        let mut ids = BTreeSet::new();
        for l in &self.labelers {
            if !ids.insert(l.labeler_id) {
                return Err(ConfigError::Invalid(format!("labeler {} listed twice", l.labeler_id)));
            }
            if !grouped.contains(&l.labeler_id) {
                return Err(ConfigError::Invalid(format!("labeler {} belongs to no group", l.labeler_id)));
            }
        }
        let mut tokens = BTreeSet::new();
        for t in self.labelers.iter().map(|l| &l.token).chain(self.operators.iter().map(|o| &o.token)) {
            if t.is_empty() {
                return Err(ConfigError::Invalid("empty token".into()));
            }
            if !tokens.insert(t) {
                return Err(ConfigError::Invalid("token shared by two sessions".into()));
            }
        }
        Ok(())
    }

    pub fn label_groups(&self) -> Vec<LabelerGroup> {
        self.groups
            .iter()
            .map(|g| LabelerGroup::new(GroupId(g.group_id), g.labelers.iter().map(|&l| LabelerId(l))))
            .collect()
    }

    /// Display names, defaulting to `labeler<id>`.
    pub fn labeler_names(&self) -> BTreeMap<LabelerId, String> {
        let mut names: BTreeMap<LabelerId, String> = self
            .groups
            .iter()
            .flat_map(|g| g.labelers.iter())
            .map(|&l| (LabelerId(l), format!("labeler{l}")))
            .collect();
        for l in &self.labelers {
            if let Some(n) = &l.name {
                names.insert(LabelerId(l.labeler_id), n.clone());
            }
        }
        names
    }

    /// Opens the configured store and registers the configured groups and
    /// labelers in it.
    pub fn open_store(&self) -> Result<Store, StoreError> {
        let store = Store::open(&self.storage_path)?;
        if !self.groups.is_empty() {
            store.upsert_labelers(&self.label_groups(), &self.labeler_names())?;
        }
        Ok(store)
    }

    pub fn engine(&self) -> EngineConfig {
        EngineConfig {
            budget: self.budget,
            partition: PartitionConfig::new(self.n_smax),
            n_mmax: self.n_mmax,
            ..EngineConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
port = 9000
storage_path = "/tmp/x.db"
budget = 40
auto_approve = false

[[groups]]
group_id = 1
labelers = [1, 2, 3]

[[groups]]
group_id = 2
labelers = [4, 5]

[[labelers]]
labeler_id = 1
name = "ana"
token = "t1"
expires_at = "2030-01-01T00:00:00Z"

[[operators]]
name = "ops"
token = "op"
"#;

    #[test]
    fn parses_sample() {
        let c = Config::from_toml(SAMPLE).unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.budget, 40);
        assert_eq!(c.n_smax, DEFAULT_N_SMAX);
        assert_eq!(c.label_groups().len(), 2);
        assert_eq!(c.labeler_names()[&LabelerId(1)], "ana");
        assert_eq!(c.labeler_names()[&LabelerId(5)], "labeler5");
        assert!(c.labelers[0].expires_at.is_some());
        assert_eq!(c.engine().partition.n_smax, DEFAULT_N_SMAX);
    }

    #[test]
    fn env_overrides() {
        let mut c = Config::from_toml(SAMPLE).unwrap();
        c.apply_env(|k| match k {
            ENV_PORT => Some("7001".into()),
            ENV_STORAGE => Some("other.db".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.port, 7001);
        assert_eq!(c.storage_path, PathBuf::from("other.db"));
        assert!(c.apply_env(|k| (k == ENV_PORT).then(|| "abc".to_string())).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(Config::from_toml("budget = 0").is_err());
        assert!(Config::from_toml("colour = 1").is_err());
        let dup = "[[groups]]\ngroup_id=1\nlabelers=[1]\n[[groups]]\ngroup_id=2\nlabelers=[1]\n";
        assert!(Config::from_toml(dup).is_err());
        let orphan = "[[labelers]]\nlabeler_id=3\ntoken=\"x\"\n";
        assert!(Config::from_toml(orphan).is_err());
        let shared = "[[groups]]\ngroup_id=1\nlabelers=[1]\n[[labelers]]\nlabeler_id=1\ntoken=\"x\"\n[[operators]]\nname=\"o\"\ntoken=\"x\"\n";
        assert!(Config::from_toml(shared).is_err());
    }
}
