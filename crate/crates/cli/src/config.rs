//! Service configuration: defaults, then an optional TOML file, then `DIMRANK_*`
//! environment variables. Nested keys use a double underscore, e.g.
//! `DIMRANK_TRAINER__ETA_EMB=0.1` or `DIMRANK_RECOMMENDER__TAU_REC=0.6`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dimrank_core::recommender::RecommenderConfig;
use dimrank_core::store::{latest_checkpoint, StoreOptions, SyncPolicy};
use dimrank_core::trainer::TrainerConfig;
use dimrank_core::{Dims, ModelCheckpoint, StoreError};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "DIMRANK_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub listen_address: String,
    pub dims: Dims,
    pub trainer: TrainerConfig,
    pub recommender: RecommenderConfig,
    /// Weight of the text score in search re-ranking.
    pub alpha: f64,
    pub sync: SyncPolicy,
    /// Feed size when a request gives no `limit`.
    pub feed_limit: usize,
    /// Search results when a request gives no `top_k`.
    pub top_k: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("dimrank-data"),
            listen_address: "127.0.0.1:8080".into(),
            dims: Dims::default(),
            trainer: TrainerConfig::default(),
            recommender: RecommenderConfig::default(),
            alpha: dimrank_core::search::DEFAULT_ALPHA,
            sync: SyncPolicy::Always,
            feed_limit: 20,
            top_k: 10,
        }
    }
}

impl ServiceConfig {
    /// Reads `path` (if any) and applies overrides from `env`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in env {
            if let Some(name) = key.strip_prefix(ENV_PREFIX) {
                set_path(&mut table, name, &value)?;
            }
        }
        let config: Self = toml::Value::Table(table).try_into().context("invalid configuration")?;
        config.validate()?;
        Ok(config)
    }

    /// [`load`](Self::load) with the process environment.
    pub fn from_env(path: Option<&Path>) -> Result<Self> {
        Self::load(path, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.user == 0 || self.dims.doc == 0 || self.dims.hidden == 0 {
            bail!("dimensions must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!("alpha must be in [0, 1]");
        }
        if self.feed_limit == 0 || self.top_k == 0 {
            bail!("feed_limit and top_k must be positive");
        }
        self.trainer.validate()?;
        self.recommender.validate()?;
        Ok(())
    }

    pub fn store_options(&self) -> StoreOptions {
        StoreOptions {
            sync: self.sync,
            ..StoreOptions::default()
        }
    }

    /// Creates the data directory and checks the dimensions against the newest checkpoint.
    pub fn prepare_data_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.data_dir).with_context(|| format!("creating {}", self.data_dir.display()))?;
        if let Some(path) = latest_checkpoint(&self.data_dir.join("checkpoints"))? {
            match ModelCheckpoint::load(&path, Some(self.dims)) {
                Ok(_) => {}
                Err(err @ StoreError::DimensionMismatch { .. }) => {
                    bail!("{}: {err}", path.display())
                }
                Err(err) => return Err(err).with_context(|| format!("reading {}", path.display())),
            }
        }
        Ok(())
    }
}

/// Sets `a__b__c` (case-insensitive) in `table`, parsing `raw` as a TOML value
/// and falling back to a plain string.
fn set_path(table: &mut toml::Table, name: &str, raw: &str) -> Result<()> {
    let keys: Vec<String> = name.split("__").map(str::to_lowercase).collect();
    if keys.iter().any(String::is_empty) {
        bail!("malformed configuration variable {ENV_PREFIX}{name}");
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for key in parents {
        node = node
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("{ENV_PREFIX}{name}: {key} is not a section"))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}
