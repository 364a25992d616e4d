//! Optional TOML defaults. A value given on the command line always wins
//! over the file, and the file wins over the built-in default.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Config {
    pub pattern: Option<String>,
    pub strategy: Option<String>,
    pub budget: Option<usize>,
    pub stat_unit: Option<String>,
    pub embedder: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub min_cells: Option<usize>,
    pub hnsw: HnswConfig,
    pub minhash: MinHashConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct HnswConfig {
    pub m: Option<usize>,
    pub ef_construction: Option<usize>,
    pub ef_search: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct MinHashConfig {
    pub m: Option<usize>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
