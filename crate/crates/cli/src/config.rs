//! Optional TOML defaults file.
//!
//! Every key mirrors a command-line flag (dashes become underscores) and is
//! used only when the flag is absent:
//!
//! ```toml
//! backend = "offline"
//! strategy = "mmlf"
//! n = 3
//! rrf_k = 60.0
//! seed = 7
//! metric = "recall@1k,ndcg@10"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub split: Option<String>,
    pub backend: Option<String>,
    pub dim: Option<usize>,
    pub chat_model: Option<String>,
    pub embed_model: Option<String>,
    pub strategy: Option<String>,
    pub n: Option<usize>,
    pub n_values: Option<Vec<usize>>,
    pub rrf_k: Option<f64>,
    pub seed: Option<u64>,
    pub pool_depth: Option<String>,
    pub parallel: Option<usize>,
    pub mock_script: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub top_k: Option<u32>,
    pub max_tokens: Option<u32>,
    pub thinking: Option<bool>,
    pub metric: Option<String>,
    pub gain: Option<String>,
    pub relevance_threshold: Option<u32>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

/// Flag if given, else config value, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
