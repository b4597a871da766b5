use std::fs;
use std::path::Path;

use itm_core::dataio::write_atomic;
use itm_core::trainer::TrainConfig;
use itm_core::{Error, Result};
use serde::de::DeserializeOwned;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}

/// Config precedence: `--config`, then the checkpoint's own config, then
/// defaults; `--seed` wins over all of them.
pub fn train_config(config: Option<&Path>, fallback: Option<&TrainConfig>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match (config, fallback) {
        (Some(p), _) => read_json(p)?,
        (None, Some(c)) => c.clone(),
        (None, None) => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn input_error(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
