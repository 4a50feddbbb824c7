//! Run bookkeeping: config-file fallback, seed resolution, run.json.

use anyhow::{Context, Result};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::args::CommonArgs;

/// KEY=VALUE fallback values from --config.
#[derive(Debug, Default)]
pub struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    pub fn load(path: Option<&Path>) -> Result<ConfigMap> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected KEY=VALUE", path.display(), ln + 1))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(ConfigMap(map))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key {key}={raw}: {e}")),
        }
    }
}

/// Resolve a value: CLI flag, then config file, then default.
pub fn resolve<T: FromStr + Clone>(
    flag: Option<T>,
    cfg: &ConfigMap,
    key: &str,
    default: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    Ok(flag.or(cfg.get(key)?).unwrap_or(default))
}

pub struct RunContext {
    pub out: PathBuf,
    pub seed: u64,
    pub cfg: ConfigMap,
}

impl RunContext {
    pub fn new(common: &CommonArgs) -> Result<RunContext> {
        let cfg = ConfigMap::load(common.config.as_deref())?;
        let seed = match common.seed {
            Some(s) => s,
            None => match std::env::var("PAP_SEED") {
                Ok(v) => v.parse().context("PAP_SEED must be an unsigned integer")?,
                Err(_) => cfg.get("seed")?.unwrap_or(0),
            },
        };
        if let Some(jobs) = common.jobs {
            // Ignore failure: the global pool can only be set once per
            // process, which is fine for repeated in-process calls in tests.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        }
        std::fs::create_dir_all(&common.out)
            .with_context(|| format!("creating {}", common.out.display()))?;
        Ok(RunContext { out: common.out.clone(), seed, cfg })
    }

    /// Record the resolved configuration; identical run.json contents mean a
    /// rerun must reproduce every artifact bit for bit.
    pub fn write_run_json(&self, command: &str, resolved: impl Serialize) -> Result<()> {
        let body = serde_json::json!({
            "tool_version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": self.seed,
            "config": resolved,
        });
        std::fs::write(self.out.join("run.json"), serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(())
    }
}

/// Model stems may be passed with or without an extension.
pub fn stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("papw") | Some("json") | Some("papp") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

pub fn split_list(raw: &str) -> Vec<String> {
    raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}
