//! Run context shared by every command: the merged configuration, the
//! manifest and the worker pool.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Written to the output directory before a command does any work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub version: String,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

pub struct Context {
    pub command: &'static str,
    /// `--seed` when given; commands fold it into their configuration.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub threads: usize,
    config_file: Option<PathBuf>,
    replay: Option<Value>,
}

impl Context {
    pub fn new(command: &'static str, seed: Option<u64>, out: PathBuf, threads: usize, config_file: Option<PathBuf>) -> Self {
        Self {
            command,
            seed,
            out,
            threads,
            config_file,
            replay: None,
        }
    }

    pub fn replaying(manifest: RunManifest, command: &'static str, out: Option<PathBuf>, threads: usize) -> Self {
        Self {
            command,
            seed: Some(manifest.seed),
            out: out.unwrap_or(manifest.out),
            threads,
            config_file: None,
            replay: Some(manifest.config),
        }
    }

    /// Merges defaults, the config file and `overrides` (flags; `null`
    /// entries mean "not given"), in that order. On replay the manifest's
    /// frozen configuration is used as is.
    pub fn resolve<T: Serialize + DeserializeOwned + Default>(&self, overrides: Value) -> Result<T> {
        if let Some(frozen) = &self.replay {
            return serde_json::from_value(frozen.clone()).context("manifest configuration does not fit this command");
        }
        let mut merged = serde_json::to_value(T::default())?;
        if let Some(path) = &self.config_file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !file.is_object() {
                bail!("config {} must hold a JSON object", path.display());
            }
            merge(&mut merged, file);
        }
        merge(&mut merged, strip_nulls(overrides));
        serde_json::from_value(merged).context("invalid configuration")
    }

    /// Creates the output directory and writes the manifest for `config`.
    pub fn write_manifest<T: Serialize>(&self, config: &T, seed: u64) -> Result<RunManifest> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating output directory {}", self.out.display()))?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            out: self.out.clone(),
        };
        let path = self.out.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(manifest)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.threads).build()?)
    }
}

/// Recursive object merge; any other value replaces the target.
pub fn merge(target: &mut Value, patch: Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                match t.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        t.insert(k, v);
                    }
                }
            }
        }
        (t, p) => *t = p,
    }
}

pub fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.into_iter()
                .filter(|(_, v)| !v.is_null())
                .map(|(k, v)| (k, strip_nulls(v)))
                .filter(|(_, v)| !matches!(v, Value::Object(m) if m.is_empty()))
                .collect::<Map<_, _>>(),
        ),
        other => other,
    }
}
