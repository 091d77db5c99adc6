use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use offshelf_core::{EvalMode, Metric, RunConfig};
use serde::Deserialize;

/// Invalid flags or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Run settings read from `--config`. Every field is optional; command-line
/// flags override whatever is set here.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    train: Option<PathBuf>,
    test: Option<PathBuf>,
    tasks: Option<usize>,
    metric: Option<Metric>,
    mode: Option<EvalMode>,
    normalize: Option<bool>,
    unsupervised: Option<bool>,
    k: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    strict_nc: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("reading config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))
            .context("invalid config file")
    }

    pub fn apply(self, mut c: RunConfig) -> RunConfig {
        c.train = self.train.or(c.train);
        c.test = self.test.or(c.test);
        c.tasks = self.tasks.unwrap_or(c.tasks);
        c.metric = self.metric.unwrap_or(c.metric);
        c.mode = self.mode.unwrap_or(c.mode);
        c.normalize = self.normalize.unwrap_or(c.normalize);
        c.unsupervised = self.unsupervised.unwrap_or(c.unsupervised);
        c.k = self.k.or(c.k);
        c.seed = self.seed.unwrap_or(c.seed);
        c.out = self.out.or(c.out);
        c.strict_nc = self.strict_nc.unwrap_or(c.strict_nc);
        c
    }
}
