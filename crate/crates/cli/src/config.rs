//! Layered settings: built-in defaults, then a `key = value` file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use svrc::codec::TrainConfig;

/// Effective settings of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub registry: Option<PathBuf>,
}

pub const KEYS: &[&str] = &[
    "lambda",
    "levels_main",
    "levels_hyper",
    "init_range",
    "K",
    "seed",
    "steps",
    "batch",
    "patch",
    "learning_rate",
    "quantizer_learning_rate",
    "patience",
    "steps_per_epoch",
    "plateau_threshold",
    "M",
    "N",
    "registry",
];

impl Settings {
    pub fn new(train: TrainConfig) -> Self {
        Self { train, registry: None }
    }

    /// Applies one setting; the value is parsed but range checks wait for
    /// [`Settings::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "lambda" => t.lambda = num(key, value)?,
            "levels_main" => t.model.levels_main = num(key, value)?,
            "levels_hyper" => t.model.levels_hyper = num(key, value)?,
            "init_range" => (t.model.init_lo, t.model.init_hi) = range(value)?,
            "K" => t.velocity = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "batch" => t.batch = num(key, value)?,
            "patch" => t.patch = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "quantizer_learning_rate" => t.quantizer_learning_rate = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = num(key, value)?,
            "plateau_threshold" => t.plateau_threshold = num(key, value)?,
            "M" => t.model.m = num(key, value)?,
            "N" => t.model.n = num(key, value)?,
            "registry" => self.registry = Some(PathBuf::from(value)),
            _ => bail!("unknown setting `{key}` (known: {})", KEYS.join(", ")),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (line, key, value) in parse_config(&text)? {
            self.set(&key, &value)
                .with_context(|| format!("{}:{line}", path.display()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| anyhow!("invalid settings: {e}"))
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("`{key}` expects a number, got `{value}`"))
}

/// `lo,hi`, or a single `r` meaning `-r,r`.
pub fn range(value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [r] => {
            let r: f64 = num("init_range", r)?;
            Ok((-r, r))
        }
        [lo, hi] => Ok((num("init_range", lo)?, num("init_range", hi)?)),
        _ => bail!("`init_range` expects `lo,hi`, got `{value}`"),
    }
}

/// `(line number, key, value)` for every setting line.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            bail!("line {}: empty key or value", i + 1);
        }
        out.push((i + 1, key.to_string(), value.to_string()));
    }
    Ok(out)
}
