//! Run configuration: one JSON file for every command, with flags layered on
//! top. Relative paths are taken relative to the working directory.

use std::fmt;
use std::path::{Path, PathBuf};

use kws_core::quant::QatSchedule;
use kws_core::search::{Constraint, SearchConfig};
use kws_core::supernet::{SupernetConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

/// Bad flags, config or inputs; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    /// Mandatory: nothing is seeded from the clock.
    pub seed: u64,
    #[serde(default)]
    pub supernet: SupernetConfig,
    #[serde(default)]
    pub train: TrainSchedule,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub constraint: Constraint,
    #[serde(default)]
    pub qat: QatSchedule,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Flags shared by every command.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the example cache path.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }

    /// Config file (if any) with the flags applied. Without a file the seed
    /// flag is required.
    pub fn resolve(o: &Overrides) -> anyhow::Result<RunConfig> {
        let mut cfg = match &o.config {
            Some(p) => RunConfig::load(p)?,
            None => {
                let seed = o
                    .seed
                    .ok_or_else(|| usage("a seed is required: pass --seed or --config"))?;
                RunConfig {
                    data: None,
                    cache: None,
                    seed,
                    supernet: SupernetConfig::default(),
                    train: TrainSchedule::default(),
                    search: SearchConfig::default(),
                    constraint: Constraint::default(),
                    qat: QatSchedule::default(),
                    out_dir: default_out_dir(),
                }
            }
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(c) = &o.cache {
            cfg.cache = Some(c.clone());
        }
        if let Some(d) = &o.out_dir {
            cfg.out_dir = d.clone();
        }
        cfg.search.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check =
            |r: kws_core::Result<()>, what: &str| r.map_err(|e| usage(format!("{what}: {e}")));
        check(self.supernet.validate(), "supernet")?;
        check(self.train.validate(), "train")?;
        check(self.search.validate(), "search")?;
        check(self.constraint.validate(), "constraint")?;
        check(self.qat.validate(), "qat")
    }

    pub fn cache_path(&self) -> anyhow::Result<&Path> {
        let p = self
            .cache
            .as_deref()
            .ok_or_else(|| usage("no example cache: set \"cache\" or pass --cache"))?;
        if !p.exists() {
            return Err(usage(format!(
                "example cache {} not found; run `kws prepare` first",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn hash(&self) -> u64 {
        kws_core::binio::config_hash(self)
    }
}
