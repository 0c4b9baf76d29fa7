//! Workflows behind the `crossdiff` binary. Each command writes into an
//! output directory that starts with `config.txt`, the effective settings.

pub mod ablate;
pub mod eval;
pub mod filter;
pub mod gradcheck;
pub mod scenes;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crossdiff_core::config::RunConfig;

/// Marker written last into a finished run directory.
pub const DONE: &str = "DONE";
pub const CONFIG_FILE: &str = "config.txt";

/// Settings shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Common {
    pub config: RunConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl Common {
    /// Loads `path` (or the defaults), applies `key=value` overrides and the seed.
    pub fn build(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        out: PathBuf,
        force: bool,
    ) -> Result<Self> {
        let mut config = match path {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not key=value"))?;
            config.set(k.trim(), v.trim())?;
        }
        if let Some(s) = seed {
            config.set("seed", &s.to_string())?;
        }
        config.validate()?;
        Ok(Self { config, out, force })
    }
}

/// Creates `dir` for a new run. A directory holding [`DONE`] is only
/// cleared when `force` is set; an unfinished one is reused.
pub fn prepare_dir(dir: &Path, config: &RunConfig, force: bool) -> Result<()> {
    if dir.join(DONE).exists() {
        if !force {
            bail!(
                "{} already holds a completed run (use --force to replace it)",
                dir.display()
            );
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), config.echo())?;
    Ok(())
}

pub fn mark_done(dir: &Path) -> Result<()> {
    fs::write(dir.join(DONE), "")?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
