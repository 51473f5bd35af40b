//! Resolution of the run configuration: profile defaults, then a TOML file,
//! then command-line overrides.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use p2preg::config::{Profile, RunConfig};

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn resolve(profile: Profile, file: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut value = toml::Value::try_from(RunConfig::profile(profile)).context("serializing profile")?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let overlay: toml::Value = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut value, overlay);
    }
    let mut config: RunConfig = value
        .try_into()
        .with_context(|| format!("invalid configuration{}", file.map(|p| format!(" in {}", p.display())).unwrap_or_default()))?;
    if let Some(s) = seed {
        config.train.seed = s;
    }
    config.validate()?;
    Ok(config)
}

/// Writes the fully materialized configuration next to a command's outputs.
pub fn echo(config: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let text = toml::to_string_pretty(config).context("serializing configuration")?;
    fs::write(out_dir.join("config.toml"), text)?;
    Ok(())
}
