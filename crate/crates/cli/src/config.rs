//! Config-file sections and run manifests.

use std::path::{Path, PathBuf};

use clap::CommandFactory;
use serde::de::DeserializeOwned;
use serde::Serialize;

use moe_lpr::model::ModelConfig;
use moe_lpr::pipeline::StageConfig;
use moe_lpr::{Error, Result};

use crate::args::Cli;

/// Long flag names accepted by `section`, which double as config keys.
fn known_keys(section: &str) -> Vec<String> {
    let cmd = Cli::command();
    cmd.find_subcommand(section)
        .map(|sub| {
            sub.get_arguments()
                .filter_map(|a| a.get_long())
                .filter(|l| !matches!(*l, "help" | "version" | "config"))
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

/// The `[section]` table of the config file, or defaults when there is no
/// file or no such section.
pub fn load_section<T: DeserializeOwned + Default>(path: Option<&Path>, section: &str) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let Some(value) = table.get(section) else {
        return Ok(T::default());
    };
    let toml::Value::Table(entries) = value else {
        return Err(Error::Config(format!(
            "[{section}] in {} is not a table",
            path.display()
        )));
    };
    let known = known_keys(section);
    if let Some(bad) = entries.keys().find(|k| !known.contains(k)) {
        return Err(Error::Config(format!(
            "unknown key {bad:?} in [{section}] of {}",
            path.display()
        )));
    }
    value
        .clone()
        .try_into()
        .map_err(|e| Error::Config(format!("[{section}] in {}: {e}", path.display())))
}

/// Fully resolved record of one invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_file: Option<PathBuf>,
    /// Flags after merging the command line over the config file.
    pub arguments: serde_json::Value,
    pub model: Option<ModelConfig>,
    pub stage: Option<StageConfig>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
}

impl RunManifest {
    pub fn new(command: &str, config_file: Option<&Path>, arguments: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_file: config_file.map(Path::to_path_buf),
            arguments: serde_json::to_value(arguments).unwrap_or(serde_json::Value::Null),
            model: None,
            stage: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `x.ckpt` → `x.ckpt.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    sibling(output, "manifest.json")
}

/// `x.ckpt` → `x.ckpt.<suffix>`.
pub fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    output.with_file_name(name)
}
