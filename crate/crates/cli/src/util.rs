//! Shared plumbing for the command-line front end: config resolution
//! with dot-path overrides, layout syntax, content hashing, and run
//! stamps that make every command either idempotent or an explicit
//! refusal to overwrite.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spritediff_core::config::{ExperimentConfig, CODE_VERSION};
use spritediff_core::layout::RegionLayout;
use spritediff_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Config file plus override flags, shared by commands that own a full
/// experiment config rather than inheriting one from a checkpoint.
#[derive(clap::Args, Debug)]
pub struct ConfigArgs {
    /// Experiment config JSON; the built-in bench profile when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

/// Dot-path config overrides: `--set sampler.steps=10`, or bare
/// `--sampler.steps 10` pairs after a literal `--`.
#[derive(clap::Args, Debug, Default)]
pub struct OverrideArgs {
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(last = true, value_name = "KEY VALUE")]
    pub rest: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::bench(),
        };
        self.overrides.apply(&base)
    }
}

impl OverrideArgs {
    /// Flatten both flag forms into `key=value` pairs and apply them.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut pairs = Vec::new();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not KEY=VALUE")))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        let mut toks = self.rest.iter();
        while let Some(tok) = toks.next() {
            let key = tok.strip_prefix("--").unwrap_or(tok);
            if let Some((k, v)) = key.split_once('=') {
                pairs.push((k.to_string(), v.to_string()));
            } else {
                let v = toks
                    .next()
                    .ok_or_else(|| Error::Config(format!("override {key:?} has no value")))?;
                pairs.push((key.to_string(), v.clone()));
            }
        }
        base.with_overrides(&pairs)
    }
}

/// `uniform:N`, `quad:N`, or a path to a region-layout JSON file.
pub fn parse_layout(arg: &str) -> Result<RegionLayout> {
    if let Some(digits) = arg.strip_prefix("uniform:") {
        return RegionLayout::uniform(parse_count(arg, digits)?);
    }
    if let Some(digits) = arg.strip_prefix("quad:") {
        return RegionLayout::quad(parse_count(arg, digits)?);
    }
    let text = std::fs::read_to_string(arg)
        .map_err(|e| Error::Checkpoint(format!("cannot read layout file {arg}: {e}")))?;
    let layout: RegionLayout = serde_json::from_str(&text)?;
    layout.validate()?;
    Ok(layout)
}

fn parse_count(arg: &str, digits: &str) -> Result<usize> {
    digits
        .parse()
        .map_err(|_| Error::Layout(format!("bad region count in {arg:?}")))
}

/// Layouts in story scripts: either the string sugar of
/// [`parse_layout`] or an inline region-layout object.
pub fn layout_from_value(v: &serde_json::Value) -> Result<RegionLayout> {
    match v {
        serde_json::Value::String(s) => parse_layout(s),
        other => {
            let layout: RegionLayout = serde_json::from_value(other.clone())?;
            layout.validate()?;
            Ok(layout)
        }
    }
}

/// Subject regions in a layout, excluding the background slot.
pub fn subject_slots(layout: &RegionLayout) -> usize {
    layout.slot_count() - layout.background_slot.is_some() as usize
}

/// What a command is about to do, recorded next to its outputs. A
/// repeat of the identical run is a no-op; a stamp left by a different
/// run is refused rather than overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStamp {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    /// Output-determining inputs that live outside the config.
    pub inputs: BTreeMap<String, String>,
}

impl RunStamp {
    pub fn new(command: &str, config_hash: &str) -> RunStamp {
        RunStamp {
            command: command.into(),
            config_hash: config_hash.into(),
            code_version: CODE_VERSION.into(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, key: &str, value: impl Into<String>) -> RunStamp {
        self.inputs.insert(key.into(), value.into());
        self
    }
}

/// True when `stamp_path` already records exactly this run. Creates
/// the parent directory; never overwrites a mismatching stamp.
pub fn begin_run(stamp_path: &Path, stamp: &RunStamp) -> Result<bool> {
    if let Some(parent) = stamp_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    if !stamp_path.exists() {
        return Ok(false);
    }
    let old: RunStamp = serde_json::from_str(&std::fs::read_to_string(stamp_path)?)?;
    if old == *stamp {
        return Ok(true);
    }
    Err(Error::Checkpoint(format!(
        "{} records a different run; refusing to overwrite",
        stamp_path.display()
    )))
}

pub fn finish_run(stamp_path: &Path, stamp: &RunStamp) -> Result<()> {
    write_json(stamp_path, stamp)
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `path` with `suffix` appended to the file name, for sidecars next
/// to single-file artifacts (`base.ckpt` -> `base.ckpt.log.json`).
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}
