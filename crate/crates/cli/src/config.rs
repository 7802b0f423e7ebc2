//! The JSON run configuration: every training and architecture field plus
//! synthesis settings and input paths, as one flat document.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aquaforge_core::{ArchConfig, MetaConfig, WaterType};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub draws_per_type: usize,
    pub types: Vec<WaterType>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            draws_per_type: 3,
            types: WaterType::ALL.to_vec(),
        }
    }
}

/// Input locations. Output paths are never echoed so that identical runs
/// into different directories produce identical manifests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub meta: MetaConfig,
    pub arch: ArchConfig,
    pub synth: SynthSettings,
    pub inputs: Inputs,
}

fn keys_of<T: Serialize>(v: &T) -> BTreeSet<String> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m.into_iter().map(|(k, _)| k).collect(),
        _ => BTreeSet::new(),
    }
}

const INPUT_KEYS: [&str; 4] = ["corpus", "data", "pairs", "checkpoint"];

fn pick<T: DeserializeOwned>(doc: &Map<String, Value>, keys: &BTreeSet<String>) -> Result<T> {
    let part: Map<String, Value> = doc
        .iter()
        .filter(|(k, _)| keys.contains(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(serde_json::from_value(Value::Object(part))?)
}

impl Config {
    /// Parses a flat JSON object; absent keys take defaults and unknown
    /// keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Map<String, Value> =
            serde_json::from_str(text).context("config must be a JSON object")?;
        let meta_keys = keys_of(&MetaConfig::default());
        let arch_keys = keys_of(&ArchConfig::default());
        let synth_keys = keys_of(&SynthSettings::default());
        let input_keys: BTreeSet<String> = INPUT_KEYS.iter().map(|s| s.to_string()).collect();
        let unknown: Vec<&str> = doc
            .keys()
            .filter(|k| {
                ![&meta_keys, &arch_keys, &synth_keys, &input_keys]
                    .iter()
                    .any(|s| s.contains(*k))
            })
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        let cfg = Self {
            meta: pick(&doc, &meta_keys).context("invalid training fields")?,
            arch: pick(&doc, &arch_keys).context("invalid architecture fields")?,
            synth: pick(&doc, &synth_keys).context("invalid synthesis fields")?,
            inputs: pick(&doc, &input_keys).context("invalid path fields")?,
        };
        cfg.meta.validate()?;
        cfg.arch.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::from_json(&text).with_context(|| format!("in config {}", p.display()))
            }
        }
    }

    /// The effective configuration as one flat JSON object.
    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        for part in [
            serde_json::to_value(&self.meta),
            serde_json::to_value(&self.arch),
            serde_json::to_value(&self.synth),
            serde_json::to_value(&self.inputs),
        ] {
            if let Ok(Value::Object(m)) = part {
                out.extend(m);
            }
        }
        Value::Object(out)
    }
}
