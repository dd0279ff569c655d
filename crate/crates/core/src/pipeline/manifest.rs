use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Record of one invocation: the resolved configuration, every seed and
/// the files written. Deliberately free of timestamps and host details so
/// that identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: impl Into<String>, seed: u64) -> &mut Self {
        self.seeds.insert(name.into(), seed);
        self
    }

    pub fn artifact(&mut self, path: impl Into<String>) -> &mut Self {
        self.artifacts.push(path.into());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
