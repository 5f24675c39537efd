//! Run manifest: content hashes of every artifact, used to skip finished work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub stage: String,
    /// Hash of everything the unit's output depends on.
    pub key: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub units: BTreeMap<String, UnitRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        Self { config_hash, tool_version: env!("CARGO_PKG_VERSION").to_string(), units: BTreeMap::new() }
    }

    /// Loads `dir/manifest.json`, or starts a fresh one when absent or unreadable.
    pub fn load_or_new(dir: &Path, config_hash: String) -> Self {
        let fresh = Self::new(config_hash.clone());
        match std::fs::read(dir.join(MANIFEST_FILE)) {
            Ok(bytes) => match serde_json::from_slice::<RunManifest>(&bytes) {
                Ok(mut m) => {
                    m.config_hash = config_hash;
                    m.tool_version = fresh.tool_version;
                    m
                }
                Err(_) => fresh,
            },
            Err(_) => fresh,
        }
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(dir.join(MANIFEST_FILE), text)
    }

    /// True when `unit` was completed with `key` and its artifacts are intact.
    pub fn is_current(&self, dir: &Path, unit: &str, key: &str) -> bool {
        self.units.get(unit).is_some_and(|u| u.key == key && artifacts_intact(dir, &u.artifacts))
    }

    pub fn artifact_hash(&self, unit: &str, path: &Path) -> Option<&str> {
        self.units.get(unit)?.artifacts.iter().find(|a| a.path == path).map(|a| a.sha256.as_str())
    }

    /// Checks every recorded artifact against its hash; returns the bad paths.
    pub fn verify(&self, dir: &Path) -> Vec<PathBuf> {
        self.units
            .values()
            .flat_map(|u| &u.artifacts)
            .filter(|a| hash_file(&dir.join(&a.path)).map_or(true, |h| h != a.sha256))
            .map(|a| a.path.clone())
            .collect()
    }
}

fn artifacts_intact(dir: &Path, artifacts: &[ArtifactRecord]) -> bool {
    artifacts.iter().all(|a| hash_file(&dir.join(&a.path)).is_ok_and(|h| h == a.sha256))
}

/// Incremental hasher for unit keys.
#[derive(Default)]
pub struct KeyBuilder(Sha256);

impl KeyBuilder {
    pub fn new(unit: &str) -> Self {
        let mut k = Self::default();
        k.add(env!("CARGO_PKG_VERSION")).add(unit);
        k
    }

    pub fn add(&mut self, part: &str) -> &mut Self {
        self.0.update((part.len() as u64).to_le_bytes());
        self.0.update(part.as_bytes());
        self
    }

    pub fn add_json<T: Serialize>(&mut self, value: &T) -> &mut Self {
        self.add(&serde_json::to_string(value).expect("serialisable"))
    }

    pub fn finish(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
