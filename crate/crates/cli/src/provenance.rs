use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Reproducibility stamp written into every artifact directory. Carries no
/// timestamps so reruns produce identical bytes.
#[derive(Debug, Serialize)]
pub struct Provenance {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub versions: BTreeMap<&'static str, String>,
    pub manifest_digests: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(argv: &[String], seed: Option<u64>) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("tastas", env!("CARGO_PKG_VERSION").to_string());
        versions.insert(
            "checkpoint_format",
            tastas_core::model::CHECKPOINT_VERSION.to_string(),
        );
        versions.insert(
            "manifest_schema",
            tastas_core::mixgen::MANIFEST_SCHEMA_VERSION.to_string(),
        );
        Self {
            command: argv.get(1).cloned().unwrap_or_default(),
            args: argv.iter().skip(1).cloned().collect(),
            seed,
            versions,
            manifest_digests: BTreeMap::new(),
        }
    }

    pub fn with_manifest(mut self, name: impl Into<String>, digest: String) -> Self {
        self.manifest_digests.insert(name.into(), digest);
        self
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(PROVENANCE_FILE);
        let text = serde_json::to_string_pretty(self).expect("provenance serialises") + "\n";
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
