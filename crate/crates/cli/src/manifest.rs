//! Run manifest: command line, seed, settings and content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub args: Vec<String>,
    pub seed: u64,
    pub settings: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip)]
    excluded: Vec<String>,
}

fn sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(seed: u64) -> Self {
        Manifest {
            version: env!("CARGO_PKG_VERSION"),
            args: std::env::args().skip(1).collect(),
            seed,
            settings: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            excluded: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(path.display().to_string(), sha256(path)?);
        Ok(())
    }

    /// Leaves a file out of the output hashes (wall-clock content).
    pub fn exclude(&mut self, name: &str) {
        self.excluded.push(name.to_string());
    }

    /// Hashes every file in `dir` and writes `dir/manifest.json`.
    pub fn finish(&mut self, dir: &Path) -> anyhow::Result<()> {
        let mut names: Vec<_> = fs::read_dir(dir)
            .with_context(|| format!("cannot list {}", dir.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "manifest.json" && !self.excluded.contains(n))
            .collect();
        names.sort();
        for n in names {
            let h = sha256(&dir.join(&n))?;
            self.outputs.insert(n, h);
        }
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(dir.join("manifest.json"), text).with_context(|| format!("cannot write manifest in {}", dir.display()))?;
        Ok(())
    }
}
