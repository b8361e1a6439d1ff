//! Run provenance written next to every artifact set.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::atomic_write;
use crate::error::Result;

pub const MANIFEST_FILE: &str = "run_manifest.txt";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_hash: Option<u64>,
    pub version: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn new(command: Vec<String>) -> Self {
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }

    pub fn render(&self) -> String {
        let join = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command.join(" "));
        match self.config_hash {
            Some(h) => {
                let _ = writeln!(s, "config_hash={h:016x}");
            }
            None => s.push_str("config_hash=\n"),
        }
        let _ = writeln!(s, "version={}", self.version);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds={}", seeds.join(","));
        let _ = writeln!(s, "inputs={}", join(&self.inputs));
        let _ = writeln!(s, "outputs={}", join(&self.outputs));
        let _ = writeln!(s, "wall_seconds={:.3}", self.wall_seconds);
        s
    }

    /// Writes (or replaces) the single manifest of `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        atomic_write(&path, self.render().as_bytes())?;
        Ok(path)
    }
}
