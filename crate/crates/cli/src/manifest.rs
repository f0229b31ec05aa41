//! Per-command manifests: seed, effective config and SHA-256 of every file read or written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::{CliError, RunConfig};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<(PathBuf, String)>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self { command: command.into(), seed: cfg.seed, config_sha256: sha256_hex(cfg.portable_toml().as_bytes()), ..Default::default() }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push((path.to_path_buf(), file_sha256(path)?));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push((path.to_path_buf(), file_sha256(path)?));
        Ok(())
    }

    /// Paths are written relative to `dir` when possible so manifests of
    /// identical runs in different directories compare equal.
    pub fn render(&self, dir: &Path) -> String {
        let name = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();
        let mut s = format!("command={}\nseed={}\nconfig_sha256={}\n", self.command, self.seed, self.config_sha256);
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "input {h} {}", name(p));
        }
        for (p, h) in &self.outputs {
            let _ = writeln!(s, "output {h} {}", name(p));
        }
        s
    }

    pub fn save(&self, dir: &Path, cfg: &RunConfig) -> Result<PathBuf, CliError> {
        let path = dir.join(format!("manifest-{}.txt", self.command));
        let text = format!("{}# effective config\n{}", self.render(dir), cfg.portable_toml().lines().map(|l| format!("# {l}\n")).collect::<String>());
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digests() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn render_uses_relative_paths() {
        let mut m = Manifest::new("simulate", &RunConfig::new());
        m.outputs.push((PathBuf::from("/tmp/run/map.srfl"), "00".into()));
        let text = m.render(Path::new("/tmp/run"));
        assert!(text.contains("output 00 map.srfl\n"));
        assert!(text.starts_with("command=simulate\nseed=42\n"));
    }
}
