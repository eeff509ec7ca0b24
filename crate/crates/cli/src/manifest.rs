use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn digest(path: &Path) -> io::Result<FileDigest> {
    let bytes = std::fs::read(path)?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// Record of one artifact-producing command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_secs: f64,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &impl Serialize, seeds: Vec<u64>) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            seeds,
            started: Instant::now(),
        }
    }

    /// Hashes the files and writes the manifest next to the primary output
    /// unless `path` is given.
    pub fn finish(self, inputs: &[&Path], outputs: &[&Path], path: Option<&Path>) -> io::Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seeds: self.seeds,
            inputs: inputs.iter().map(|p| digest(p)).collect::<io::Result<_>>()?,
            outputs: outputs.iter().map(|p| digest(p)).collect::<io::Result<_>>()?,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let target = match path {
            Some(p) => p.to_path_buf(),
            None => sidecar(outputs[0], "manifest.json"),
        };
        std::fs::write(&target, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(target)
    }
}

/// `out.csv` → `out.csv.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            digest(&p).unwrap().sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(sidecar(Path::new("x/out.csv"), "manifest.json"), PathBuf::from("x/out.csv.manifest.json"));
    }
}
