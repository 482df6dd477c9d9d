use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AppError;

/// SHA-256 of `blob <len>\0<bytes>`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of the canonical JSON form of a value.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String, AppError> {
    Ok(content_hash(&serde_json::to_vec(value)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, AppError> {
        let data = fs::read(path)?;
        Ok(Self {
            path: path.display().to_string(),
            bytes: data.len() as u64,
            sha256: content_hash(&data),
        })
    }
}

/// Provenance record written next to every command's outputs. It holds no
/// timestamps, so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            config_hash: None,
            inputs: vec![],
            outputs: vec![],
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self, AppError> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(self)
    }

    /// Record an output by file name only, so the manifest does not depend
    /// on where the run was written.
    pub fn output(&mut self, path: &Path) -> Result<&mut Self, AppError> {
        let mut d = FileDigest::of(path)?;
        if let Some(name) = path.file_name() {
            d.path = name.to_string_lossy().into_owned();
        }
        self.outputs.push(d);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<(), AppError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_of_empty_input() {
        // printf 'blob 0\0' | sha256sum
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }
}
