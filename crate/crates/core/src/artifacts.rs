//! Versioned, checksummed JSON artifacts with atomic writes.
//!
//! Every persisted document is wrapped in a container holding a format
//! version and a SHA-256 checksum of the canonical payload encoding, so
//! readers can reject both future formats and corrupted bytes.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct Container {
    format_version: u32,
    checksum: String,
    payload: serde_json::Value,
}

fn checksum_of(payload: &serde_json::Value) -> Result<String> {
    let bytes = serde_json::to_vec(payload)
        .map_err(|e| Error::Schema(format!("payload not serializable: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Serializes `payload` into a versioned container and writes it with
/// write-temp-then-rename so readers never observe a partial file.
pub fn save_artifact<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    let value = serde_json::to_value(payload)
        .map_err(|e| Error::Schema(format!("payload not serializable: {e}")))?;
    let container = Container {
        format_version: ARTIFACT_FORMAT_VERSION,
        checksum: checksum_of(&value)?,
        payload: value,
    };
    let bytes = serde_json::to_vec_pretty(&container)
        .map_err(|e| Error::Schema(format!("container not serializable: {e}")))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("artifact")
    ));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a container, verifying version and checksum before decoding
/// the payload.
pub fn load_artifact<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    let container: Container = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Schema(format!("{}: not a valid artifact container: {e}", path.display())))?;
    if container.format_version != ARTIFACT_FORMAT_VERSION {
        return Err(Error::Incompatible {
            found: container.format_version,
            supported: ARTIFACT_FORMAT_VERSION,
        });
    }
    let actual = checksum_of(&container.payload)?;
    if actual != container.checksum {
        return Err(Error::Integrity(format!(
            "{}: checksum mismatch (stored {}, computed {actual})",
            path.display(),
            container.checksum
        )));
    }
    serde_json::from_value(container.payload)
        .map_err(|e| Error::Schema(format!("{}: payload does not match schema: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_mlp, MlpModel, ModelFile};

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = init_mlp::<f64>(&[3, 5, 2], 7).unwrap();
        save_artifact(&path, &model.to_file()).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded: ModelFile = load_artifact(&path).unwrap();
        assert_eq!(MlpModel::<f64>::from_file(&loaded).unwrap(), model);
        save_artifact(&path, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn tampered_byte_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = init_mlp::<f64>(&[2, 2], 7).unwrap();
        save_artifact(&path, &model.to_file()).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        // flip one digit inside the payload parameters
        let idx = text.find("\"params\"").unwrap();
        let digit = text[idx..].find(|c: char| c.is_ascii_digit()).unwrap() + idx;
        let old = text.as_bytes()[digit];
        let new = if old == b'9' { b'8' } else { old + 1 };
        unsafe { text.as_bytes_mut()[digit] = new };
        std::fs::write(&path, text).unwrap();
        let err = load_artifact::<ModelFile>(&path).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }

    #[test]
    fn future_version_rejected_naming_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = init_mlp::<f64>(&[2, 2], 7).unwrap();
        save_artifact(&path, &model.to_file()).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&path, text).unwrap();
        match load_artifact::<ModelFile>(&path).unwrap_err() {
            Error::Incompatible { found, supported } => {
                assert_eq!((found, supported), (99, 1));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_artifact::<ModelFile>(Path::new("/nonexistent/x.json")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
