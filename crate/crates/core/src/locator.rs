//! Where model weights live: a filesystem path or an http(s) URL, with an
//! optional expected SHA-256.

use std::fmt;
use std::io::Read;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsLocator {
    pub location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

impl WeightsLocator {
    pub fn new(location: impl Into<String>) -> Self {
        Self {
            location: location.into(),
            sha256: None,
        }
    }

    pub fn with_sha256(mut self, hex: impl Into<String>) -> Self {
        self.sha256 = Some(hex.into().to_ascii_lowercase());
        self
    }

    pub fn is_remote(&self) -> bool {
        self.location.starts_with("http://") || self.location.starts_with("https://")
    }

    pub fn local_path(&self) -> Option<PathBuf> {
        if self.is_remote() {
            None
        } else {
            Some(PathBuf::from(
                self.location.strip_prefix("file://").unwrap_or(&self.location),
            ))
        }
    }

    /// Reads the artifact and checks it against the expected digest, if any.
    pub fn fetch(&self, what: &'static str) -> Result<Vec<u8>> {
        let load_err = |detail: String| Error::Load {
            what,
            locator: self.location.clone(),
            detail,
        };
        let bytes = match self.local_path() {
            Some(path) => std::fs::read(&path).map_err(|e| load_err(e.to_string()))?,
            None => {
                let mut body = Vec::new();
                ureq::get(&self.location)
                    .call()
                    .map_err(|e| load_err(e.to_string()))?
                    .into_body()
                    .into_reader()
                    .read_to_end(&mut body)
                    .map_err(|e| load_err(e.to_string()))?;
                body
            }
        };
        if let Some(expected) = &self.sha256 {
            let actual = sha256_hex(&bytes);
            if &actual != expected {
                return Err(load_err(format!(
                    "checksum mismatch: expected sha256 {expected}, got {actual}"
                )));
            }
        }
        Ok(bytes)
    }
}

impl fmt::Display for WeightsLocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.location)
    }
}

impl From<&str> for WeightsLocator {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

impl From<PathBuf> for WeightsLocator {
    fn from(p: PathBuf) -> Self {
        Self::new(p.to_string_lossy().into_owned())
    }
}
