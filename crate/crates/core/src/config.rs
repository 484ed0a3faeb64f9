//! JSON config loading with key-path error reporting.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fnt;

/// Parses JSON, reporting the failing key path (e.g. `splits.train`) on error.
pub fn from_json<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::Config {
            key: if key == "." { "<root>".into() } else { key },
            reason: e.into_inner().to_string(),
        }
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_json(&bytes)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fnt::write_atomic(path, &bytes)
}
