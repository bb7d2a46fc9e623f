//! Versioned text artifacts.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Reads `path` and checks that its first line is `header`.
pub fn read_artifact(path: &Path, header: &str) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::artifact(path, e.to_string()))?;
    let first = text.lines().next().unwrap_or_default();
    if first != header {
        return Err(Error::artifact(
            path,
            format!("expected header `{header}`, found `{first}`"),
        ));
    }
    Ok(text)
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_artifact(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::artifact(dir, e.to_string()))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::artifact(&tmp, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::artifact(path, e.to_string()))?;
    Ok(())
}

/// Attaches `path` to a parse error raised while decoding its contents.
pub fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Artifact { .. } => e,
        other => Error::artifact(path, other.to_string()),
    })
}
