pub mod manifest;
pub mod ply;
pub mod png;
pub mod raw;

use std::path::Path;

use crate::error::{IoError, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| IoError::file(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| IoError::file(path, e))
}

