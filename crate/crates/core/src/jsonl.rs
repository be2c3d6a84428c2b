//! Line-delimited JSON records.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// One compact JSON object per line, each terminated by `\n`.
pub fn to_string<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Invalid(format!("serialize: {e}")))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses `text`, skipping blank lines; errors carry `path` and the line number.
pub fn from_str<T: DeserializeOwned>(text: &str, path: &Path) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, path)
}

pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    std::fs::write(path, to_string(records)?).map_err(|e| Error::io(path, e))
}
