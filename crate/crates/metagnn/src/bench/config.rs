//! Flat key-value config files: one `key = value` pair per line, `#` starts
//! a comment. Keys mirror the CLI flag names; flags always win over file
//! values.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Parse config text into a key → value map. Later lines override earlier
/// ones; blank lines and comments are skipped.
pub fn parse_config_str(text: &str, origin: &Path) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: PathBuf::from(origin),
                line: idx + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Parse {
                path: PathBuf::from(origin),
                line: idx + 1,
                msg: "empty key or value".into(),
            });
        }
        map.insert(key.to_string(), value.to_string());
    }
    Ok(map)
}

pub fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, path)
}
