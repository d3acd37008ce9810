//! Plain `key = value` text files, shared by run configs and raster sidecars.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// keys are normalized so that `cell_size` and `cell-size` are the same.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`", n + 1)))?;
        let key = normalize_key(key.trim());
        if key.is_empty() {
            return Err(Error::Format(format!("line {}: empty key", n + 1)));
        }
        if out.insert(key.clone(), value.trim().to_owned()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key `{key}`", n + 1)));
        }
    }
    Ok(out)
}

pub fn normalize_key(key: &str) -> String {
    key.replace('-', "_")
}
