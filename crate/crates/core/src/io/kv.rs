//! Flat `key = value` configuration files.
//!
//! One assignment per line. `#` starts a comment, blank lines are ignored,
//! keys may not repeat.

use std::str::FromStr;

use crate::error::{Result, XdiffError};

/// Parsed assignments in file order.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| XdiffError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(XdiffError::Config(format!("line {}: invalid key `{key}`", lineno + 1)));
        }
        if value.is_empty() {
            return Err(XdiffError::Config(format!("line {}: empty value for `{key}`", lineno + 1)));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(XdiffError::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Parse a single value, naming the key in the error.
pub fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse::<T>().map_err(|_| XdiffError::Config(format!("invalid value `{raw}` for `{key}`")))
}

/// Split a `key=value` override.
pub fn split_override(raw: &str) -> Result<(String, String)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| XdiffError::Config(format!("override `{raw}` is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || v.is_empty() {
        return Err(XdiffError::Config(format!("override `{raw}` is not key=value")));
    }
    Ok((k.to_string(), v.to_string()))
}
