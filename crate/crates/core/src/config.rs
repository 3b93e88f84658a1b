//! Plain `key = value` files shared by the model and guidance configs.
//!
//! Blank lines and lines starting with `#` are ignored; everything after
//! the first `=` is the value, trimmed.

use std::str::FromStr;

use crate::error::{Error, Result};

/// `(line number, key, value)` triples in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(n + 1, format!("expected `key = value`, got {line:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::parse(n + 1, "empty key"));
        }
        out.push((n + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Parses `value` for field `key`, naming both in the error.
pub(crate) fn field<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Input(format!("invalid value {value:?} for {key}")))
}

pub(crate) fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Input(format!("invalid boolean {value:?} for {key}"))),
    }
}

/// Applies every entry of a key = value file through `set`, turning field
/// errors into parse errors that carry the line number.
pub(crate) fn apply_file(text: &str, mut set: impl FnMut(&str, &str) -> Result<()>) -> Result<()> {
    for (line, key, value) in parse_kv(text)? {
        set(&key, &value).map_err(|e| match e {
            Error::Input(msg) => Error::parse(line, msg),
            other => other,
        })?;
    }
    Ok(())
}
