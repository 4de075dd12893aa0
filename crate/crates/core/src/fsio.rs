use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temp file beside `path`, then renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let ctx = || path.display().to_string();
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(ctx(), e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(ctx(), e))?;
    tmp.flush().map_err(|e| Error::io(ctx(), e))?;
    tmp.persist(path).map_err(|e| Error::io(ctx(), e.error))?;
    Ok(())
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses `key=value` tokens after a fixed magic prefix.
pub(crate) fn header_fields<'a>(
    path: &Path,
    line: &'a str,
    magic: &str,
) -> Result<Vec<(&'a str, &'a str)>> {
    let rest = line
        .strip_prefix(magic)
        .ok_or_else(|| Error::parse(path, 1, format!("expected header starting with `{magic}`")))?;
    rest.split_whitespace()
        .map(|tok| {
            tok.split_once('=')
                .ok_or_else(|| Error::parse(path, 1, format!("malformed header field `{tok}`")))
        })
        .collect()
}

pub(crate) fn header_value<'a>(
    path: &Path,
    fields: &[(&str, &'a str)],
    key: &str,
) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::parse(path, 1, format!("header missing `{key}=`")))
}

pub(crate) fn parse_field<F: std::str::FromStr>(path: &Path, line: usize, what: &str, raw: &str) -> Result<F> {
    raw.trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("bad {what} `{raw}`")))
}
