//! Minimal line-oriented CSV helpers for the numeric file formats used here.
//! None of the formats quote fields, so a plain comma split is sufficient.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Yields `(line_number, fields)` for every non-blank data line after the header.
/// Line numbers are 1-based and count the header.
pub(crate) fn data_lines<'a>(
    text: &'a str,
    source: &str,
    expected_header: impl FnOnce(&[&str]) -> bool,
) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => break (i + 1, l),
            None => return Err(Error::parse(source, 1, "empty file")),
        }
    };
    let header_fields: Vec<&str> = header.1.split(',').map(str::trim).collect();
    if !expected_header(&header_fields) {
        return Err(Error::parse(
            source,
            header.0,
            format!("unexpected header `{}`", header.1),
        ));
    }
    Ok(lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect()))
        .collect())
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    field: &str,
    source: &str,
    line: usize,
    what: &str,
) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::parse(source, line, format!("invalid {what} `{field}`")))
}
