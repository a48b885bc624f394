//! File helpers shared by the pipeline stages.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(
    path: &Path,
    f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|s| s.to_str()).unwrap_or("")
    ));
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, |w| {
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path, producer: &'static str) -> Result<T> {
    let text = read_input(path, producer)?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a stage input, naming the producing subcommand when it is absent.
pub fn read_input(path: &Path, producer: &'static str) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput {
            path: path.to_path_buf(),
            producer,
        });
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes a CSV with the given header and rows.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: std::fmt::Display,
{
    write_atomic(path, |w| {
        writeln!(w, "{}", header.join(","))?;
        for row in rows {
            let mut first = true;
            for cell in row {
                if !first {
                    w.write_all(b",")?;
                }
                write!(w, "{cell}")?;
                first = false;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Parsed CSV body rows with 1-based file line numbers, after checking the header.
pub fn read_csv_rows(
    path: &Path,
    header: &[&str],
    producer: &'static str,
) -> Result<Vec<(u64, Vec<String>)>> {
    let text = read_input(path, producer)?;
    parse_csv_rows(path, &text, header)
}

pub(crate) fn parse_csv_rows(
    path: &Path,
    text: &str,
    header: &[&str],
) -> Result<Vec<(u64, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut seen_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if !seen_header {
            let got: Vec<&str> = rec.iter().collect();
            if got != header {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!(
                        "expected header `{}`, got `{}`",
                        header.join(","),
                        got.join(",")
                    ),
                });
            }
            seen_header = true;
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected {} fields, got {}", header.len(), rec.len()),
            });
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    name: &str,
    raw: &str,
) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad {name} value `{raw}`"),
    })
}
