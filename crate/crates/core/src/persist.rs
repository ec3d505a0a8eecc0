//! Binary container shared by every persisted model.
//!
//! Layout: ASCII magic `NNMM`, one format-version byte, a UTF-8 manifest of
//! `key=value` (or free-form) lines terminated by an empty line, then a
//! payload whose meaning is fixed by the manifest. Floats in the payload are
//! little-endian `f64`; floats in the manifest use Rust's shortest
//! round-trip formatting so a save→load→save cycle is bit-exact.

use std::collections::BTreeMap;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"NNMM";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("bad magic bytes {found:?} (expected \"NNMM\")")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u8 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("invalid model in file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PersistError>;

/// Writes magic, version and manifest lines followed by the blank terminator.
pub fn write_header(out: &mut Vec<u8>, manifest: &[String]) {
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    for line in manifest {
        debug_assert!(!line.is_empty() && !line.contains('\n'));
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    out.push(b'\n');
}

/// Parses the header and returns the manifest lines and the payload that follows.
pub fn read_header(bytes: &[u8]) -> Result<(Vec<String>, &[u8])> {
    if bytes.len() < 5 {
        return Err(PersistError::Truncated("shorter than the 5-byte header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(PersistError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(PersistError::UnsupportedVersion { found: bytes[4] });
    }
    let body = &bytes[5..];
    let mut lines = Vec::new();
    let mut pos = 0;
    loop {
        let Some(nl) = body[pos..].iter().position(|&b| b == b'\n') else {
            return Err(PersistError::Truncated("manifest is not terminated by a blank line".into()));
        };
        let line = std::str::from_utf8(&body[pos..pos + nl])
            .map_err(|_| PersistError::Manifest("manifest is not UTF-8".into()))?;
        pos += nl + 1;
        if line.is_empty() {
            break;
        }
        lines.push(line.to_string());
    }
    Ok((lines, &body[pos..]))
}

pub fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads `count` little-endian `f64`s and advances `input`.
pub fn take_f64s(input: &mut &[u8], count: usize) -> Result<Vec<f64>> {
    let need = count * 8;
    if input.len() < need {
        return Err(PersistError::Truncated(format!(
            "expected {need} payload bytes, found {}",
            input.len()
        )));
    }
    let values = input[..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    *input = &input[need..];
    Ok(values)
}

/// Shortest representation that parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_f64_list(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| PersistError::Manifest(format!("bad number {t:?}")))
        })
        .collect()
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| PersistError::Manifest(format!("bad index {t:?}")))
        })
        .collect()
}

/// `key=value` fields of one manifest line (tokens separated by spaces).
pub fn line_fields(line: &str) -> BTreeMap<&str, &str> {
    line.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .collect()
}

/// Key/value view over a whole manifest of `key=value` lines.
#[derive(Debug, Default)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn from_lines(lines: &[String]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PersistError::Manifest(format!("expected key=value, got {line:?}")))?;
            entries.insert(k.to_string(), v.to_string());
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| PersistError::Manifest(format!("missing key {key:?}")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| PersistError::Manifest(format!("{key}: bad integer {v:?}")))
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        parse_f64_list(self.get(key)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let mut buf = Vec::new();
        write_header(&mut buf, &["kind=test".into(), "k=2".into()]);
        push_f64s(&mut buf, &[1.5, -0.0, f64::MIN_POSITIVE]);
        let (lines, mut rest) = read_header(&buf).unwrap();
        assert_eq!(lines, vec!["kind=test", "k=2"]);
        let vals = take_f64s(&mut rest, 3).unwrap();
        assert_eq!(vals[0], 1.5);
        assert!(vals[1].is_sign_negative());
        assert_eq!(vals[2], f64::MIN_POSITIVE);
        assert!(rest.is_empty());
    }

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(read_header(b"XXXX\x01\n"), Err(PersistError::BadMagic { .. })));
        assert!(matches!(
            read_header(b"NNMM\x09\n"),
            Err(PersistError::UnsupportedVersion { found: 9 })
        ));
        assert!(matches!(read_header(b"NNMM\x01k=1\n"), Err(PersistError::Truncated(_))));
    }

    #[test]
    fn float_text_is_exact() {
        let v = [0.1, 1.0 / 3.0, 1e-300, 123456.789];
        let parsed = parse_f64_list(&fmt_f64_list(&v)).unwrap();
        for (a, b) in v.iter().zip(&parsed) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
