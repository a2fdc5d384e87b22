//! CSV emission: every file starts with a comment line recording the
//! config hash and effective seed, then a header row. Floats print with
//! Rust's shortest-roundtrip formatting, so reruns are byte-identical.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub fn config_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").expect("writing to a string");
    }
    hex
}

/// One output file, buffered in memory and written on `finish`.
pub struct CsvFile {
    path: PathBuf,
    buf: String,
}

/// RFC-4180-style escaping: quote only when the field contains a comma,
/// quote, or newline.
fn push_field(buf: &mut String, field: &str) {
    if field.contains([',', '"', '\n']) {
        buf.push('"');
        for ch in field.chars() {
            if ch == '"' {
                buf.push('"');
            }
            buf.push(ch);
        }
        buf.push('"');
    } else {
        buf.push_str(field);
    }
}

impl CsvFile {
    pub fn create(dir: &Path, name: &str, hash: &str, seed: u64) -> CsvFile {
        let mut buf = String::new();
        let _ = writeln!(buf, "# config_hash={hash}, seed={seed}");
        CsvFile {
            path: dir.join(name),
            buf,
        }
    }

    pub fn header(&mut self, cols: &[&str]) {
        self.row(cols.iter().map(|c| c.to_string()));
    }

    pub fn row(&mut self, fields: impl IntoIterator<Item = String>) {
        let mut first = true;
        for field in fields {
            if !first {
                self.buf.push(',');
            }
            push_field(&mut self.buf, &field);
            first = false;
        }
        self.buf.push('\n');
    }

    pub fn finish(self) -> std::io::Result<PathBuf> {
        std::fs::write(&self.path, self.buf.as_bytes())?;
        Ok(self.path)
    }
}

pub fn fmt_f(v: f64) -> String {
    // normalize negative zero so summaries never print "-0"
    format!("{}", if v == 0.0 { 0.0 } else { v })
}

pub fn fmt_bool(v: bool) -> String {
    if v {
        "pass".to_string()
    } else {
        "FAIL".to_string()
    }
}
