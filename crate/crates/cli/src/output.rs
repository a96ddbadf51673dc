//! Output directory management: delimited tables with a metadata preamble,
//! the run manifest, and file digests.
//!
//! Numeric tables carry only reproducible metadata (seed, digest, version),
//! so reruns with equal inputs are byte-identical. The single timestamp of
//! a run lives in manifest.txt, which is provenance, not data.

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex sha256 of a byte slice.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

/// Hex sha256 of a file's contents.
pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(digest_bytes(&bytes))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// One output directory; all emissions of a run go through it.
pub struct OutDir {
    root: PathBuf,
    /// (key, value) preamble stamped into every table.
    stamp: Vec<(String, String)>,
    files: Vec<String>,
}

impl OutDir {
    /// Create (or reuse) the directory. The stamp must contain only
    /// run-reproducible values.
    pub fn create(root: &Path, seed: u64, config_digest: &str) -> Result<Self> {
        std::fs::create_dir_all(root)
            .with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            stamp: vec![
                ("version".into(), VERSION.into()),
                ("seed".into(), seed.to_string()),
                ("config".into(), config_digest.into()),
            ],
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Write a delimited table: `# key: value` preamble, header row, data
    /// rows. Values are written exactly as given.
    pub fn write_table(&mut self, name: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.stamp {
            writeln!(text, "# {k}: {v}").unwrap();
        }
        writeln!(text, "{}", columns.join(",")).unwrap();
        for row in rows {
            debug_assert_eq!(row.len(), columns.len(), "row width mismatch in {name}");
            writeln!(text, "{}", row.join(",")).unwrap();
        }
        self.write_raw(name, text.as_bytes())
    }

    /// Write a plain text file (reports, grid specs).
    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.write_raw(name, text.as_bytes())
    }

    pub fn write_raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes)
            .with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Register a file another writer placed in this directory, so the
    /// manifest lists it.
    pub fn note(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    /// Write manifest.txt: command line, digests, seed, version, timestamp,
    /// and the list of files this run emitted.
    pub fn write_manifest(
        &mut self,
        cmdline: &str,
        seed: u64,
        config_digest: &str,
        input_digests: &[(String, String)],
    ) -> Result<()> {
        let mut text = String::new();
        writeln!(text, "command: {cmdline}").unwrap();
        writeln!(text, "version: {VERSION}").unwrap();
        writeln!(text, "seed: {seed}").unwrap();
        writeln!(text, "config_digest: {config_digest}").unwrap();
        for (name, digest) in input_digests {
            writeln!(text, "input: {name} sha256={digest}").unwrap();
        }
        writeln!(text, "timestamp: {}", chrono::Utc::now().to_rfc3339()).unwrap();
        let mut files = self.files.clone();
        files.sort();
        for f in &files {
            writeln!(text, "output: {f}").unwrap();
        }
        let path = self.path("manifest.txt");
        std::fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Format a float for tables: shortest representation that round-trips,
/// with NaN/absent mapped to an empty field.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}
