//! Provenance headers, seed derivation and atomic artifact writes.

use std::io::{self, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tool version, seed and config hash carried by every artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(seed: u64, canonical_config: &str) -> Self {
        Self { version: VERSION.to_string(), seed, config_hash: config_hash(canonical_config) }
    }

    /// `# arfdx <version> seed=<seed> config_hash=<hash>`
    pub fn comment_line(&self) -> String {
        format!("# arfdx {} seed={} config_hash={}\n", self.version, self.seed, self.config_hash)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tool": "arfdx",
            "version": self.version,
            "seed": self.seed,
            "config_hash": self.config_hash,
        })
    }

    /// Prefixes text with the comment line.
    pub fn wrap_text(&self, body: &str) -> String {
        let mut s = self.comment_line();
        s.push_str(body);
        s
    }
}

/// First 16 hex digits of the SHA-256 of the canonical config text.
pub fn config_hash(canonical_config: &str) -> String {
    let digest = Sha256::digest(canonical_config.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Independent per-stage seed: SHA-256 over the top-level seed and the
/// stage name, first 8 bytes little-endian.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// RFC 4180 CSV (quoting only where needed, CRLF-free).
pub fn csv_text<R, I, S>(header: &[&str], rows: R) -> String
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    let mut w = csv::WriterBuilder::new().quote_style(csv::QuoteStyle::Necessary).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Parses CSV text written by [`csv_text`], skipping `#` comment lines.
/// Returns the header and the records.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), csv::Error> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).has_headers(true).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// Shortest round-tripping decimal form, so CSV values are byte-stable.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
