//! Deterministic artifact writing: `#`-prefixed provenance line, fixed float
//! format, temp file plus rename.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Identity stamped into every artifact.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl Stamp {
    fn header(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "# lqmfg {} config_sha256={} seed={}",
            env!("CARGO_PKG_VERSION"),
            self.config_hash,
            seed
        )
    }
}

/// 17 significant digits, so every `f64` round-trips.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // Fold -0 into 0 so sign-of-zero noise never changes bytes.
        "0".into()
    } else if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row.iter().map(|x| fmt_f64(*x)).collect());
    }

    /// Row whose leading cells are text (labels, counts).
    pub fn push_cells(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    fn render(&self, stamp: &Stamp) -> String {
        let mut out = stamp.header();
        out.push('\n');
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Destination directory plus the stamp shared by its files.
#[derive(Debug, Clone)]
pub struct Sink {
    pub dir: PathBuf,
    pub stamp: Stamp,
}

impl Sink {
    pub fn new(dir: PathBuf, stamp: Stamp) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, stamp })
    }

    pub fn csv(&self, name: &str, table: &Table) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, table.render(&self.stamp).as_bytes())?;
        println!("wrote {} ({} rows)", path.display(), table.len());
        Ok(path)
    }

    /// JSON documents cannot carry a comment line, so the stamp goes in a
    /// leading `meta` object instead.
    pub fn json<T: serde::Serialize>(&self, name: &str, body: &T) -> Result<PathBuf, CliError> {
        let doc = serde_json::json!({
            "meta": {
                "lqmfg": env!("CARGO_PKG_VERSION"),
                "config_sha256": self.stamp.config_hash,
                "seed": self.stamp.seed,
            },
            "report": body,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        let path = self.dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
