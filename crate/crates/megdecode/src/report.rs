//! Run manifests and tidy TSV emission: every command leaves behind enough
//! to reproduce itself (resolved config, input hashes, seed), and figure data
//! goes out as long-format tables for external plotting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MegError, Result};
use crate::windows::WindowReport;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Everything needed to rerun a command byte-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved configuration after defaults and flag overrides.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// (path as given, sha256 of contents) per input file.
    pub inputs: Vec<(String, String)>,
    pub version: String,
    /// Unix seconds; informational only.
    pub created: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            created: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push((path.display().to_string(), sha256_file(path)?));
        Ok(())
    }

    /// Writes `run_manifest.json` into the output directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| MegError::Runtime(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join("run_manifest.json"), json)?;
        Ok(())
    }
}

/// Refuses to clobber existing outputs unless forced.
pub fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(MegError::Invalid(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Resolves the intermediate-artifact cache directory, if configured.
pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("MEGDECODE_CACHE").map(PathBuf::from)
}

/// Column-checked tab-separated table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl TsvTable {
    pub fn new<S: Into<String>>(columns: Vec<S>) -> Self {
        TsvTable { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(MegError::Shape(format!(
                "row of {} cells in a {}-column table",
                row.len(),
                self.columns.len()
            )));
        }
        for cell in &row {
            if cell.contains('\t') || cell.contains('\n') {
                return Err(MegError::Format(format!("cell {cell:?} contains a separator")));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path, force: bool) -> Result<()> {
        ensure_writable(path, force)?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.6}")
}

/// Tidy long format for window sweeps: one row per (window, metric).
pub fn window_table(rows: &[WindowReport]) -> Result<TsvTable> {
    if rows.is_empty() {
        return Err(MegError::Invalid("empty window sweep".into()));
    }
    let mut table = TsvTable::new(vec!["t_start", "t_end", "midpoint", "metric", "value"]);
    for row in rows {
        for (name, value) in &row.metrics {
            table.push(vec![
                fmt_float(row.spec.t_start),
                fmt_float(row.spec.t_end),
                fmt_float(row.spec.midpoint()),
                name.clone(),
                fmt_float(*value),
            ])?;
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windows::{WindowKind, WindowSpec};

    #[test]
    fn sha256_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trips_with_input_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.bin");
        std::fs::write(&input, b"abc").unwrap();
        let mut m = RunManifest::new(
            "synth-gen",
            serde_json::json!({"snr": 10.0}),
            Some(7),
        );
        m.add_input(&input).unwrap();
        m.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("run_manifest.json")).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.command, "synth-gen");
        assert_eq!(back.seed, Some(7));
        assert_eq!(back.inputs.len(), 1);
        assert!(back.inputs[0].1.starts_with("ba7816bf"));
        assert_eq!(back.config["snr"], serde_json::json!(10.0));
    }

    #[test]
    fn writable_guard_requires_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.tsv");
        ensure_writable(&path, false).unwrap();
        std::fs::write(&path, "x").unwrap();
        assert!(ensure_writable(&path, false).is_err());
        ensure_writable(&path, true).unwrap();
    }

    #[test]
    fn tsv_checks_arity_and_separators() {
        let mut t = TsvTable::new(vec!["a", "b"]);
        t.push(vec!["1".into(), "2".into()]).unwrap();
        assert!(t.push(vec!["1".into()]).is_err());
        assert!(t.push(vec!["1".into(), "x\ty".into()]).is_err());
        assert_eq!(t.render(), "a\tb\n1\t2\n");
    }

    #[test]
    fn window_table_is_long_format() {
        let rows: Vec<WindowReport> = (0..3)
            .map(|i| WindowReport {
                spec: WindowSpec::new(i as f64 * 0.1, i as f64 * 0.1 + 0.1, WindowKind::Sliding)
                    .unwrap(),
                metrics: vec![("top5".into(), 0.5), ("median".into(), 0.25)],
            })
            .collect();
        let table = window_table(&rows).unwrap();
        assert_eq!(table.rows.len(), 6);
        assert_eq!(table.columns[3], "metric");
        assert!(window_table(&[]).is_err());
    }

    #[test]
    fn tsv_write_honors_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        let mut t = TsvTable::new(vec!["a"]);
        t.push(vec!["1".into()]).unwrap();
        t.write(&path, false).unwrap();
        assert!(t.write(&path, false).is_err());
        t.write(&path, true).unwrap();
    }
}
