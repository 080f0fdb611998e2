//! Deterministic run manifests.
//!
//! Every command writes `manifest-<verb>.txt` beside its outputs: the code
//! version, the verb, the config source, the overrides verbatim, the full
//! resolved configuration, a digest line per output artifact, and the
//! command's headline metrics. Two runs of the same command with the same
//! seed produce byte-identical manifests.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use dcap_core::util::sha256_hex;

use crate::CliError;

pub const MANIFEST_FORMAT: &str = "dcap-run-manifest-v1";

pub struct Manifest {
    verb: &'static str,
    lines: Vec<String>,
    outputs: Vec<String>,
    metrics: Vec<String>,
}

fn io_error(path: &Path, source: io::Error) -> CliError {
    CliError::Runtime { detail: format!("{}: {source}", path.display()) }
}

impl Manifest {
    pub fn new(verb: &'static str, config_source: &str) -> Self {
        let mut lines = Vec::new();
        lines.push(format!("format = {MANIFEST_FORMAT}"));
        lines.push(format!("version = {}", env!("CARGO_PKG_VERSION")));
        lines.push(format!("verb = {verb}"));
        lines.push(format!("config = {config_source}"));
        Manifest { verb, lines, outputs: Vec::new(), metrics: Vec::new() }
    }

    /// Records one override exactly as given on the command line.
    pub fn record_override(&mut self, text: &str) {
        self.lines.push(format!("override = {text}"));
    }

    pub fn record_resolved(&mut self, resolved: &[(String, String)]) {
        for (key, value) in resolved {
            self.lines.push(format!("resolved.{key} = {value}"));
        }
    }

    pub fn record_metric(&mut self, name: &str, value: impl std::fmt::Display) {
        self.metrics.push(format!("metric = {name}={value}"));
    }

    /// Writes `bytes` under the output directory and records its digest.
    pub fn write_output(
        &mut self,
        dir: &Path,
        name: &str,
        bytes: &[u8],
    ) -> Result<PathBuf, CliError> {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io_error(&path, e))?;
        self.outputs.push(format!(
            "output = {name} sha256={} bytes={}",
            sha256_hex(bytes),
            bytes.len()
        ));
        Ok(path)
    }

    /// Records an already-written artifact (e.g. a checkpoint saved by the
    /// pipeline) by digesting it from disk.
    pub fn record_file(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
        self.outputs.push(format!(
            "output = {name} sha256={} bytes={}",
            sha256_hex(&bytes),
            bytes.len()
        ));
        Ok(())
    }

    /// Records a directory tree as one line: a combined digest over the
    /// sorted relative paths and contents of every file below `name`.
    pub fn record_tree(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let root = dir.join(name);
        let mut files = Vec::new();
        collect_files(&root, &mut files).map_err(|e| io_error(&root, e))?;
        files.sort();
        let mut combined = Vec::new();
        let mut total = 0usize;
        for path in &files {
            let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
            let rel = path.strip_prefix(&root).expect("file under its own root");
            combined.extend_from_slice(rel.to_string_lossy().as_bytes());
            combined.push(0);
            combined.extend_from_slice(&bytes);
            total += bytes.len();
        }
        self.outputs.push(format!(
            "output = {name}/ sha256={} files={} bytes={total}",
            sha256_hex(&combined),
            files.len()
        ));
        Ok(())
    }

    /// Renders and writes `manifest-<verb>.txt` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        self.outputs.sort();
        let mut text = self.lines.join("\n");
        text.push('\n');
        for line in self.outputs.iter().chain(self.metrics.iter()) {
            text.push_str(line);
            text.push('\n');
        }
        let path = dir.join(format!("manifest-{}.txt", self.verb));
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}

fn collect_files(root: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_are_deterministic_and_digest_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let build = || {
            let mut manifest = Manifest::new("eval", "builtin");
            manifest.record_override("run.seed=3");
            manifest.record_resolved(&[("run.seed".into(), "3".into())]);
            manifest.write_output(dir.path(), "b.csv", b"2").unwrap();
            manifest.write_output(dir.path(), "a.csv", b"1").unwrap();
            manifest.record_metric("mean", "0.5");
            let path = manifest.finish(dir.path()).unwrap();
            fs::read_to_string(path).unwrap()
        };
        let first = build();
        assert_eq!(first, build());
        let positions: Vec<usize> = ["output = a.csv", "output = b.csv", "metric = mean=0.5"]
            .iter()
            .map(|needle| first.find(needle).expect(needle))
            .collect();
        assert!(positions[0] < positions[1] && positions[1] < positions[2]);
        assert!(first.contains("override = run.seed=3"));
        assert!(first.contains("resolved.run.seed = 3"));
        assert!(first.starts_with(&format!("format = {MANIFEST_FORMAT}\n")));
    }

    #[test]
    fn tree_digests_cover_every_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("data/sub")).unwrap();
        fs::write(dir.path().join("data/sub/x.pgm"), b"abc").unwrap();
        fs::write(dir.path().join("data/y.pgm"), b"xyz").unwrap();
        let mut manifest = Manifest::new("synth-data", "builtin");
        manifest.record_tree(dir.path(), "data").unwrap();
        let text = fs::read_to_string(manifest.finish(dir.path()).unwrap()).unwrap();
        assert!(text.contains("output = data/ sha256="));
        assert!(text.contains("files=2 bytes=6"));
    }
}
