use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// First 12 hex digits of the SHA-256 of `contents`.
pub fn content_hash(contents: &str) -> String {
    Sha256::digest(contents.as_bytes()).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '.' | '_') { c } else { '_' }).collect()
}

/// Writes report files named `<model>-<kind>-seed<seed>-<hash>.<ext>`.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    model: String,
    seed: u64,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path, model: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), model: sanitize(model), seed, files: Vec::new() })
    }

    pub fn file_name(&self, kind: &str, ext: &str, contents: &str) -> String {
        format!("{}-{}-seed{}-{}.{ext}", self.model, sanitize(kind), self.seed, content_hash(contents))
    }

    pub fn write(&mut self, kind: &str, ext: &str, contents: &str) -> Result<PathBuf> {
        let name = self.file_name(kind, ext, contents);
        let path = self.dir.join(&name);
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name);
        Ok(path)
    }

    /// Names written so far, in order.
    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
