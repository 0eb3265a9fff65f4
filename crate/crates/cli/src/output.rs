//! Output files that vanish again unless the command finishes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

pub struct Outputs {
    dir: PathBuf,
    created: Vec<PathBuf>,
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn create(dir: &Path) -> CliResult<Self> {
        let mut created = Vec::new();
        let mut missing = Some(dir);
        while let Some(d) = missing {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            created.push(d.to_path_buf());
            missing = d.parent();
        }
        fs::create_dir_all(dir).map_err(|e| certprobe_core::Error::IoFailure {
            path: dir.to_path_buf(),
            source: e,
        })?;
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            created,
            written: Vec::new(),
            committed: false,
        })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        fs::write(&path, contents).map_err(|e| certprobe_core::Error::IoFailure {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let text = to_pretty_json(value)?;
        self.write(name, &text)
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in self.written.iter().rev() {
            let _ = fs::remove_file(path);
        }
        // Deepest first; `remove_dir` refuses non-empty directories.
        for dir in &self.created {
            let _ = fs::remove_dir(dir);
        }
    }
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("serializing output: {e}")))?;
    text.push('\n');
    Ok(text)
}
