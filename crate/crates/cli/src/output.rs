use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Run directory that remembers which files were written into it.
#[derive(Debug)]
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl Output {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir, files: Vec::new() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path of `name`, recorded in the manifest.
    pub fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    /// Records files written by a library routine directly into the directory.
    pub fn record(&mut self, names: impl IntoIterator<Item = String>) {
        self.files.extend(names);
    }

    pub fn text(&mut self, name: &str, s: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, s).map_err(|e| io_err(&p, e))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<(), CliError> {
        let s = serde_json::to_string_pretty(v).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        self.text(name, &format!("{s}\n"))
    }

    /// Opens `name` for writing and hands the writer to `f`.
    pub fn with_writer(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> ecfm::Result<()>) -> Result<(), CliError> {
        let p = self.path(name);
        let mut w = BufWriter::new(File::create(&p).map_err(|e| io_err(&p, e))?);
        f(&mut w)?;
        w.flush().map_err(|e| io_err(&p, e))
    }

    pub fn into_files(self) -> Vec<String> {
        self.files
    }
}
