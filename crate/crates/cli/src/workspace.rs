//! Fixed layout under one workspace root.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("villa.toml")
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus/corpus.jsonl")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.root.join("corpus/ground_truth.csv")
    }

    pub fn abstracts_store(&self) -> PathBuf {
        self.root.join("stores/abstracts.vdb")
    }

    pub fn fulltext_store(&self) -> PathBuf {
        self.root.join("stores/fulltext.vdb")
    }

    pub fn embedder(&self) -> PathBuf {
        self.root.join("stores/embedder.json")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn review(&self) -> PathBuf {
        self.root.join("review")
    }
}

/// Write `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
