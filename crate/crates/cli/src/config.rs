//! Settings resolved from built-in defaults, an optional TOML file and
//! command-line flags, in increasing order of precedence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use villa_core::datastore::ChunkingConfig;
use villa_core::evaluation::StdKind;
use villa_core::pipeline::{QueryMode, RetrievalConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Top-k of the single-stage methods.
    pub k: usize,
    /// Distance threshold at both retrieval levels unless overridden below.
    pub t: f64,
    pub t_abstracts: Option<f64>,
    pub t_chunks: Option<f64>,
    pub k_a: usize,
    pub k_c: usize,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub abstract_size: usize,
    pub iterations: u32,
    pub jobs: usize,
    pub virus: String,
    pub query_mode: QueryMode,
    /// `mock` or `remote:MODEL`.
    pub embedder: String,
    pub embedder_dim: usize,
    pub embedder_max_chars: Option<usize>,
    pub mock_seed: u64,
    /// `mock:oracle`, `mock:empty` or `remote:MODEL`.
    pub responder: String,
    pub std: StdKind,
    pub zero_shot_template: Option<PathBuf>,
    pub rag_template: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        let r = RetrievalConfig::default();
        let c = ChunkingConfig::default();
        Self {
            k: r.k,
            t: r.t_abstracts,
            t_abstracts: None,
            t_chunks: None,
            k_a: r.k_a,
            k_c: r.k_c,
            chunk_size: c.chunk_size,
            chunk_overlap: c.chunk_overlap,
            abstract_size: c.abstract_size,
            iterations: 5,
            jobs: 1,
            virus: "influenza A".into(),
            query_mode: QueryMode::Prompt,
            embedder: "mock".into(),
            embedder_dim: 512,
            embedder_max_chars: None,
            mock_seed: 7,
            responder: "mock:oracle".into(),
            std: StdKind::Population,
            zero_shot_template: None,
            rag_template: None,
        }
    }
}

pub const VALID_KEYS: [&str; 21] = [
    "k",
    "t",
    "t_abstracts",
    "t_chunks",
    "k_a",
    "k_c",
    "chunk_size",
    "chunk_overlap",
    "abstract_size",
    "iterations",
    "jobs",
    "virus",
    "query_mode",
    "embedder",
    "embedder_dim",
    "embedder_max_chars",
    "mock_seed",
    "responder",
    "std",
    "zero_shot_template",
    "rag_template",
];

fn check_keys(table: &Table, origin: &str) -> Result<()> {
    for key in table.keys() {
        if !VALID_KEYS.contains(&key.as_str()) {
            bail!("{origin}: unknown key {key:?}; valid keys are: {}", VALID_KEYS.join(", "));
        }
    }
    Ok(())
}

/// Read a config file into a key table. Relative template paths are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut table: Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    check_keys(&table, &path.display().to_string())?;
    let base = path.parent().unwrap_or(Path::new("."));
    for key in ["zero_shot_template", "rag_template"] {
        if let Some(Value::String(p)) = table.get(key) {
            let resolved = base.join(p).display().to_string();
            table.insert(key.into(), Value::String(resolved));
        }
    }
    Ok(table)
}

/// Layer `flags` over `file` over the defaults, then validate.
pub fn resolve(file: Table, flags: Table) -> Result<Settings> {
    check_keys(&flags, "flags")?;
    let mut merged = file;
    merged.extend(flags);
    let settings: Settings = Value::Table(merged).try_into().context("invalid configuration value")?;
    settings.validate()?;
    Ok(settings)
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k", self.k),
            ("k_a", self.k_a),
            ("k_c", self.k_c),
            ("chunk_size", self.chunk_size),
            ("abstract_size", self.abstract_size),
            ("jobs", self.jobs),
            ("embedder_dim", self.embedder_dim),
        ] {
            if v == 0 {
                bail!("{name} must be at least 1");
            }
        }
        if self.iterations == 0 {
            bail!("iterations must be at least 1");
        }
        for (name, t) in [("t", Some(self.t)), ("t_abstracts", self.t_abstracts), ("t_chunks", self.t_chunks)] {
            if let Some(t) = t {
                if !(0.0..=2.0).contains(&t) {
                    bail!("{name} = {t} is outside the cosine distance range [0, 2]");
                }
            }
        }
        if self.chunk_overlap >= self.chunk_size {
            bail!(
                "chunk_overlap ({}) must be smaller than chunk_size ({})",
                self.chunk_overlap,
                self.chunk_size
            );
        }
        if self.embedder != "mock" && !self.embedder.starts_with("remote:") {
            bail!("embedder must be `mock` or `remote:MODEL`, got {:?}", self.embedder);
        }
        if self.virus.trim().is_empty() {
            bail!("virus must not be empty");
        }
        Ok(())
    }

    pub fn retrieval(&self) -> RetrievalConfig {
        RetrievalConfig {
            k: self.k,
            k_a: self.k_a,
            k_c: self.k_c,
            t_abstracts: self.t_abstracts.unwrap_or(self.t),
            t_chunks: self.t_chunks.unwrap_or(self.t),
            query_mode: self.query_mode,
            jobs: self.jobs,
        }
    }

    pub fn chunking(&self) -> ChunkingConfig {
        ChunkingConfig {
            chunk_size: self.chunk_size,
            chunk_overlap: self.chunk_overlap,
            abstract_size: self.abstract_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(s: &str) -> Table {
        toml::from_str(s).unwrap()
    }

    #[test]
    fn empty_config_gives_defaults() {
        let s = resolve(Table::new(), Table::new()).unwrap();
        assert_eq!(s, Settings::default());
        assert_eq!((s.k, s.t, s.k_a, s.k_c), (150, 0.5, 160, 160));
        assert_eq!((s.chunk_size, s.chunk_overlap, s.abstract_size, s.iterations), (1000, 100, 5000, 5));
    }

    #[test]
    fn flag_beats_file() {
        let s = resolve(table("k_a = 80"), table("k_a = 20")).unwrap();
        assert_eq!(s.k_a, 20);
    }

    /// Two distinct valid values per key.
    fn samples(key: &str) -> (Value, Value) {
        match key {
            "t" | "t_abstracts" | "t_chunks" => (Value::Float(0.25), Value::Float(0.75)),
            "chunk_size" => (Value::Integer(700), Value::Integer(800)),
            "chunk_overlap" => (Value::Integer(10), Value::Integer(20)),
            "virus" => (Value::String("a".into()), Value::String("b".into())),
            "query_mode" => (Value::String("short".into()), Value::String("prompt".into())),
            "embedder" => (Value::String("remote:a".into()), Value::String("remote:b".into())),
            "responder" => (Value::String("mock:empty".into()), Value::String("remote:x".into())),
            "std" => (Value::String("sample".into()), Value::String("population".into())),
            "zero_shot_template" | "rag_template" => (Value::String("a.toml".into()), Value::String("b.toml".into())),
            _ => (Value::Integer(3), Value::Integer(4)),
        }
    }

    #[test]
    fn precedence_holds_for_every_key() {
        let defaults = toml::Table::try_from(Settings::default()).unwrap();
        for key in VALID_KEYS {
            let (file_value, flag_value) = samples(key);
            let one = |v: &Value| Table::from_iter([(key.to_string(), v.clone())]);
            let get = |s: Settings| toml::Table::try_from(s).unwrap().get(key).cloned();
            assert_eq!(get(resolve(one(&file_value), one(&flag_value)).unwrap()), Some(flag_value.clone()), "{key}");
            assert_eq!(get(resolve(one(&file_value), Table::new()).unwrap()), Some(file_value.clone()), "{key}");
            assert_eq!(get(resolve(Table::new(), Table::new()).unwrap()), defaults.get(key).cloned(), "{key}");
        }
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = resolve(Table::new(), table("top_k = 3")).unwrap_err().to_string();
        assert!(err.contains("top_k") && err.contains("k_a, k_c"), "{err}");
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(resolve(table("chunk_size = 1000\nchunk_overlap = 1000"), Table::new()).is_err());
        assert!(resolve(table("t = 2.5"), Table::new()).is_err());
        assert!(resolve(table("k_a = 0"), Table::new()).is_err());
        assert!(resolve(table("k = -1"), Table::new()).is_err());
        assert!(resolve(table("embedder = \"openai\""), Table::new()).is_err());
    }

    #[test]
    fn separate_thresholds_override_t() {
        let s = resolve(table("t = 0.3\nt_chunks = 0.7"), Table::new()).unwrap();
        let r = s.retrieval();
        assert_eq!((r.t_abstracts, r.t_chunks), (0.3, 0.7));
    }
}
