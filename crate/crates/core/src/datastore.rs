//! Building the abstract and full-text datastores from a corpus.

use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_publication, Corpus};
use crate::embedding::{EmbedError, Embedder};
use crate::vectorstore::{DatastoreEntry, VectorStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    /// Full-text window size in characters.
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    /// Abstracts longer than this are still stored whole, with a warning.
    pub abstract_size: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            chunk_size: 1000,
            chunk_overlap: 100,
            abstract_size: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Datastores {
    pub abstracts: VectorStore,
    pub fulltext: VectorStore,
    pub warnings: Vec<String>,
}

/// Embed each abstract as one entry and each full-text window as one entry,
/// keyed by publication id.
pub fn build_datastores(corpus: &Corpus, embedder: &dyn Embedder, chunking: ChunkingConfig) -> Result<Datastores> {
    let mut warnings = Vec::new();
    let mut abstracts = VectorStore::new(embedder.dim());
    let mut fulltext = VectorStore::new(embedder.dim());

    let abstract_texts: Vec<String> = corpus.iter().map(|p| p.abstract_text.clone()).collect();
    for p in corpus.iter() {
        let n = p.abstract_text.chars().count();
        if n > chunking.abstract_size {
            warnings.push(format!(
                "{}: abstract has {n} characters (> {}), stored whole",
                p.pub_id, chunking.abstract_size
            ));
        }
    }
    let vectors = embedder.embed_batch(&abstract_texts)?;
    for (p, v) in corpus.iter().zip(vectors) {
        let v = v.map_err(|e| with_context(e, &p.pub_id, "abstract"))?;
        abstracts.insert(DatastoreEntry::abstract_entry(&p.pub_id, v, &p.abstract_text))?;
    }

    let mut chunks = Vec::new();
    for p in corpus.iter() {
        let c = chunk_publication(p, chunking.chunk_size, chunking.chunk_overlap)?;
        if c.is_empty() {
            warnings.push(format!("{}: empty full text, no chunks stored", p.pub_id));
        }
        chunks.extend(c);
    }
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = embedder.embed_batch(&texts)?;
    for (c, v) in chunks.iter().zip(vectors) {
        let v = v.map_err(|e| with_context(e, &c.pub_id, &format!("chunk {}", c.chunk_index)))?;
        fulltext.insert(DatastoreEntry::chunk_entry(&c.pub_id, c.chunk_index as u32, v, &c.text))?;
    }

    for w in &warnings {
        tracing::warn!("{w}");
    }
    Ok(Datastores {
        abstracts,
        fulltext,
        warnings,
    })
}

fn with_context(e: EmbedError, pub_id: &str, what: &str) -> Error {
    Error::InvalidParameters(format!("embedding {what} of {pub_id} failed: {e}"))
}
