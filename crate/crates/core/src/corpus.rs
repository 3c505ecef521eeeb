//! Publications, ground truth, and character-window chunking.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mutation::{self, Mutation};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("duplicate pub_id `{pub_id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        pub_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("ground truth row {row}: {message}")]
    GroundTruthRow { row: usize, message: String },
    #[error("ground truth: {0}")]
    GroundTruthCsv(#[from] csv::Error),
    #[error("invalid chunking parameters: size {size}, overlap {overlap} (need 0 <= overlap < size)")]
    InvalidChunking { size: usize, overlap: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Publication {
    pub pub_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub abstract_text: String,
    /// Main sections only: no abstract, references or supplement.
    pub full_text: String,
}

#[derive(Deserialize)]
struct PublicationRecord {
    pub_id: Option<String>,
    title: Option<String>,
    #[serde(rename = "abstract")]
    abstract_text: Option<String>,
    full_text: Option<String>,
}

#[derive(Serialize)]
struct PublicationRecordOut<'a> {
    pub_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    title: Option<&'a str>,
    #[serde(rename = "abstract")]
    abstract_text: &'a str,
    full_text: &'a str,
}

impl Publication {
    /// One JSON line in the corpus file format.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&PublicationRecordOut {
            pub_id: &self.pub_id,
            title: self.title.as_deref(),
            abstract_text: &self.abstract_text,
            full_text: &self.full_text,
        })
        .expect("publication serializes")
    }
}

/// Publications in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    publications: Vec<Publication>,
    by_id: HashMap<String, usize>,
    // Source line of each publication, for duplicate diagnostics.
    lines: Vec<usize>,
}

impl Corpus {
    /// Build from in-memory publications, enforcing the same invariants as
    /// [`load_corpus`]. Line numbers in errors are 1-based positions.
    pub fn new(publications: Vec<Publication>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for (i, p) in publications.into_iter().enumerate() {
            corpus.push(p, i + 1)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, p: Publication, line: usize) -> Result<(), CorpusError> {
        if p.pub_id.trim().is_empty() {
            return Err(CorpusError::Record {
                line,
                message: "pub_id is empty".into(),
            });
        }
        if p.abstract_text.trim().is_empty() {
            return Err(CorpusError::Record {
                line,
                message: format!("abstract of `{}` is empty", p.pub_id),
            });
        }
        if let Some(&prev) = self.by_id.get(&p.pub_id) {
            return Err(CorpusError::DuplicateId {
                pub_id: p.pub_id,
                first_line: self.lines[prev],
                second_line: line,
            });
        }
        self.by_id.insert(p.pub_id.clone(), self.publications.len());
        self.publications.push(p);
        self.lines.push(line);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.publications.len()
    }

    pub fn is_empty(&self) -> bool {
        self.publications.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Publication> {
        self.publications.iter()
    }

    pub fn get(&self, pub_id: &str) -> Option<&Publication> {
        self.by_id.get(pub_id).map(|&i| &self.publications[i])
    }

    pub fn contains(&self, pub_id: &str) -> bool {
        self.by_id.contains_key(pub_id)
    }

    pub fn publications(&self) -> &[Publication] {
        &self.publications
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.publications {
            out.push_str(&p.to_json_line());
            out.push('\n');
        }
        out
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_corpus(file).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Parse line-delimited JSON publications. Blank lines are skipped but still
/// counted for line numbers.
pub fn read_corpus(reader: impl Read) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::default();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PublicationRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Record {
                line: line_no,
                message: e.to_string(),
            })?;
        let missing = |field: &str| CorpusError::Record {
            line: line_no,
            message: format!("missing field `{field}`"),
        };
        let p = Publication {
            pub_id: rec.pub_id.ok_or_else(|| missing("pub_id"))?,
            title: rec.title,
            abstract_text: rec.abstract_text.ok_or_else(|| missing("abstract"))?,
            full_text: rec.full_text.ok_or_else(|| missing("full_text"))?,
        };
        corpus.push(p, line_no)?;
    }
    Ok(corpus)
}

/// A contiguous window of a publication's full text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub pub_id: String,
    pub chunk_index: usize,
    /// Offset in Unicode scalar values.
    pub start_offset: usize,
    pub text: String,
}

/// A window produced by [`chunk_text`], before it is tied to a publication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextWindow {
    pub start: usize,
    pub text: String,
}

impl TextWindow {
    pub fn len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

/// Split `text` into windows of `size` characters whose starts advance by
/// `size - overlap`. The last window is the remaining tail; no window is
/// emitted once the previous one already reached the end of the text.
///
/// Offsets count Unicode scalar values. An empty text yields no windows.
pub fn chunk_text(text: &str, size: usize, overlap: usize) -> Result<Vec<TextWindow>, CorpusError> {
    if size == 0 || overlap >= size {
        return Err(CorpusError::InvalidChunking { size, overlap });
    }
    // Byte offset of every char boundary, plus the end.
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect();
    let len = bounds.len() - 1;
    let stride = size - overlap;

    let mut windows = Vec::with_capacity(len / stride + 1);
    let mut start = 0;
    while start < len {
        let end = (start + size).min(len);
        windows.push(TextWindow {
            start,
            text: text[bounds[start]..bounds[end]].to_string(),
        });
        if end == len {
            break;
        }
        start += stride;
    }
    Ok(windows)
}

/// Chunk a publication's full text.
pub fn chunk_publication(p: &Publication, size: usize, overlap: usize) -> Result<Vec<Chunk>, CorpusError> {
    Ok(chunk_text(&p.full_text, size, overlap)?
        .into_iter()
        .enumerate()
        .map(|(chunk_index, w)| Chunk {
            pub_id: p.pub_id.clone(),
            chunk_index,
            start_offset: w.start,
            text: w.text,
        })
        .collect())
}

/// Per-protein mutations and the publications supporting them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProteinTruth {
    pub mutations: BTreeSet<Mutation>,
    pub pub_ids: BTreeSet<String>,
    /// Which publications report each mutation.
    pub attributions: BTreeMap<Mutation, BTreeSet<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthDataset {
    proteins: BTreeMap<String, ProteinTruth>,
}

impl GroundTruthDataset {
    pub fn insert(&mut self, protein: &str, mutation: Mutation, pub_id: &str) {
        let entry = self.proteins.entry(protein.to_string()).or_default();
        entry.mutations.insert(mutation);
        entry.pub_ids.insert(pub_id.to_string());
        entry
            .attributions
            .entry(mutation)
            .or_default()
            .insert(pub_id.to_string());
    }

    pub fn proteins(&self) -> impl Iterator<Item = &str> {
        self.proteins.keys().map(String::as_str)
    }

    pub fn protein(&self, name: &str) -> Option<&ProteinTruth> {
        self.proteins.get(name)
    }

    pub fn len(&self) -> usize {
        self.proteins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proteins.is_empty()
    }

    /// Every publication id referenced anywhere in the dataset.
    pub fn all_pub_ids(&self) -> BTreeSet<&str> {
        self.proteins
            .values()
            .flat_map(|p| p.pub_ids.iter().map(String::as_str))
            .collect()
    }

    /// (protein, mutation, pub_id) rows in the CSV exchange format.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["protein", "mutation", "pub_id"]).unwrap();
        for (protein, truth) in &self.proteins {
            for (m, pubs) in &truth.attributions {
                for pub_id in pubs {
                    w.write_record([protein.as_str(), &m.to_string(), pub_id]).unwrap();
                }
            }
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// Accessor that distinguishes nothing from an unknown protein: both yield
/// empty sets.
pub fn ground_truth_for_protein(gt: &GroundTruthDataset, protein: &str) -> (BTreeSet<Mutation>, BTreeSet<String>) {
    gt.protein(protein)
        .map(|t| (t.mutations.clone(), t.pub_ids.clone()))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedGroundTruth {
    pub dataset: GroundTruthDataset,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct GroundTruthRow {
    protein: String,
    mutation: String,
    pub_id: String,
}

pub fn load_ground_truth(path: impl AsRef<Path>, corpus: Option<&Corpus>) -> Result<LoadedGroundTruth, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_ground_truth(file, corpus)
}

/// Parse the `protein,mutation,pub_id` CSV. Row numbers in errors count data
/// rows from 1 (the header is row 0). Publication ids missing from `corpus`
/// are reported as warnings, not errors.
pub fn read_ground_truth(reader: impl Read, corpus: Option<&Corpus>) -> Result<LoadedGroundTruth, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for required in ["protein", "mutation", "pub_id"] {
        if !headers.iter().any(|h| h == required) {
            return Err(CorpusError::GroundTruthRow {
                row: 0,
                message: format!("header is missing column `{required}`"),
            });
        }
    }

    let mut dataset = GroundTruthDataset::default();
    let mut warnings = Vec::new();
    let mut unknown = BTreeSet::new();
    for (i, rec) in rdr.deserialize::<GroundTruthRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| CorpusError::GroundTruthRow {
            row,
            message: e.to_string(),
        })?;
        if rec.protein.is_empty() || rec.pub_id.is_empty() {
            return Err(CorpusError::GroundTruthRow {
                row,
                message: "protein and pub_id must be non-empty".into(),
            });
        }
        let m = mutation::parse_mutation(&rec.mutation).map_err(|e| CorpusError::GroundTruthRow {
            row,
            message: e.to_string(),
        })?;
        if let Some(c) = corpus {
            if !c.contains(&rec.pub_id) && unknown.insert(rec.pub_id.clone()) {
                warnings.push(format!("row {row}: pub_id `{}` is not in the corpus", rec.pub_id));
            }
        }
        dataset.insert(&rec.protein, m, &rec.pub_id);
    }
    for (protein, truth) in &dataset.proteins {
        for msg in mutation::lint(&truth.mutations) {
            warnings.push(format!("{protein}: {msg}"));
        }
    }
    Ok(LoadedGroundTruth { dataset, warnings })
}
