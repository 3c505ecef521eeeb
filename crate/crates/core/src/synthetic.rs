//! Deterministic synthetic corpus with known ground truth, for offline
//! end-to-end runs with the mock embedder and the oracle responder.
//!
//! Six publications cover three proteins (two each). Every full text is
//! built from 900-character sections so that with 1000/100 chunking section
//! `j` falls entirely inside chunk `j`. Section 0 is dense in the protein
//! name; later sections mention it once or not at all. Abstracts name the
//! protein and at most one mutation.

use crate::corpus::{Corpus, GroundTruthDataset, Publication};
use crate::datastore::ChunkingConfig;
use crate::embedding::EmbedderConfig;
use crate::mutation::parse_mutation;
use crate::pipeline::{QueryMode, RetrievalConfig};

pub const VIRUS: &str = "influenza A";

const SECTION: usize = 900;

/// Where each publication's mutations sit in its full text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationPlacement {
    /// Two mutations in section 0, the third in section 1.
    Spread,
    /// All mutations in section 0.
    FirstChunk,
}

#[derive(Debug, Clone)]
pub struct SyntheticFixture {
    pub virus: String,
    pub proteins: Vec<String>,
    pub corpus: Corpus,
    pub ground_truth: GroundTruthDataset,
    pub embedder: EmbedderConfig,
    pub chunking: ChunkingConfig,
    /// Retrieval settings the fixture is designed around.
    pub retrieval: RetrievalConfig,
}

const PROTEINS: [(&str, [[&str; 3]; 2]); 3] = [
    ("PB2", [["E627K", "D701N", "K526R"], ["T271A", "Q591K", "E158G"]]),
    ("PB1", [["I368V", "H99Y", "L473V"], ["N375S", "D3V", "K577E"]]),
    ("NS1", [["P42S", "D92E", "A149V"], ["I106M", "N205S", "L103F"]]),
];

const FILLER: &str = "Samples were processed according to standard laboratory protocols and \
results were analysed with appropriate statistical methods. Cells were cultured under \
controlled conditions and plaque assays were performed in triplicate. ";

const METHODS: &str = "Viral titres were determined by plaque assay on monolayers and \
sequencing confirmed the identity of every recombinant stock used throughout this work. ";

/// Repeat `source` and cut to exactly `len` characters, ending in a space.
fn filler(source: &str, len: usize) -> String {
    let mut s: String = source.chars().cycle().take(len.saturating_sub(1)).collect();
    s.push(' ');
    s
}

fn section(body: &str, lead: usize) -> String {
    let mut s = filler(METHODS, lead);
    s.push_str(body);
    s.push(' ');
    let n = s.chars().count();
    assert!(n <= SECTION, "section body too long: {n}");
    s.push_str(&filler(FILLER, SECTION - n));
    s
}

pub fn fixture(placement: MutationPlacement) -> SyntheticFixture {
    let mut pubs = Vec::new();
    let mut gt = GroundTruthDataset::default();
    for (pi, (protein, papers)) in PROTEINS.iter().enumerate() {
        for (j, muts) in papers.iter().enumerate() {
            let pub_id = format!("P{}", pi * 2 + j + 1);
            for m in muts {
                gt.insert(protein, parse_mutation(m).unwrap(), &pub_id);
            }
            let headline = if j == 0 {
                format!(" The {protein} substitution {} was highlighted.", muts[0])
            } else {
                String::new()
            };
            let abstract_text = format!(
                "We characterised mutations in the {protein} protein of influenza A virus. \
                 {protein} mutations alter host adaptation of influenza A in mammals.{headline}"
            );
            let (first, second): (Vec<&str>, Vec<&str>) = match placement {
                MutationPlacement::Spread => (muts[..2].to_vec(), muts[2..].to_vec()),
                MutationPlacement::FirstChunk => (muts.to_vec(), Vec::new()),
            };
            let dense = format!(
                "Mutations in {protein} of influenza A. The {protein} protein of influenza A carries \
                 mutations {}. These {protein} mutations in influenza A change {protein} activity. \
                 {protein} {protein} {protein} mutations.",
                first.join(" and ")
            );
            let mention = if second.is_empty() {
                format!("Additional experiments examined {protein} in detail.")
            } else {
                format!("Additional experiments examined {protein} and the substitution {}.", second.join(", "))
            };
            let full_text = [section(&dense, 0), section(&mention, 150), section("", 150)].concat();
            pubs.push(Publication {
                pub_id,
                title: Some(format!("{protein} mutations study {}", j + 1)),
                abstract_text,
                full_text,
            });
        }
    }
    SyntheticFixture {
        virus: VIRUS.to_string(),
        proteins: PROTEINS.iter().map(|(p, _)| p.to_string()).collect(),
        corpus: Corpus::new(pubs).expect("fixture ids are unique"),
        ground_truth: gt,
        embedder: EmbedderConfig::Mock { seed: 7, dim: 512 },
        chunking: ChunkingConfig::default(),
        retrieval: RetrievalConfig {
            k: 2,
            k_a: 6,
            k_c: 3,
            t_abstracts: 1.0,
            t_chunks: 1.0,
            query_mode: QueryMode::Short,
            jobs: 2,
        },
    }
}
