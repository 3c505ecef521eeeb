//! Durable review state: an append-only JSONL journal replayed over the
//! last snapshot. Every write is fsynced before it becomes visible, and the
//! journal is folded into a new snapshot once it grows past a threshold.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Evaluation, ReviewItem};

const SNAPSHOT: &str = "snapshot.json";
const JOURNAL: &str = "journal.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Record {
    Item(ReviewItem),
    Evaluation(Evaluation),
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Snapshot {
    salt: String,
    items: Vec<ReviewItem>,
    evaluations: Vec<Evaluation>,
}

#[derive(Debug, Default)]
struct State {
    salt: String,
    items: BTreeMap<String, ReviewItem>,
    evaluations: BTreeMap<(String, String), Evaluation>,
}

impl State {
    fn apply(&mut self, record: Record) {
        match record {
            Record::Item(item) => {
                self.items.insert(item.item_id.clone(), item);
            }
            Record::Evaluation(ev) => {
                self.evaluations.insert((ev.item_id.clone(), ev.evaluator_id.clone()), ev);
            }
        }
    }
}

struct Inner {
    state: State,
    journal: File,
    journal_records: usize,
}

pub struct ReviewStore {
    dir: PathBuf,
    compact_every: usize,
    inner: Mutex<Inner>,
}

impl ReviewStore {
    /// Open (or create) the store in `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let snapshot_path = dir.join(SNAPSHOT);
        let mut state = State::default();
        if snapshot_path.exists() {
            let bytes = fs::read(&snapshot_path).map_err(io(&snapshot_path))?;
            let snap: Snapshot = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                path: snapshot_path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
            state.salt = snap.salt;
            snap.items.into_iter().for_each(|i| state.apply(Record::Item(i)));
            snap.evaluations.into_iter().for_each(|e| state.apply(Record::Evaluation(e)));
        } else {
            state.salt = hex::encode(rand::rng().random::<[u8; 16]>());
            write_snapshot(&dir, &state)?;
        }

        let journal_path = dir.join(JOURNAL);
        let mut journal_records = 0;
        if journal_path.exists() {
            let text = fs::read_to_string(&journal_path).map_err(io(&journal_path))?;
            let mut offset = 0;
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            for (i, line) in lines.iter().enumerate() {
                let record = line.trim();
                if !record.is_empty() {
                    match serde_json::from_str::<Record>(record) {
                        Ok(r) => {
                            state.apply(r);
                            journal_records += 1;
                        }
                        // A torn final line is a write that was never
                        // acknowledged; cut it so later appends start clean.
                        Err(e) if i + 1 == lines.len() => {
                            tracing::warn!("{}:{}: dropping incomplete record: {e}", journal_path.display(), i + 1);
                            let f = OpenOptions::new().write(true).open(&journal_path).map_err(io(&journal_path))?;
                            f.set_len(offset as u64).map_err(io(&journal_path))?;
                            f.sync_all().map_err(io(&journal_path))?;
                            break;
                        }
                        Err(e) => {
                            return Err(StoreError::Corrupt {
                                path: journal_path,
                                line: i + 1,
                                message: e.to_string(),
                            })
                        }
                    }
                }
                offset += line.len();
            }
        }
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(io(&journal_path))?;
        Ok(Self {
            dir,
            compact_every: 1000,
            inner: Mutex::new(Inner {
                state,
                journal,
                journal_records,
            }),
        })
    }

    /// Fold the journal into the snapshot after this many records.
    pub fn with_compaction(mut self, every: usize) -> Self {
        self.compact_every = every.max(1);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Secret mixed into item ids so they cannot be recomputed from the
    /// method and model.
    pub fn salt(&self) -> String {
        self.lock().state.salt.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn append(&self, records: Vec<Record>) -> Result<(), StoreError> {
        let mut inner = self.lock();
        let path = self.dir.join(JOURNAL);
        let mut buf = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut buf, r).expect("records serialize");
            buf.push(b'\n');
        }
        inner.journal.write_all(&buf).map_err(io(&path))?;
        inner.journal.sync_data().map_err(io(&path))?;
        inner.journal_records += records.len();
        for r in records {
            inner.state.apply(r);
        }
        if inner.journal_records >= self.compact_every {
            self.compact_locked(&mut inner)?;
        }
        Ok(())
    }

    pub fn upsert_items(&self, items: Vec<ReviewItem>) -> Result<(), StoreError> {
        self.append(items.into_iter().map(Record::Item).collect())
    }

    /// Insert or replace the evaluation for (item, evaluator).
    pub fn submit(&self, evaluation: Evaluation) -> Result<(), StoreError> {
        self.append(vec![Record::Evaluation(evaluation)])
    }

    pub fn item(&self, item_id: &str) -> Option<ReviewItem> {
        self.lock().state.items.get(item_id).cloned()
    }

    /// All items ordered by id.
    pub fn items(&self) -> Vec<ReviewItem> {
        self.lock().state.items.values().cloned().collect()
    }

    pub fn evaluation(&self, item_id: &str, evaluator_id: &str) -> Option<Evaluation> {
        self.lock()
            .state
            .evaluations
            .get(&(item_id.to_string(), evaluator_id.to_string()))
            .cloned()
    }

    /// All evaluations ordered by (item, evaluator).
    pub fn evaluations(&self) -> Vec<Evaluation> {
        self.lock().state.evaluations.values().cloned().collect()
    }

    /// Items the evaluator has completed.
    pub fn completed_by(&self, evaluator_id: &str) -> std::collections::BTreeSet<String> {
        self.lock()
            .state
            .evaluations
            .keys()
            .filter(|(_, e)| e == evaluator_id)
            .map(|(i, _)| i.clone())
            .collect()
    }

    pub fn counts(&self) -> (usize, usize) {
        let inner = self.lock();
        (inner.state.items.len(), inner.state.evaluations.len())
    }

    pub fn compact(&self) -> Result<(), StoreError> {
        let mut inner = self.lock();
        self.compact_locked(&mut inner)
    }

    fn compact_locked(&self, inner: &mut Inner) -> Result<(), StoreError> {
        write_snapshot(&self.dir, &inner.state)?;
        let path = self.dir.join(JOURNAL);
        inner.journal.set_len(0).map_err(io(&path))?;
        inner.journal.sync_all().map_err(io(&path))?;
        inner.journal_records = 0;
        Ok(())
    }
}

fn write_snapshot(dir: &Path, state: &State) -> Result<(), StoreError> {
    let snap = Snapshot {
        salt: state.salt.clone(),
        items: state.items.values().cloned().collect(),
        evaluations: state.evaluations.values().cloned().collect(),
    };
    let path = dir.join(SNAPSHOT);
    let tmp = dir.join(format!("{SNAPSHOT}.tmp"));
    let mut f = File::create(&tmp).map_err(io(&tmp))?;
    serde_json::to_writer(&mut f, &snap).expect("snapshot serializes");
    f.sync_all().map_err(io(&tmp))?;
    fs::rename(&tmp, &path).map_err(io(&path))?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str) -> ReviewItem {
        ReviewItem {
            item_id: id.into(),
            virus: "v".into(),
            protein: "PB2".into(),
            mutations: vec!["E627K".into()],
            reasoning: "r".into(),
            method: "villa".into(),
            model: "m".into(),
        }
    }

    fn eval(item: &str, who: &str, comment: &str) -> Evaluation {
        Evaluation {
            item_id: item.into(),
            evaluator_id: who.into(),
            scores: crate::model::Category::ALL.into_iter().map(|c| (c, 3)).collect(),
            comment: Some(comment.into()),
            submitted_at: "t".into(),
        }
    }

    #[test]
    fn state_survives_reopen_with_and_without_compaction() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = ReviewStore::open(dir.path()).unwrap().with_compaction(3);
            s.upsert_items(vec![item("a"), item("b")]).unwrap();
            s.submit(eval("a", "e1", "first")).unwrap();
            s.submit(eval("a", "e1", "second")).unwrap();
            s.submit(eval("b", "e2", "x")).unwrap();
        }
        let s = ReviewStore::open(dir.path()).unwrap();
        assert_eq!(s.counts(), (2, 2));
        assert_eq!(s.evaluation("a", "e1").unwrap().comment.as_deref(), Some("second"));
    }

    #[test]
    fn salt_is_stable_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let salt = ReviewStore::open(dir.path()).unwrap().salt();
        assert_eq!(salt.len(), 32);
        assert_eq!(ReviewStore::open(dir.path()).unwrap().salt(), salt);
    }

    #[test]
    fn torn_final_line_is_ignored_but_earlier_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = ReviewStore::open(dir.path()).unwrap();
            s.upsert_items(vec![item("a")]).unwrap();
        }
        let journal = dir.path().join(JOURNAL);
        let mut f = OpenOptions::new().append(true).open(&journal).unwrap();
        f.write_all(b"{\"op\":\"item\",\"item_id\":").unwrap();
        drop(f);
        {
            let s = ReviewStore::open(dir.path()).unwrap();
            assert_eq!(s.counts(), (1, 0));
            s.upsert_items(vec![item("b")]).unwrap();
        }
        assert_eq!(ReviewStore::open(dir.path()).unwrap().counts(), (2, 0));

        let good = fs::read_to_string(&journal).unwrap();
        fs::write(&journal, format!("garbage\n{good}")).unwrap();
        assert!(matches!(ReviewStore::open(dir.path()), Err(StoreError::Corrupt { line: 1, .. })));
    }
}
