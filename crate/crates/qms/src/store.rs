//! Embedded file-backed document store.
//!
//! Layout: `<root>/<collection>/<id>.json`, one JSON file per document.
//! Writes go to a temporary file that is fsynced and then renamed over the
//! target, so a reader (or a restart after a crash) sees either the previous
//! or the new document, never a partial one. Writes within a collection are
//! serialized by a per-collection lock; reads take no lock.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage unavailable: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt document {path}: {source}")]
    Corrupt { path: PathBuf, source: serde_json::Error },
    #[error("invalid collection name `{0}`")]
    InvalidCollection(String),
    #[error("document not found")]
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub collection: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    /// Store-wide insertion counter; orders documents created in the same
    /// clock tick.
    pub seq: u64,
    pub body: Value,
}

impl Document {
    /// Top-level body field.
    pub fn field(&self, name: &str) -> Option<&Value> {
        self.body.get(name)
    }

    pub fn str_field(&self, name: &str) -> Option<&str> {
        self.field(name).and_then(Value::as_str)
    }
}

/// Field-equality filter over top-level body fields.
pub type Filter = Map<String, Value>;

/// Builds a filter from `(field, value)` pairs.
pub fn filter<I, K, V>(pairs: I) -> Filter
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<Value>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    seq: AtomicU64,
}

/// 24 lowercase hex characters from 96 random bits.
pub fn new_id() -> String {
    let mut bytes = [0u8; 12];
    rand::thread_rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

pub fn is_valid_id(id: &str) -> bool {
    id.len() == 24 && id.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn is_valid_collection(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

impl Store {
    /// Opens (creating if needed) the store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let store = Store { root, locks: Mutex::new(HashMap::new()), seq: AtomicU64::new(0) };
        let mut max_seq = 0;
        for entry in fs::read_dir(&store.root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                if let Some(name) = entry.file_name().to_str().filter(|n| is_valid_collection(n)) {
                    for doc in store.scan(name)? {
                        max_seq = max_seq.max(doc.seq);
                    }
                }
            }
        }
        store.seq.store(max_seq + 1, Ordering::SeqCst);
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn collection_dir(&self, collection: &str) -> Result<PathBuf, StoreError> {
        if !is_valid_collection(collection) {
            return Err(StoreError::InvalidCollection(collection.to_string()));
        }
        Ok(self.root.join(collection))
    }

    fn lock(&self, collection: &str) -> Arc<Mutex<()>> {
        self.locks.lock().entry(collection.to_string()).or_default().clone()
    }

    /// Inserts `body` under a fresh id. The document is on disk when this
    /// returns.
    pub fn insert(&self, collection: &str, body: Value) -> Result<String, StoreError> {
        let dir = self.collection_dir(collection)?;
        let lock = self.lock(collection);
        let _guard = lock.lock();
        self.insert_locked(&dir, collection, body).map(|d| d.id)
    }

    fn insert_locked(&self, dir: &Path, collection: &str, body: Value) -> Result<Document, StoreError> {
        fs::create_dir_all(dir)?;
        let mut id = new_id();
        while dir.join(format!("{id}.json")).exists() {
            id = new_id();
        }
        let now = Utc::now();
        let doc = Document {
            id,
            collection: collection.to_string(),
            created_at: now,
            updated_at: now,
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            body,
        };
        write_atomically(dir, &doc)?;
        Ok(doc)
    }

    /// Inserts `body` unless a document matching `unique` already exists, in
    /// which case that document is returned and nothing is written. The
    /// check and the insert happen under the collection lock.
    pub fn insert_unique(&self, collection: &str, unique: &Filter, body: Value) -> Result<(Document, bool), StoreError> {
        let dir = self.collection_dir(collection)?;
        let lock = self.lock(collection);
        let _guard = lock.lock();
        if let Some(existing) = self.scan(collection)?.into_iter().find(|d| matches(d, unique)) {
            return Ok((existing, false));
        }
        self.insert_locked(&dir, collection, body).map(|d| (d, true))
    }

    /// The last written version of the document, if it exists.
    pub fn get(&self, collection: &str, id: &str) -> Result<Option<Document>, StoreError> {
        let dir = self.collection_dir(collection)?;
        if !is_valid_id(id) {
            return Ok(None);
        }
        read_document(&dir.join(format!("{id}.json")))
    }

    /// All documents whose body matches every field in `filter`, oldest
    /// first.
    pub fn query(&self, collection: &str, filter: &Filter) -> Result<Vec<Document>, StoreError> {
        self.collection_dir(collection)?;
        let mut docs: Vec<Document> = self.scan(collection)?.into_iter().filter(|d| matches(d, filter)).collect();
        docs.sort_by_key(|d| (d.created_at, d.seq));
        Ok(docs)
    }

    pub fn count(&self, collection: &str) -> Result<usize, StoreError> {
        Ok(self.query(collection, &Filter::new())?.len())
    }

    /// Replaces the whole body.
    pub fn update(&self, collection: &str, id: &str, body: Value) -> Result<Document, StoreError> {
        self.modify(collection, id, |b| {
            *b = body;
            Ok::<_, StoreError>(())
        })?
        .ok_or(StoreError::NotFound)
    }

    /// Read-modify-write of one document under the collection lock. Returns
    /// `Ok(None)` if the document does not exist; an error from `f` aborts
    /// without writing.
    pub fn modify<E, F>(&self, collection: &str, id: &str, f: F) -> Result<Option<Document>, E>
    where
        F: FnOnce(&mut Value) -> Result<(), E>,
        E: From<StoreError>,
    {
        let dir = self.collection_dir(collection)?;
        let lock = self.lock(collection);
        let _guard = lock.lock();
        let Some(mut doc) = self.get(collection, id)? else {
            return Ok(None);
        };
        f(&mut doc.body)?;
        doc.updated_at = Utc::now().max(doc.created_at);
        write_atomically(&dir, &doc)?;
        Ok(Some(doc))
    }

    pub fn delete(&self, collection: &str, id: &str) -> Result<(), StoreError> {
        let dir = self.collection_dir(collection)?;
        if !is_valid_id(id) {
            return Err(StoreError::NotFound);
        }
        let lock = self.lock(collection);
        let _guard = lock.lock();
        match fs::remove_file(dir.join(format!("{id}.json"))) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound),
            Err(e) => Err(e.into()),
        }
    }

    fn scan(&self, collection: &str) -> Result<Vec<Document>, StoreError> {
        let dir = self.root.join(collection);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut docs = Vec::new();
        for entry in entries {
            let path = entry?.path();
            let is_doc = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".json")).is_some_and(is_valid_id);
            if is_doc {
                // Deleted between listing and reading.
                if let Some(doc) = read_document(&path)? {
                    docs.push(doc);
                }
            }
        }
        Ok(docs)
    }
}

fn matches(doc: &Document, filter: &Filter) -> bool {
    filter.iter().all(|(k, v)| doc.body.get(k) == Some(v))
}

fn read_document(path: &Path) -> Result<Option<Document>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    serde_json::from_slice(&bytes).map(Some).map_err(|source| StoreError::Corrupt { path: path.to_path_buf(), source })
}

fn write_atomically(dir: &Path, doc: &Document) -> Result<(), StoreError> {
    let target = dir.join(format!("{}.json", doc.id));
    let tmp = dir.join(format!(".{}.{}.tmp", doc.id, new_id()));
    let bytes = serde_json::to_vec(doc).map_err(|e| StoreError::Io(io::Error::other(e)))?;
    let result = (|| {
        let mut file = OpenOptions::new().write(true).create_new(true).open(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, &target)?;
        File::open(dir)?.sync_all()
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::collections::HashSet;

    fn store() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("svc")).unwrap();
        (dir, store)
    }

    #[test]
    fn insert_get_round_trip() {
        let (_d, s) = store();
        let body = json!({"name": "a", "n": 0.1, "big": 1.7976931348623157e308, "nested": {"l": [1, true, null, "x"]}});
        let id = s.insert("users", body.clone()).unwrap();
        assert!(is_valid_id(&id));
        let doc = s.get("users", &id).unwrap().unwrap();
        assert_eq!(doc.body, body);
        assert_eq!(doc.collection, "users");
        assert!(doc.updated_at >= doc.created_at);
        assert!(s.root().join("users").join(format!("{id}.json")).exists());
    }

    #[test]
    fn identical_bodies_get_distinct_ids() {
        let (_d, s) = store();
        let a = s.insert("c", json!({"x": 1})).unwrap();
        let b = s.insert("c", json!({"x": 1})).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn missing_documents() {
        let (_d, s) = store();
        assert!(s.get("users", &new_id()).unwrap().is_none());
        assert!(s.get("users", "../../etc/passwd").unwrap().is_none());
        assert!(matches!(s.update("users", &new_id(), json!({})), Err(StoreError::NotFound)));
        assert!(matches!(s.delete("users", &new_id()), Err(StoreError::NotFound)));
        assert!(matches!(s.insert("../x", json!({})), Err(StoreError::InvalidCollection(_))));
        assert!(matches!(s.insert("", json!({})), Err(StoreError::InvalidCollection(_))));
    }

    #[test]
    fn update_then_get() {
        let (_d, s) = store();
        let id = s.insert("c", json!({"v": 1})).unwrap();
        let before = s.get("c", &id).unwrap().unwrap();
        let after = s.update("c", &id, json!({"v": 2})).unwrap();
        assert_eq!(after.id, id);
        assert_eq!(s.get("c", &id).unwrap().unwrap().body, json!({"v": 2}));
        assert_eq!(after.created_at, before.created_at);
        assert!(after.updated_at >= before.updated_at);
    }

    #[test]
    fn query_filters_in_insertion_order() {
        let (_d, s) = store();
        let a = s.insert("a", json!({"user_id": "x", "k": 1})).unwrap();
        s.insert("a", json!({"user_id": "y", "k": 2})).unwrap();
        let c = s.insert("a", json!({"user_id": "x", "k": 3})).unwrap();
        let all = s.query("a", &Filter::new()).unwrap();
        assert_eq!(all.len(), 3);
        let xs: Vec<_> = s.query("a", &filter([("user_id", "x")])).unwrap().into_iter().map(|d| d.id).collect();
        assert_eq!(xs, [a, c]);
        assert!(s.query("a", &filter([("missing", "x")])).unwrap().is_empty());
        assert!(s.query("never", &Filter::new()).unwrap().is_empty());
    }

    #[test]
    fn count_tracks_inserts_minus_deletes() {
        let (_d, s) = store();
        let ids: Vec<_> = (0..5).map(|i| s.insert("c", json!({"i": i})).unwrap()).collect();
        s.delete("c", &ids[1]).unwrap();
        s.delete("c", &ids[3]).unwrap();
        assert_eq!(s.count("c").unwrap(), 3);
    }

    #[test]
    fn insert_unique_is_idempotent() {
        let (_d, s) = store();
        let f = filter([("user_id", "u1")]);
        let (first, created) = s.insert_unique("users", &f, json!({"user_id": "u1"})).unwrap();
        assert!(created);
        let (again, created) = s.insert_unique("users", &f, json!({"user_id": "u1"})).unwrap();
        assert!(!created);
        assert_eq!(first.id, again.id);
        assert_eq!(s.count("users").unwrap(), 1);
    }

    #[test]
    fn modify_error_leaves_document_untouched() {
        let (_d, s) = store();
        let id = s.insert("c", json!({"v": 1})).unwrap();
        let r: Result<_, StoreError> = s.modify("c", &id, |b| {
            b["v"] = json!(2);
            Err(StoreError::NotFound)
        });
        assert!(r.is_err());
        assert_eq!(s.get("c", &id).unwrap().unwrap().body, json!({"v": 1}));
    }

    #[test]
    fn reopen_preserves_documents_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let first = {
            let s = Store::open(dir.path()).unwrap();
            s.insert("c", json!({"n": 1})).unwrap()
        };
        let s = Store::open(dir.path()).unwrap();
        let second = s.insert("c", json!({"n": 2})).unwrap();
        let ids: Vec<_> = s.query("c", &Filter::new()).unwrap().into_iter().map(|d| d.id).collect();
        assert_eq!(ids, [first, second]);
    }

    #[test]
    fn leftover_temp_files_are_ignored() {
        let (_d, s) = store();
        let id = s.insert("c", json!({"v": "old"})).unwrap();
        // A write interrupted before its rename leaves only a temp file.
        fs::write(s.root().join("c").join(format!(".{id}.deadbeef.tmp")), b"{\"body\": {\"v\": \"ne").unwrap();
        assert_eq!(s.get("c", &id).unwrap().unwrap().body, json!({"v": "old"}));
        assert_eq!(s.count("c").unwrap(), 1);
    }

    #[test]
    fn ids_do_not_collide() {
        let ids: HashSet<String> = (0..100_000).map(|_| new_id()).collect();
        assert_eq!(ids.len(), 100_000);
        assert!(ids.iter().all(|id| is_valid_id(id)));
    }
}
