//! Local file store: `<root>/<name>` with an optional `<root>/<name>.idx`.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use super::index::{IndexEntry, RecordBatch, RecordIndex, INDEX_ENTRY_LEN};
use super::NodeError;

pub const INDEX_SUFFIX: &str = ".idx";

/// What a node knows about one stored file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileMeta {
    pub size: u64,
    /// Record count. A file without an index counts as one record.
    pub records: u64,
    pub indexed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilePart {
    Data,
    Index,
}

impl FilePart {
    pub fn code(self) -> u8 {
        match self {
            FilePart::Data => 0,
            FilePart::Index => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FilePart::Data),
            1 => Some(FilePart::Index),
            _ => None,
        }
    }
}

/// Reject names that would escape the data directory or collide with index
/// companions.
pub fn check_name(name: &str) -> Result<(), NodeError> {
    let bad = |why: &str| Err(NodeError::BadRequest(format!("file name {name:?}: {why}")));
    if name.is_empty() {
        return bad("empty");
    }
    if name.ends_with(INDEX_SUFFIX) {
        return bad("reserved .idx suffix");
    }
    if name.contains('\0') || name.contains('\\') {
        return bad("illegal character");
    }
    let p = Path::new(name);
    if !p.components().all(|c| matches!(c, Component::Normal(_))) || name.ends_with('/') || name.contains("//") {
        return bad("must be a relative path without . or .. components");
    }
    Ok(())
}

pub struct FileStore {
    root: PathBuf,
    catalog: RwLock<BTreeMap<String, FileMeta>>,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl FileStore {
    /// Open (creating if needed) a store rooted at `root`, cataloguing any
    /// files already present.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, NodeError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let store = Self { root, catalog: RwLock::default(), locks: Mutex::default() };
        let mut found = Vec::new();
        scan(&store.root, &store.root, &mut found)?;
        let mut cat = store.catalog.write().unwrap();
        for name in found {
            if let Ok(meta) = store.stat(&name) {
                cat.insert(name, meta);
            }
        }
        drop(cat);
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn data_path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn index_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}{INDEX_SUFFIX}"))
    }

    fn stat(&self, name: &str) -> Result<FileMeta, NodeError> {
        let size = fs::metadata(self.data_path(name))?.len();
        match fs::metadata(self.index_path(name)) {
            Ok(m) => Ok(FileMeta { size, records: m.len() / INDEX_ENTRY_LEN as u64, indexed: true }),
            Err(_) => Ok(FileMeta { size, records: 1, indexed: false }),
        }
    }

    /// Per-name write lock; stores and appends to one name serialize.
    pub fn lock(&self, name: &str) -> Arc<Mutex<()>> {
        self.locks.lock().unwrap().entry(name.to_string()).or_default().clone()
    }

    /// Persist data and index together. Replaces any existing file.
    pub fn put(&self, name: &str, data: &[u8], index: Option<&RecordIndex>) -> Result<FileMeta, NodeError> {
        check_name(name)?;
        if let Some(idx) = index {
            idx.validate(data.len() as u64).map_err(|e| NodeError::Integrity(format!("{name}: {e}")))?;
        }
        let lock = self.lock(name);
        let _g = lock.lock().unwrap();
        let dp = self.data_path(name);
        if let Some(parent) = dp.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&dp, data)?;
        let ip = self.index_path(name);
        match index {
            Some(idx) => write_atomic(&ip, &idx.encode())?,
            None => {
                let _ = fs::remove_file(&ip);
            }
        }
        let meta = FileMeta {
            size: data.len() as u64,
            records: index.map_or(1, |i| i.len() as u64),
            indexed: index.is_some(),
        };
        self.catalog.write().unwrap().insert(name.to_string(), meta);
        Ok(meta)
    }

    /// Append records to an indexed file, creating it if absent.
    pub fn append(&self, name: &str, data: &[u8], sizes: &[u64]) -> Result<FileMeta, NodeError> {
        check_name(name)?;
        if sizes.iter().sum::<u64>() != data.len() as u64 {
            return Err(NodeError::Integrity(format!("{name}: record sizes do not sum to batch length")));
        }
        let lock = self.lock(name);
        let _g = lock.lock().unwrap();
        let existing = self.meta(name);
        if matches!(existing, Some(m) if !m.indexed) {
            return Err(NodeError::BadRequest(format!("{name} is not record-indexed")));
        }
        let dp = self.data_path(name);
        if let Some(parent) = dp.parent() {
            fs::create_dir_all(parent)?;
        }
        let base = existing.map_or(0, |m| m.size);
        let mut idx = RecordIndex::default();
        let mut off = base;
        for &s in sizes {
            idx.push(IndexEntry { offset: off, size: s });
            off += s;
        }
        let mut df = OpenOptions::new().create(true).append(true).open(&dp)?;
        df.write_all(data)?;
        let mut xf = OpenOptions::new().create(true).append(true).open(self.index_path(name))?;
        xf.write_all(&idx.encode())?;
        let meta = FileMeta {
            size: base + data.len() as u64,
            records: existing.map_or(0, |m| m.records) + sizes.len() as u64,
            indexed: true,
        };
        self.catalog.write().unwrap().insert(name.to_string(), meta);
        Ok(meta)
    }

    pub fn meta(&self, name: &str) -> Option<FileMeta> {
        self.catalog.read().unwrap().get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.catalog.read().unwrap().contains_key(name)
    }

    pub fn list(&self) -> Vec<(String, FileMeta)> {
        self.catalog.read().unwrap().iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn list_prefix(&self, prefix: &str) -> Vec<(String, FileMeta)> {
        self.catalog
            .read()
            .unwrap()
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    fn require(&self, name: &str) -> Result<FileMeta, NodeError> {
        self.meta(name).ok_or_else(|| NodeError::NotFound(name.to_string()))
    }

    /// Raw bytes of the data or index part. Reads past the end are clamped.
    pub fn read_bytes(&self, name: &str, part: FilePart, offset: u64, len: u64) -> Result<Vec<u8>, NodeError> {
        let meta = self.require(name)?;
        let path = match part {
            FilePart::Data => self.data_path(name),
            FilePart::Index if meta.indexed => self.index_path(name),
            FilePart::Index => return Ok(Vec::new()),
        };
        let mut f = File::open(path)?;
        let total = f.metadata()?.len();
        if offset > total {
            return Err(NodeError::Range(format!("{name}: byte offset {offset} past length {total}")));
        }
        let n = len.min(total - offset);
        f.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; n as usize];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }

    /// Index of a stored file; a file-level-only file reports one record
    /// spanning all of it.
    pub fn read_index(&self, name: &str) -> Result<RecordIndex, NodeError> {
        let meta = self.require(name)?;
        if !meta.indexed {
            return Ok(RecordIndex::from_pairs([(0, meta.size)]));
        }
        RecordIndex::decode(&fs::read(self.index_path(name))?).map_err(|e| NodeError::Integrity(format!("{name}: {e}")))
    }

    /// Records `[first, first+count)` with their index rebased to the batch.
    pub fn read_records(&self, name: &str, first: u64, count: u64) -> Result<RecordBatch, NodeError> {
        let meta = self.require(name)?;
        let end = first.checked_add(count).filter(|&e| e <= meta.records).ok_or_else(|| {
            NodeError::Range(format!("{name}: records {first}+{count} exceed record count {}", meta.records))
        })?;
        if count == 0 {
            return Ok(RecordBatch::default());
        }
        let entries = if meta.indexed {
            let raw = self.read_bytes(name, FilePart::Index, first * INDEX_ENTRY_LEN as u64, count * INDEX_ENTRY_LEN as u64)?;
            RecordIndex::decode(&raw).map_err(|e| NodeError::Integrity(format!("{name}: {e}")))?
        } else {
            debug_assert_eq!(end, 1);
            RecordIndex::from_pairs([(0, meta.size)])
        };
        let lo = entries.entries()[0].offset;
        let hi = entries.entries().iter().map(IndexEntry::end).max().unwrap_or(lo);
        let data = self.read_bytes(name, FilePart::Data, lo, hi - lo)?;
        if (data.len() as u64) < hi - lo {
            return Err(NodeError::Integrity(format!("{name}: index points past end of data")));
        }
        Ok(RecordBatch { data, index: entries.rebased_slice(0, count as usize) })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NodeError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn scan(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), NodeError> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if entry.file_type()?.is_dir() {
            scan(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("scan stays under root");
        let Some(name) = rel.to_str() else { continue };
        if name.ends_with(INDEX_SUFFIX) || name.ends_with(".part") {
            continue;
        }
        out.push(name.replace(std::path::MAIN_SEPARATOR, "/"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, FileStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = FileStore::open(dir.path()).unwrap();
        (dir, s)
    }

    #[test]
    fn two_record_file_lands_with_its_index() {
        let (dir, s) = store();
        let idx = RecordIndex::contiguous([3, 4]);
        let meta = s.put("set/a.dat", b"abcdefg", Some(&idx)).unwrap();
        assert_eq!(meta, FileMeta { size: 7, records: 2, indexed: true });
        assert_eq!(fs::read(dir.path().join("set/a.dat")).unwrap(), b"abcdefg");
        assert_eq!(fs::read(dir.path().join("set/a.dat.idx")).unwrap(), idx.encode());
        let b = s.read_records("set/a.dat", 1, 1).unwrap();
        assert_eq!(b.record(0), b"defg");
        assert_eq!(s.read_records("set/a.dat", 0, 2).unwrap().data, b"abcdefg");
    }

    #[test]
    fn overrunning_index_is_refused_and_nothing_written() {
        let (dir, s) = store();
        let err = s.put("a", b"abc", Some(&RecordIndex::from_pairs([(0, 4)]))).unwrap_err();
        assert!(matches!(err, NodeError::Integrity(_)));
        assert!(!dir.path().join("a").exists());
    }

    #[test]
    fn range_overflow_is_an_error() {
        let (_d, s) = store();
        s.put("a", b"abc", Some(&RecordIndex::fixed(1, 3))).unwrap();
        assert!(matches!(s.read_records("a", 2, 2), Err(NodeError::Range(_))));
        assert!(matches!(s.read_records("zz", 0, 1), Err(NodeError::NotFound(_))));
    }

    #[test]
    fn unindexed_file_is_one_record() {
        let (_d, s) = store();
        let meta = s.put("blob", b"0123456789", None).unwrap();
        assert_eq!(meta.records, 1);
        assert!(!meta.indexed);
        assert_eq!(s.read_records("blob", 0, 1).unwrap().data, b"0123456789");
    }

    #[test]
    fn appends_extend_index() {
        let (_d, s) = store();
        s.append("j/bucket-0.dat", b"aab", &[2, 1]).unwrap();
        let meta = s.append("j/bucket-0.dat", b"cccc", &[4]).unwrap();
        assert_eq!(meta, FileMeta { size: 7, records: 3, indexed: true });
        assert_eq!(s.read_records("j/bucket-0.dat", 2, 1).unwrap().data, b"cccc");
        assert_eq!(s.list_prefix("j/").len(), 1);
    }

    #[test]
    fn reopen_recovers_catalog() {
        let (dir, s) = store();
        s.put("x/y", b"hello", Some(&RecordIndex::contiguous([5]))).unwrap();
        s.put("raw", b"hi", None).unwrap();
        drop(s);
        let s = FileStore::open(dir.path()).unwrap();
        assert_eq!(s.meta("x/y"), Some(FileMeta { size: 5, records: 1, indexed: true }));
        assert_eq!(s.meta("raw").map(|m| m.indexed), Some(false));
    }

    #[test]
    fn hostile_names_rejected() {
        for n in ["", "../x", "/abs", "a/../b", "a.idx", "a//b", "./a"] {
            assert!(check_name(n).is_err(), "{n}");
        }
        check_name("job-1/seg-00001.dat").unwrap();
    }
}
