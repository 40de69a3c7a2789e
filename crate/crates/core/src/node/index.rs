//! Record index: the `.idx` companion of a data file.
//!
//! On disk each entry is 16 bytes, `offset: u64 LE` then `size: u64 LE`.

use thiserror::Error;

pub const INDEX_ENTRY_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("index length {0} is not a multiple of 16")]
    Ragged(usize),
    #[error("record {at} overlaps or precedes record {prev}")]
    Overlap { prev: usize, at: usize },
    #[error("record {at} ends at byte {end}, past file length {len}")]
    Overrun { at: usize, end: u64, len: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexEntry {
    pub offset: u64,
    pub size: u64,
}

impl IndexEntry {
    pub fn end(&self) -> u64 {
        self.offset + self.size
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordIndex {
    entries: Vec<IndexEntry>,
}

impl RecordIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Self {
        Self { entries }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u64, u64)>) -> Self {
        Self { entries: pairs.into_iter().map(|(offset, size)| IndexEntry { offset, size }).collect() }
    }

    /// Back-to-back records of the given sizes starting at offset 0.
    pub fn contiguous(sizes: impl IntoIterator<Item = u64>) -> Self {
        let mut off = 0;
        let entries = sizes
            .into_iter()
            .map(|size| {
                let e = IndexEntry { offset: off, size };
                off += size;
                e
            })
            .collect();
        Self { entries }
    }

    /// Records of one fixed size tiling `data_len` bytes.
    pub fn fixed(record_len: u64, count: u64) -> Self {
        Self::contiguous(std::iter::repeat_n(record_len, count as usize))
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, e: IndexEntry) {
        self.entries.push(e);
    }

    /// Entries must not overlap, must be in offset order, and must end within
    /// the data file.
    pub fn validate(&self, data_len: u64) -> Result<(), IndexError> {
        for (i, w) in self.entries.windows(2).enumerate() {
            if w[0].end() > w[1].offset {
                return Err(IndexError::Overlap { prev: i, at: i + 1 });
            }
        }
        if let Some((i, last)) = self.entries.iter().enumerate().next_back() {
            if last.end() > data_len {
                return Err(IndexError::Overrun { at: i, end: last.end(), len: data_len });
            }
        }
        Ok(())
    }

    /// Copy of entries `[first, first+count)` shifted so the first starts at 0.
    pub fn rebased_slice(&self, first: usize, count: usize) -> RecordIndex {
        let slice = &self.entries[first..first + count];
        let base = slice.first().map_or(0, |e| e.offset);
        RecordIndex {
            entries: slice.iter().map(|e| IndexEntry { offset: e.offset - base, size: e.size }).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * INDEX_ENTRY_LEN);
        for e in &self.entries {
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.size.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, IndexError> {
        if !bytes.len().is_multiple_of(INDEX_ENTRY_LEN) {
            return Err(IndexError::Ragged(bytes.len()));
        }
        let entries = bytes
            .chunks_exact(INDEX_ENTRY_LEN)
            .map(|c| IndexEntry {
                offset: u64::from_le_bytes(c[..8].try_into().unwrap()),
                size: u64::from_le_bytes(c[8..].try_into().unwrap()),
            })
            .collect();
        Ok(Self { entries })
    }
}

/// A run of records read out of a file, with an index relative to `data`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordBatch {
    pub data: Vec<u8>,
    pub index: RecordIndex,
}

impl RecordBatch {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        for r in records {
            data.extend_from_slice(r);
            sizes.push(r.len() as u64);
        }
        Self { data, index: RecordIndex::contiguous(sizes) }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn record(&self, i: usize) -> &[u8] {
        let e = self.index.entries[i];
        &self.data[e.offset as usize..e.end() as usize]
    }

    pub fn records(&self) -> impl Iterator<Item = &[u8]> + '_ {
        self.index.entries.iter().map(move |e| &self.data[e.offset as usize..e.end() as usize])
    }
}
