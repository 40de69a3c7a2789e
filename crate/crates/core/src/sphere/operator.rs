//! In-process operator registry.
//!
//! A per-record operator sees one record at a time and may emit any number of
//! output records, each optionally tagged with a bucket. A per-segment
//! operator sees the whole segment at once; sorting and model fitting need
//! that.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::node::RecordBatch;

/// Output buffer handed to operators.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Emitter {
    data: Vec<u8>,
    sizes: Vec<u64>,
    buckets: Vec<Option<u64>>,
}

impl Emitter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emit(&mut self, record: &[u8]) {
        self.data.extend_from_slice(record);
        self.sizes.push(record.len() as u64);
        self.buckets.push(None);
    }

    pub fn emit_to(&mut self, bucket: u64, record: &[u8]) {
        self.data.extend_from_slice(record);
        self.sizes.push(record.len() as u64);
        self.buckets.push(Some(bucket));
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    pub fn buckets(&self) -> &[Option<u64>] {
        &self.buckets
    }

    pub fn records(&self) -> impl Iterator<Item = (&[u8], Option<u64>)> + '_ {
        let mut off = 0usize;
        self.sizes.iter().zip(&self.buckets).map(move |(&s, &b)| {
            let r = &self.data[off..off + s as usize];
            off += s as usize;
            (r, b)
        })
    }
}

pub type RecordFn = dyn Fn(&[u8], &[u8], &mut Emitter) -> Result<(), String> + Send + Sync;
pub type SegmentFn = dyn Fn(&RecordBatch, &[u8], &mut Emitter) -> Result<(), String> + Send + Sync;

#[derive(Clone)]
pub enum Operator {
    PerRecord(Arc<RecordFn>),
    PerSegment(Arc<SegmentFn>),
}

impl Operator {
    pub fn per_record(f: impl Fn(&[u8], &[u8], &mut Emitter) -> Result<(), String> + Send + Sync + 'static) -> Self {
        Operator::PerRecord(Arc::new(f))
    }

    pub fn per_segment(
        f: impl Fn(&RecordBatch, &[u8], &mut Emitter) -> Result<(), String> + Send + Sync + 'static,
    ) -> Self {
        Operator::PerSegment(Arc::new(f))
    }
}

impl std::fmt::Debug for Operator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Operator::PerRecord(_) => "Operator::PerRecord",
            Operator::PerSegment(_) => "Operator::PerSegment",
        })
    }
}

#[derive(Default)]
pub struct OperatorRegistry {
    ops: RwLock<HashMap<String, Operator>>,
}

impl std::fmt::Debug for OperatorRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl OperatorRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry with every operator this crate ships.
    pub fn with_builtins() -> Self {
        let r = Self::default();
        r.register("identity", Operator::per_record(|rec, _, out| {
            out.emit(rec);
            Ok(())
        }));
        r.register("count", Operator::per_segment(|batch, _, out| {
            out.emit(&(batch.len() as u64).to_le_bytes());
            Ok(())
        }));
        crate::bench::register_operators(&r);
        crate::angle::register_operators(&r);
        r
    }

    pub fn shared() -> Arc<Self> {
        Arc::new(Self::with_builtins())
    }

    pub fn register(&self, name: &str, op: Operator) {
        self.ops.write().unwrap().insert(name.to_string(), op);
    }

    pub fn get(&self, name: &str) -> Option<Operator> {
        self.ops.read().unwrap().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.ops.read().unwrap().keys().cloned().collect();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emitter_keeps_records_and_tags_aligned() {
        let mut e = Emitter::new();
        e.emit(b"ab");
        e.emit_to(7, b"");
        e.emit_to(2, b"xyz");
        let got: Vec<(&[u8], Option<u64>)> = e.records().collect();
        assert_eq!(got, vec![(&b"ab"[..], None), (&b""[..], Some(7)), (&b"xyz"[..], Some(2))]);
    }

    #[test]
    fn builtins_present() {
        let r = OperatorRegistry::with_builtins();
        for n in ["identity", "count", "terasort.sample", "terasort.partition", "terasort.sort", "angle.window", "angle.cluster"] {
            assert!(r.get(n).is_some(), "{n}");
        }
    }
}
