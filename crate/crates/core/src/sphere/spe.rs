//! Sphere processing elements.
//!
//! An SPE is bound to one job (operator plus output mode) and then loops:
//! take a segment, read its records, run the operator into a buffer while
//! acknowledging progress, and finally write the buffer out and report.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use log::{debug, warn};

use super::operator::{Emitter, Operator};
use super::{bucket_output_name, segment_output_name, DataSegment, OutputSpec};
use crate::node::protocol::{self, call};
use crate::node::{FileMeta, Node, NodeError, RecordBatch, RecordIndex};
use crate::transport::{Message, MessageKind, NodeAddr, RequestContext};
use crate::wire::{WireError, WireReader, WireWriter};

/// What an SPE is bound to for the lifetime of a job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeBinding {
    pub job_id: String,
    pub operator: String,
    pub output: OutputSpec,
}

impl SpeBinding {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.str(&self.job_id).str(&self.operator);
        self.output.write(&mut w);
        w.finish()
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        let mut r = WireReader::new(b);
        let job_id = r.str()?.to_string();
        let operator = r.str()?.to_string();
        let output = OutputSpec::read(&mut r)?;
        r.finish()?;
        Ok(Self { job_id, operator, output })
    }
}

/// A segment handed to an SPE: its position in the job and where the file
/// can be read from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignedSegment {
    pub ordinal: u64,
    pub segment: DataSegment,
    pub sources: Vec<NodeAddr>,
}

impl AssignedSegment {
    fn write(&self, w: &mut WireWriter) {
        w.u64(self.ordinal);
        self.segment.write(w);
        let s: Vec<&str> = self.sources.iter().map(NodeAddr::as_str).collect();
        w.strs(&s);
    }

    fn read(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(Self {
            ordinal: r.u64()?,
            segment: DataSegment::read(r)?,
            sources: r.strs()?.into_iter().map(NodeAddr::new).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub holder: NodeAddr,
    /// Unknown for shuffle buckets until the job seals them.
    pub meta: Option<FileMeta>,
}

/// Final acknowledgment of a segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentReport {
    pub ordinal: u64,
    pub rows: u64,
    pub emitted: u64,
    pub served_by: NodeAddr,
    pub files: Vec<OutputFile>,
}

impl SegmentReport {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.u64(self.ordinal).u64(self.rows).u64(self.emitted).str(self.served_by.as_str()).u32(self.files.len() as u32);
        for f in &self.files {
            w.str(&f.name).str(f.holder.as_str()).bool(f.meta.is_some());
            if let Some(m) = &f.meta {
                protocol::write_meta(&mut w, m);
            }
        }
        w.finish()
    }

    pub fn decode(b: &[u8]) -> Result<Self, WireError> {
        let mut r = WireReader::new(b);
        let ordinal = r.u64()?;
        let rows = r.u64()?;
        let emitted = r.u64()?;
        let served_by = NodeAddr::new(r.str()?);
        let n = r.u32()?;
        let mut files = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.str()?.to_string();
            let holder = NodeAddr::new(r.str()?);
            let meta = if r.bool()? { Some(protocol::read_meta(&mut r)?) } else { None };
            files.push(OutputFile { name, holder, meta });
        }
        r.finish()?;
        Ok(Self { ordinal, rows, emitted, served_by, files })
    }
}

/// Where an SPE reads input and writes output.
pub trait SegmentEnv {
    /// The segment's records, and the node they were read from.
    fn read(&self, seg: &AssignedSegment) -> Result<(RecordBatch, NodeAddr), NodeError>;
    fn write(
        &self,
        binding: &SpeBinding,
        seg: &AssignedSegment,
        origin: &NodeAddr,
        out: &Emitter,
    ) -> Result<Vec<OutputFile>, NodeError>;
}

/// Receives progress acknowledgments. An error means the client is gone.
pub trait AckSink: Send {
    fn progress(&mut self, processed: u64) -> Result<(), ()>;
}

impl<F: FnMut(u64) -> Result<(), ()> + Send> AckSink for F {
    fn progress(&mut self, processed: u64) -> Result<(), ()> {
        self(processed)
    }
}

pub type SegmentResult = Result<SegmentReport, NodeError>;

pub enum SpeCommand {
    Segment { seg: AssignedSegment, acks: Box<dyn AckSink>, reply: Sender<SegmentResult> },
    Release,
}

/// Acknowledge every `max(1, rows/10)` records.
pub fn ack_interval(rows: u64) -> u64 {
    (rows / 10).max(1)
}

enum Abort {
    Failed(NodeError),
    Disconnected,
}

fn process(
    binding: &SpeBinding,
    op: &Operator,
    env: &dyn SegmentEnv,
    seg: &AssignedSegment,
    acks: &mut dyn AckSink,
) -> Result<SegmentReport, Abort> {
    let d = &seg.segment;
    let (batch, origin) = env.read(seg).map_err(Abort::Failed)?;
    if batch.len() as u64 != d.rows {
        return Err(Abort::Failed(NodeError::Integrity(format!(
            "segment {} read {} records, expected {}",
            d.label(),
            batch.len(),
            d.rows
        ))));
    }
    let fail = |at: Option<usize>, msg: String| {
        let at = at.map(|i| format!(" at record {}", d.offset + i as u64)).unwrap_or_default();
        Abort::Failed(NodeError::Operator(format!("segment {} ({}){at}: {msg}", seg.ordinal, d.label())))
    };
    let mut out = Emitter::new();
    match op {
        Operator::PerRecord(f) => {
            let every = ack_interval(d.rows);
            for (i, rec) in batch.records().enumerate() {
                f(rec, &d.params, &mut out).map_err(|m| fail(Some(i), m))?;
                let done = i as u64 + 1;
                if done.is_multiple_of(every) && done < d.rows {
                    acks.progress(done).map_err(|_| Abort::Disconnected)?;
                }
            }
        }
        Operator::PerSegment(f) => f(&batch, &d.params, &mut out).map_err(|m| fail(None, m))?,
    }
    if let OutputSpec::Shuffle { bucket, .. } = &binding.output {
        if let Some(i) = out.records().position(|(r, t)| bucket.bucket(r, t).is_none()) {
            return Err(fail(None, format!("output record {i} has no bucket")));
        }
    }
    let files = env.write(binding, seg, &origin, &out).map_err(Abort::Failed)?;
    Ok(SegmentReport { ordinal: seg.ordinal, rows: d.rows, emitted: out.len() as u64, served_by: origin, files })
}

/// The SPE main loop. Runs until released, until the command channel
/// closes, or until the client stops listening mid-segment (the buffered
/// output of that segment is dropped).
pub fn spe_loop(
    binding: &SpeBinding,
    op: &Operator,
    env: &dyn SegmentEnv,
    commands: Receiver<SpeCommand>,
) -> Vec<Result<SegmentReport, String>> {
    let mut reports = Vec::new();
    while let Ok(SpeCommand::Segment { seg, mut acks, reply }) = commands.recv() {
        match process(binding, op, env, &seg, &mut *acks) {
            Ok(r) => {
                let _ = reply.send(Ok(r.clone()));
                reports.push(Ok(r));
            }
            Err(Abort::Failed(e)) => {
                warn!("{}: {e}", binding.job_id);
                reports.push(Err(e.to_string()));
                let _ = reply.send(Err(e));
            }
            Err(Abort::Disconnected) => {
                debug!("{}: client went away during segment {}", binding.job_id, seg.ordinal);
                let e = NodeError::Unavailable(format!("segment {} abandoned: client disconnected", seg.ordinal));
                reports.push(Err(e.to_string()));
                let _ = reply.send(Err(e));
                break;
            }
        }
    }
    reports
}

/// Split operator output into per-destination batches: a record with bucket
/// `b` goes to slot `b mod n_dest`. Slots with no records are omitted.
pub fn shuffle_route(out: &Emitter, bucket: super::BucketFn, n_dest: usize) -> Result<Vec<(usize, RecordBatch)>, NodeError> {
    if n_dest == 0 {
        return Err(NodeError::BadRequest("shuffle with no destinations".into()));
    }
    let mut slots: Vec<(Vec<u8>, Vec<u64>)> = vec![Default::default(); n_dest];
    for (i, (rec, tag)) in out.records().enumerate() {
        let b = bucket.bucket(rec, tag).ok_or_else(|| NodeError::Operator(format!("output record {i} has no bucket")))?;
        let (data, sizes) = &mut slots[(b % n_dest as u64) as usize];
        data.extend_from_slice(rec);
        sizes.push(rec.len() as u64);
    }
    Ok(slots
        .into_iter()
        .enumerate()
        .filter(|(_, (_, s))| !s.is_empty())
        .map(|(slot, (data, sizes))| (slot, RecordBatch { data, index: RecordIndex::contiguous(sizes) }))
        .collect())
}

/// The node-side environment: reads through the node, writes per output mode.
pub struct NodeEnv<'a> {
    pub node: &'a Node,
}

impl SegmentEnv for NodeEnv<'_> {
    fn read(&self, seg: &AssignedSegment) -> Result<(RecordBatch, NodeAddr), NodeError> {
        let d = &seg.segment;
        if seg.sources.is_empty() {
            let locs = self.node.lookup(&d.file)?;
            return self.node.read_records_from(&d.file, d.offset, d.rows, &locs.holders);
        }
        self.node.read_records_from(&d.file, d.offset, d.rows, &seg.sources)
    }

    fn write(
        &self,
        binding: &SpeBinding,
        seg: &AssignedSegment,
        origin: &NodeAddr,
        out: &Emitter,
    ) -> Result<Vec<OutputFile>, NodeError> {
        if out.is_empty() {
            return Ok(Vec::new());
        }
        let node = self.node;
        match &binding.output {
            OutputSpec::LocalWrite | OutputSpec::ReturnToOrigin => {
                let dest = match binding.output {
                    OutputSpec::LocalWrite => node.addr().clone(),
                    _ => origin.clone(),
                };
                let name = segment_output_name(&binding.job_id, seg.ordinal);
                let index = RecordIndex::contiguous(out.sizes().iter().copied());
                let meta = if dest == *node.addr() {
                    node.store_local(&name, out.data(), Some(&index))?
                } else {
                    protocol::push_file(node.pool(), &dest, &name, out.data(), Some(&index))?
                };
                Ok(vec![OutputFile { name, holder: dest, meta: Some(meta) }])
            }
            OutputSpec::Shuffle { bucket, destinations } => {
                // One sender per destination slot, all at once.
                let routed = shuffle_route(out, *bucket, destinations.len())?;
                std::thread::scope(|s| {
                    let sends: Vec<_> = routed
                        .into_iter()
                        .map(|(slot, batch)| {
                            s.spawn(move || {
                                let name = bucket_output_name(&binding.job_id, slot);
                                let sizes: Vec<u64> = batch.index.entries().iter().map(|e| e.size).collect();
                                let holder = append_with_failover(node, destinations, slot, &name, &batch.data, &sizes)?;
                                Ok(OutputFile { name, holder, meta: None })
                            })
                        })
                        .collect();
                    sends.into_iter().map(|h| h.join().expect("shuffle sender panicked")).collect()
                })
            }
        }
    }
}

/// Append to `destinations[slot]`, moving on to the next destination (with
/// a warning) for each one that is down.
fn append_with_failover(
    node: &Node,
    destinations: &[NodeAddr],
    slot: usize,
    name: &str,
    data: &[u8],
    sizes: &[u64],
) -> Result<NodeAddr, NodeError> {
    let mut last = None;
    for k in 0..destinations.len() {
        let dest = &destinations[(slot + k) % destinations.len()];
        let r = if dest == node.addr() {
            node.store().append(name, data, sizes).map(drop)
        } else {
            call(node.pool(), dest, MessageKind::ShuffleAppend, protocol::append_payload(name, data, sizes)).map(drop)
        };
        match r {
            Ok(()) => return Ok(dest.clone()),
            Err(e @ (NodeError::Transport(_) | NodeError::Unavailable(_))) => {
                warn!("shuffle destination {dest} down ({e}); redirecting bucket {slot}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| NodeError::Unavailable("no shuffle destination".into())))
}

struct SpeEntry {
    tx: Sender<SpeCommand>,
    job_id: String,
}

/// The SPEs living on one node.
pub struct SpeHost {
    slots: usize,
    next: AtomicU64,
    spes: Mutex<HashMap<u64, SpeEntry>>,
}

impl SpeHost {
    pub fn new(slots: usize) -> Self {
        Self { slots: slots.max(1), next: AtomicU64::new(1), spes: Mutex::default() }
    }

    pub fn active(&self) -> usize {
        self.spes.lock().unwrap().len()
    }

    pub fn release_all(&self) {
        for (_, e) in self.spes.lock().unwrap().drain() {
            let _ = e.tx.send(SpeCommand::Release);
        }
    }

    fn start(&self, node: Arc<Node>, binding: SpeBinding) -> Result<u64, NodeError> {
        let op = node
            .operators()
            .get(&binding.operator)
            .ok_or_else(|| NodeError::Operator(format!("operator {:?} is not registered", binding.operator)))?;
        let mut spes = self.spes.lock().unwrap();
        if spes.len() >= self.slots {
            return Err(NodeError::Unavailable(format!("all {} SPE slots on {} are taken", self.slots, node.addr())));
        }
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        spes.insert(id, SpeEntry { tx, job_id: binding.job_id.clone() });
        drop(spes);
        thread::Builder::new()
            .name(format!("spe-{}-{id}", node.addr()))
            .spawn(move || {
                let reports = spe_loop(&binding, &op, &NodeEnv { node: &node }, rx);
                debug!("{}: SPE {id} for {} released after {} segments", node.addr(), binding.job_id, reports.len());
                node.spes.spes.lock().unwrap().remove(&id);
            })
            .map_err(NodeError::Io)?;
        Ok(id)
    }

    fn sender(&self, id: u64) -> Result<Sender<SpeCommand>, NodeError> {
        self.spes
            .lock()
            .unwrap()
            .get(&id)
            .map(|e| e.tx.clone())
            .ok_or_else(|| NodeError::NotFound(format!("SPE {id}")))
    }

    fn release(&self, id: u64) {
        if let Some(e) = self.spes.lock().unwrap().remove(&id) {
            debug!("releasing SPE {id} of {}", e.job_id);
            let _ = e.tx.send(SpeCommand::Release);
        }
    }
}

/// Node-side handling of the three SPE requests.
pub(crate) fn serve(node: &Node, ctx: &RequestContext, req: &Message) -> Result<Vec<u8>, NodeError> {
    let mut r = WireReader::new(&req.payload);
    match req.kind {
        MessageKind::SpeStart => {
            let binding = SpeBinding::decode(&req.payload)?;
            let id = node.spes.start(node.arc(), binding)?;
            Ok(id.to_le_bytes().to_vec())
        }
        MessageKind::SpeSegment => {
            let id = r.u64()?;
            let seg = AssignedSegment::read(&mut r)?;
            r.finish()?;
            let tx = node.spes.sender(id)?;
            let (reply, result) = mpsc::channel();
            let c = ctx.clone();
            let acks = Box::new(move |n: u64| c.progress(n.to_le_bytes().to_vec()).map_err(drop));
            tx.send(SpeCommand::Segment { seg, acks, reply })
                .map_err(|_| NodeError::Unavailable(format!("SPE {id} is gone")))?;
            let report = result.recv().map_err(|_| NodeError::Unavailable(format!("SPE {id} stopped")))??;
            Ok(report.encode())
        }
        MessageKind::SpeRelease => {
            let id = r.u64()?;
            r.finish()?;
            node.spes.release(id);
            Ok(Vec::new())
        }
        _ => unreachable!("not an SPE request"),
    }
}

/// Client-side encodings of the SPE requests.
pub(crate) fn segment_request(spe_id: u64, seg: &AssignedSegment) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.u64(spe_id);
    seg.write(&mut w);
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::BucketFn;
    use std::cell::RefCell;

    /// Records live in memory; writes are captured.
    struct FakeEnv {
        records: Vec<Vec<u8>>,
        written: RefCell<Vec<Vec<u8>>>,
    }

    impl SegmentEnv for FakeEnv {
        fn read(&self, seg: &AssignedSegment) -> Result<(RecordBatch, NodeAddr), NodeError> {
            let d = &seg.segment;
            let recs = &self.records[d.offset as usize..(d.offset + d.rows) as usize];
            Ok((RecordBatch::from_records(recs.iter().map(|r| &r[..])), "here:1".into()))
        }

        fn write(&self, _: &SpeBinding, _: &AssignedSegment, origin: &NodeAddr, out: &Emitter) -> Result<Vec<OutputFile>, NodeError> {
            self.written.borrow_mut().extend(out.records().map(|(r, _)| r.to_vec()));
            Ok(vec![OutputFile { name: "out".into(), holder: origin.clone(), meta: None }])
        }
    }

    fn env(n: usize) -> FakeEnv {
        FakeEnv { records: (0..n).map(|i| format!("rec-{i}").into_bytes()).collect(), written: RefCell::default() }
    }

    fn binding(op: &str) -> SpeBinding {
        SpeBinding { job_id: "job".into(), operator: op.into(), output: OutputSpec::LocalWrite }
    }

    fn seg(offset: u64, rows: u64) -> AssignedSegment {
        AssignedSegment {
            ordinal: 3,
            segment: DataSegment { file: "f".into(), offset, rows, params: vec![] },
            sources: vec![],
        }
    }

    fn run_one(op: &Operator, env: &FakeEnv, s: AssignedSegment) -> (SegmentResult, Vec<u64>) {
        let (tx, rx) = mpsc::channel();
        let (rtx, rrx) = mpsc::channel();
        let acks = Arc::new(Mutex::new(Vec::new()));
        let a2 = acks.clone();
        tx.send(SpeCommand::Segment { seg: s, acks: Box::new(move |n| {
            let _: () = a2.lock().unwrap().push(n);
            Ok(())
        }), reply: rtx })
            .unwrap();
        tx.send(SpeCommand::Release).unwrap();
        let reports = spe_loop(&binding("x"), op, env, rx);
        assert_eq!(reports.len(), 1);
        let acks = acks.lock().unwrap().clone();
        (rrx.recv().unwrap(), acks)
    }

    #[test]
    fn identity_over_ten_records() {
        let e = env(10);
        let id = Operator::per_record(|r, _, o| {
            o.emit(r);
            Ok(())
        });
        let (r, acks) = run_one(&id, &e, seg(0, 10));
        let r = r.unwrap();
        assert_eq!((r.rows, r.emitted), (10, 10));
        assert_eq!(*e.written.borrow(), e.records);
        assert!(acks.windows(2).all(|w| w[0] < w[1]));
        assert!(acks.iter().all(|&a| a < 10));
    }

    #[test]
    fn failing_record_names_the_segment() {
        let e = env(10);
        let op = Operator::per_record(|r, _, o| {
            if r == b"rec-5" {
                return Err("boom".into());
            }
            o.emit(r);
            Ok(())
        });
        let (r, _) = run_one(&op, &e, seg(0, 10));
        let msg = r.unwrap_err().to_string();
        assert!(msg.contains("f@0+10") && msg.contains("record 5") && msg.contains("boom"), "{msg}");
        assert!(e.written.borrow().is_empty());
    }

    #[test]
    fn disconnect_releases_spe_and_drops_buffer() {
        let e = env(100);
        let id = Operator::per_record(|r, _, o| {
            o.emit(r);
            Ok(())
        });
        let (tx, rx) = mpsc::channel();
        let (rtx, rrx) = mpsc::channel();
        tx.send(SpeCommand::Segment { seg: seg(0, 100), acks: Box::new(|_| Err(())), reply: rtx }).unwrap();
        let (rtx2, _rrx2) = mpsc::channel();
        tx.send(SpeCommand::Segment { seg: seg(0, 1), acks: Box::new(|_| Ok(())), reply: rtx2 }).unwrap();
        let reports = spe_loop(&binding("x"), &id, &e, rx);
        assert_eq!(reports.len(), 1, "loop must stop after the disconnect");
        assert!(rrx.recv().unwrap().is_err());
        assert!(e.written.borrow().is_empty());
    }

    #[test]
    fn ack_interval_is_a_tenth() {
        assert_eq!(ack_interval(1), 1);
        assert_eq!(ack_interval(9), 1);
        assert_eq!(ack_interval(100), 10);
    }

    #[test]
    fn shuffle_route_by_first_byte() {
        let mut out = Emitter::new();
        for r in [&b"\x00a"[..], b"\x05b", b"\x02c", b"\x07d"] {
            out.emit(r);
        }
        let batches = shuffle_route(&out, BucketFn::FirstByte, 4).unwrap();
        let slots: Vec<(usize, Vec<&[u8]>)> = batches.iter().map(|(s, b)| (*s, b.records().collect())).collect();
        assert_eq!(slots, vec![(0, vec![&b"\x00a"[..]]), (1, vec![&b"\x05b"[..]]), (2, vec![&b"\x02c"[..]]), (3, vec![&b"\x07d"[..]])]);
        assert!(shuffle_route(&Emitter::new(), BucketFn::Tag, 3).unwrap().is_empty());
        let one = shuffle_route(&out, BucketFn::FirstByte, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].1.len(), 4);
    }

    #[test]
    fn report_round_trip() {
        let r = SegmentReport {
            ordinal: 4,
            rows: 10,
            emitted: 3,
            served_by: "a:1".into(),
            files: vec![
                OutputFile { name: "j/seg-00004.dat".into(), holder: "a:1".into(), meta: Some(FileMeta { size: 3, records: 3, indexed: true }) },
                OutputFile { name: "j/bucket-00001.dat".into(), holder: "b:1".into(), meta: None },
            ],
        };
        assert_eq!(SegmentReport::decode(&r.encode()).unwrap(), r);
    }
}
