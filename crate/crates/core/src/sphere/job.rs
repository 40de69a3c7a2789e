//! The job driver: one control loop on the client that hands segments to
//! SPEs across the cloud and gathers the output stream.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};

use super::schedule::{FailOutcome, ScheduleEvent, Scheduler, SegmentSite};
use super::spe::{segment_request, AssignedSegment, SegmentReport, SpeBinding};
use super::{segment_stream, DataSegment, OutputSpec, SegmentLimits, SphereError, Stream, StreamFile};
use crate::client::ClientSession;
use crate::node::protocol::{self, call, expect_reply};
use crate::node::NodeError;
use crate::transport::{MessageKind, NodeAddr};

#[derive(Debug, Clone)]
pub struct JobSpec {
    /// Prefix of every output file. Generated when absent.
    pub job_id: Option<String>,
    pub operator: String,
    /// Copied into every segment.
    pub params: Vec<u8>,
    pub output: OutputSpec,
    pub limits: SegmentLimits,
    pub spes_per_node: usize,
    /// Nodes to run SPEs on; all ring members when absent.
    pub nodes: Option<Vec<NodeAddr>>,
}

impl JobSpec {
    pub fn new(operator: &str, output: OutputSpec) -> Self {
        Self {
            job_id: None,
            operator: operator.to_string(),
            params: Vec::new(),
            output,
            limits: SegmentLimits::default(),
            spes_per_node: 1,
            nodes: None,
        }
    }

    pub fn params(mut self, p: Vec<u8>) -> Self {
        self.params = p;
        self
    }

    pub fn limits(mut self, l: SegmentLimits) -> Self {
        self.limits = l;
        self
    }

    pub fn job_id(mut self, id: &str) -> Self {
        self.job_id = Some(id.to_string());
        self
    }

    pub fn nodes(mut self, n: Vec<NodeAddr>) -> Self {
        self.nodes = Some(n);
        self
    }
}

#[derive(Debug, Clone)]
pub struct JobReport {
    pub job_id: String,
    pub output: Stream,
    pub segments: Vec<DataSegment>,
    /// Node of each SPE, by SPE index.
    pub spe_nodes: Vec<NodeAddr>,
    /// Start/finish log, times in seconds since the job began.
    pub events: Vec<ScheduleEvent>,
    pub reports: Vec<SegmentReport>,
    /// Progress acknowledgments as `(segment ordinal, records done)`.
    pub acks: Vec<(u64, u64)>,
    pub retries: usize,
    pub elapsed: Duration,
}

impl JobReport {
    pub fn records_in(&self) -> u64 {
        self.reports.iter().map(|r| r.rows).sum()
    }

    pub fn records_out(&self) -> u64 {
        self.reports.iter().map(|r| r.emitted).sum()
    }

    /// Segments completed per node.
    pub fn per_node(&self) -> BTreeMap<NodeAddr, usize> {
        let mut m = BTreeMap::new();
        for e in &self.events {
            if let ScheduleEvent::Finish { spe, .. } = e {
                *m.entry(self.spe_nodes[*spe].clone()).or_default() += 1;
            }
        }
        m
    }
}

fn fresh_job_id() -> String {
    static N: AtomicU64 = AtomicU64::new(0);
    let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
    format!("job-{:012x}", (t ^ N.fetch_add(1, Ordering::Relaxed).rotate_left(40)) & 0xffff_ffff_ffff)
}

enum Event {
    Progress { ordinal: u64, done: u64 },
    Done { spe: usize, result: Result<SegmentReport, NodeError> },
}

fn is_node_down(e: &NodeError) -> bool {
    matches!(e, NodeError::Transport(_) | NodeError::Unavailable(_))
}

/// Apply `spec.operator` to every record of `stream`.
pub fn run(client: &ClientSession, stream: &Stream, spec: &JobSpec) -> Result<JobReport, SphereError> {
    if stream.is_empty() {
        return Err(SphereError::EmptyStream);
    }
    let started = Instant::now();
    let job_id = spec.job_id.clone().unwrap_or_else(fresh_job_id);
    let nodes = match &spec.nodes {
        Some(n) => n.clone(),
        None => client.members()?,
    };
    let binding = SpeBinding { job_id: job_id.clone(), operator: spec.operator.clone(), output: spec.output.clone() };

    // Bind SPEs.
    let request = binding.encode();
    let per_node: Vec<Vec<Result<u64, NodeError>>> = thread::scope(|s| {
        let calls: Vec<_> = nodes
            .iter()
            .map(|n| {
                let request = &request;
                s.spawn(move || {
                    (0..spec.spes_per_node.max(1))
                        .map(|_| {
                            let b = call(client.pool(), n, MessageKind::SpeStart, request.clone())?;
                            let id: [u8; 8] = b.try_into().map_err(|_| NodeError::BadRequest("bad SPE id".into()))?;
                            Ok(u64::from_le_bytes(id))
                        })
                        .collect()
                })
            })
            .collect();
        calls.into_iter().map(|h| h.join().expect("SPE bind thread panicked")).collect()
    });
    let mut spes: Vec<(usize, u64)> = Vec::new();
    let mut unknown = None;
    for (ni, results) in per_node.into_iter().enumerate() {
        for r in results {
            match r {
                Ok(id) => spes.push((ni, id)),
                Err(NodeError::Operator(m)) => unknown = Some(m),
                Err(e) => warn!("{job_id}: no SPE on {}: {e}", nodes[ni]),
            }
        }
    }
    if let Some(m) = unknown {
        release(client, &nodes, &spes);
        warn!("{job_id}: {m}");
        return Err(SphereError::UnknownOperator(spec.operator.clone()));
    }
    if spes.is_empty() {
        return Err(SphereError::NoSpes);
    }

    let segments = match segment_stream(stream, spes.len(), spec.limits, &spec.params) {
        Ok(s) => s,
        Err(e) => {
            release(client, &nodes, &spes);
            return Err(e);
        }
    };
    let file_index: HashMap<&str, usize> = stream.files.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
    let node_index: HashMap<&NodeAddr, usize> = nodes.iter().enumerate().map(|(i, n)| (n, i)).collect();
    let sites: Vec<SegmentSite> = segments
        .iter()
        .map(|s| {
            let fi = file_index[s.file.as_str()];
            let locations = stream.files[fi].locations.iter().filter_map(|a| node_index.get(a).copied()).collect();
            SegmentSite { file: fi, locations }
        })
        .collect();
    let mut sched = Scheduler::new(sites, spes.iter().map(|s| s.0).collect());
    info!("{job_id}: {} segments over {} SPEs", segments.len(), spes.len());

    let (ev_tx, ev_rx) = mpsc::channel::<Event>();
    let mut workers = Vec::new();
    for (spe, &(ni, spe_id)) in spes.iter().enumerate() {
        let (tx, rx) = mpsc::channel::<AssignedSegment>();
        let ev = ev_tx.clone();
        let node = nodes[ni].clone();
        let chan = client.pool().open_channel(&node);
        workers.push(tx);
        thread::spawn(move || {
            for seg in rx {
                let ordinal = seg.ordinal;
                let result = match &chan {
                    Ok(ch) => {
                        let ev2 = ev.clone();
                        ch.call_with_progress(MessageKind::SpeSegment, segment_request(spe_id, &seg), &mut |p| {
                            if let Ok(b) = <[u8; 8]>::try_from(p) {
                                let _ = ev2.send(Event::Progress { ordinal, done: u64::from_le_bytes(b) });
                            }
                        })
                        .map_err(NodeError::from)
                        .and_then(expect_reply)
                        .and_then(|b| Ok(SegmentReport::decode(&b)?))
                    }
                    Err(e) => Err(NodeError::Unavailable(e.to_string())),
                };
                if ev.send(Event::Done { spe, result }).is_err() {
                    return;
                }
            }
        });
    }
    drop(ev_tx);

    let mut events = Vec::new();
    let mut reports = Vec::new();
    let mut acks = Vec::new();
    let mut retries = 0;
    let mut failed_on: HashMap<usize, Vec<NodeAddr>> = HashMap::new();
    let mut errors: HashMap<usize, String> = HashMap::new();
    let now = |t: Instant| t.elapsed().as_secs_f64();
    loop {
        for (spe, seg) in sched.assign() {
            events.push(ScheduleEvent::Start { time: now(started), spe, seg });
            let file = &stream.files[sched.segment(seg).file];
            let avoid = failed_on.get(&seg);
            let mut sources: Vec<NodeAddr> =
                file.locations.iter().filter(|a| avoid.is_none_or(|v| !v.contains(a))).cloned().collect();
            if sources.is_empty() {
                sources = file.locations.clone();
            }
            let a = AssignedSegment { ordinal: seg as u64, segment: segments[seg].clone(), sources };
            if workers[spe].send(a).is_err() {
                unreachable!("SPE worker exited while the job is running");
            }
        }
        if sched.is_finished() {
            break;
        }
        match ev_rx.recv() {
            Ok(Event::Progress { ordinal, done }) => acks.push((ordinal, done)),
            Ok(Event::Done { spe, result: Ok(r) }) => {
                let seg = sched.complete(spe);
                events.push(ScheduleEvent::Finish { time: now(started), spe, seg });
                reports.push(r);
            }
            Ok(Event::Done { spe, result: Err(e) }) => {
                let (seg, outcome) = sched.fail(spe);
                events.push(ScheduleEvent::Finish { time: now(started), spe, seg });
                let node = nodes[spes[spe].0].clone();
                warn!("{job_id}: segment {} failed on {node}: {e}", segments[seg].label());
                if is_node_down(&e) {
                    sched.disable(spe);
                }
                failed_on.entry(seg).or_default().push(node);
                errors.insert(seg, e.to_string());
                if outcome == FailOutcome::Retrying {
                    retries += 1;
                }
            }
            Err(_) => break,
        }
    }
    drop(workers);
    release(client, &nodes, &spes);

    let mut bad: Vec<usize> = sched.failed().to_vec();
    bad.extend(sched.stranded());
    if !bad.is_empty() {
        bad.sort_unstable();
        let failed = bad
            .iter()
            .map(|&s| match errors.get(&s) {
                Some(e) => format!("{} ({e})", segments[s].label()),
                None => format!("{} (never ran)", segments[s].label()),
            })
            .collect();
        return Err(SphereError::JobFailed { job_id, failed });
    }

    let output = collect_output(client, &job_id, &spec.output, &reports)?;
    reports.sort_by_key(|r| r.ordinal);
    let elapsed = started.elapsed();
    info!("{job_id}: done in {elapsed:?}, {} output files", output.files.len());
    Ok(JobReport {
        job_id,
        output,
        segments,
        spe_nodes: spes.iter().map(|s| nodes[s.0].clone()).collect(),
        events,
        reports,
        acks,
        retries,
        elapsed,
    })
}

fn release(client: &ClientSession, nodes: &[NodeAddr], spes: &[(usize, u64)]) {
    thread::scope(|s| {
        for &(ni, id) in spes {
            s.spawn(move || {
                if let Err(e) = call(client.pool(), &nodes[ni], MessageKind::SpeRelease, id.to_le_bytes().to_vec()) {
                    warn!("releasing SPE {id} on {}: {e}", nodes[ni]);
                }
            });
        }
    });
}

fn collect_output(
    client: &ClientSession,
    job_id: &str,
    output: &OutputSpec,
    reports: &[SegmentReport],
) -> Result<Stream, SphereError> {
    let mut files: BTreeMap<String, StreamFile> = BTreeMap::new();
    let mut add = |name: String, meta, holder: NodeAddr| {
        let f = files.entry(name.clone()).or_insert_with(|| StreamFile { name, meta, locations: Vec::new() });
        if !f.locations.contains(&holder) {
            f.locations.push(holder);
        }
    };
    match output {
        OutputSpec::Shuffle { .. } => {
            let mut holders: Vec<NodeAddr> = reports.iter().flat_map(|r| r.files.iter().map(|f| f.holder.clone())).collect();
            holders.sort();
            holders.dedup();
            let prefix = format!("{job_id}/");
            let sealed: Vec<Result<Vec<u8>, NodeError>> = thread::scope(|s| {
                let calls: Vec<_> = holders
                    .iter()
                    .map(|h| s.spawn(|| call(client.pool(), h, MessageKind::SealOutput, protocol::name_payload(&prefix))))
                    .collect();
                calls.into_iter().map(|c| c.join().expect("seal thread panicked")).collect()
            });
            for (h, b) in holders.iter().zip(sealed) {
                for (name, meta) in protocol::decode_listing(&b?)? {
                    add(name, meta, h.clone());
                }
            }
        }
        _ => {
            for r in reports {
                for f in &r.files {
                    if let Some(m) = f.meta {
                        add(f.name.clone(), m, f.holder.clone());
                    }
                }
            }
        }
    }
    Ok(Stream::new(files.into_values().collect()))
}
