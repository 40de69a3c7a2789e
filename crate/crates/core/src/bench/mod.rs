//! Terasort and Terasplit.
//!
//! Records are 100 bytes: a 10-byte key followed by a 90-byte payload.

pub mod terasplit;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::client::{ClientError, ClientSession};
use crate::node::RecordIndex;
use crate::sphere::operator::{Operator, OperatorRegistry};
use crate::sphere::{run, BucketFn, JobReport, JobSpec, OutputSpec, SegmentLimits, SphereError, Stream};
use crate::transport::NodeAddr;

pub use terasplit::{entropy, split_gain, terasplit, SplitResult, SplitScanner};

pub const RECORD_LEN: usize = 100;
pub const KEY_LEN: usize = 10;
pub const DEFAULT_SAMPLE: u64 = 10_000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("class counts are all zero")]
    EmptyCounts,
    #[error("record {at} is out of key order")]
    NotSorted { at: u64 },
    #[error("record of {0} bytes; expected {RECORD_LEN}")]
    BadRecord(usize),
    #[error(transparent)]
    Sphere(#[from] SphereError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub fn key_of(record: &[u8]) -> &[u8] {
    &record[..KEY_LEN]
}

/// `n` pseudo-random records, deterministic in `seed`.
pub fn teragen(n: u64, seed: u64) -> (Vec<u8>, RecordIndex) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0u8; n as usize * RECORD_LEN];
    rng.fill_bytes(&mut data);
    (data, RecordIndex::fixed(RECORD_LEN as u64, n))
}

/// Write `path` and `path.idx`.
pub fn teragen_to_file(n: u64, seed: u64, path: &Path) -> Result<RecordIndex, BenchError> {
    let (data, index) = teragen(n, seed);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, &data)?;
    let mut idx = path.as_os_str().to_owned();
    idx.push(".idx");
    fs::write(idx, index.encode())?;
    Ok(index)
}

/// Order-independent digest of a record multiset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Checksum {
    pub count: u64,
    pub sum: u64,
    pub xor: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Checksum {
    pub fn add(&mut self, record: &[u8]) {
        let h = fnv1a(record);
        self.count += 1;
        self.sum = self.sum.wrapping_add(h);
        self.xor ^= h;
    }

    pub fn merge(&mut self, other: &Checksum) {
        self.count += other.count;
        self.sum = self.sum.wrapping_add(other.sum);
        self.xor ^= other.xor;
    }

    pub fn of<'a>(records: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut c = Self::default();
        for r in records {
            c.add(r);
        }
        c
    }
}

/// Read a stream front to back; report whether keys never decrease, and the
/// checksum of everything read.
pub fn verify_sorted(client: &ClientSession, stream: &Stream) -> Result<(bool, Checksum), BenchError> {
    let mut sum = Checksum::default();
    let mut prev: Option<[u8; KEY_LEN]> = None;
    let mut sorted = true;
    for f in &stream.files {
        client.for_each_batch(&f.name, |b| {
            for r in b.records() {
                sum.add(r);
                let k: [u8; KEY_LEN] = r[..KEY_LEN.min(r.len())].try_into().unwrap_or([0; KEY_LEN]);
                if prev.is_some_and(|p| p > k) {
                    sorted = false;
                }
                prev = Some(k);
            }
        })?;
    }
    Ok((sorted, sum))
}

fn check_len(r: &[u8]) -> Result<(), String> {
    if r.len() != RECORD_LEN {
        return Err(format!("record of {} bytes, expected {RECORD_LEN}", r.len()));
    }
    Ok(())
}

/// Bucket of `key` given sorted range boundaries: the number of boundaries
/// that are `<= key`.
pub fn bucket_of(boundaries: &[[u8; KEY_LEN]], key: &[u8]) -> usize {
    boundaries.partition_point(|b| &b[..] <= key)
}

pub fn encode_boundaries(b: &[[u8; KEY_LEN]]) -> Vec<u8> {
    b.concat()
}

pub fn decode_boundaries(p: &[u8]) -> Result<Vec<[u8; KEY_LEN]>, String> {
    if !p.len().is_multiple_of(KEY_LEN) {
        return Err(format!("boundary blob of {} bytes", p.len()));
    }
    Ok(p.chunks_exact(KEY_LEN).map(|c| c.try_into().unwrap()).collect())
}

/// `d - 1` boundaries splitting a sorted key sample into `d` ranges.
pub fn boundaries_from_sample(mut sample: Vec<[u8; KEY_LEN]>, d: usize) -> Vec<[u8; KEY_LEN]> {
    if sample.is_empty() || d <= 1 {
        return Vec::new();
    }
    sample.sort_unstable();
    (1..d).map(|i| sample[i * sample.len() / d]).collect()
}

fn sample_params(sample: u64, total: u64) -> Vec<u8> {
    let mut p = sample.to_le_bytes().to_vec();
    p.extend_from_slice(&total.to_le_bytes());
    p
}

pub fn register_operators(r: &OperatorRegistry) {
    r.register(
        "terasort.sample",
        Operator::per_segment(|batch, params, out| {
            let p: [u8; 16] = params.try_into().map_err(|_| "sample params must be 16 bytes".to_string())?;
            let want = u64::from_le_bytes(p[..8].try_into().unwrap());
            let total = u64::from_le_bytes(p[8..].try_into().unwrap()).max(1);
            let rows = batch.len() as u64;
            let k = (want * rows).div_ceil(total).min(rows);
            for i in 0..k {
                let rec = batch.record((i * rows / k) as usize);
                check_len(rec)?;
                out.emit(key_of(rec));
            }
            Ok(())
        }),
    );
    r.register(
        "terasort.partition",
        Operator::per_record(|rec, params, out| {
            check_len(rec)?;
            let b = decode_boundaries(params)?;
            out.emit_to(bucket_of(&b, key_of(rec)) as u64, rec);
            Ok(())
        }),
    );
    r.register(
        "terasort.sort",
        Operator::per_segment(|batch, _, out| {
            let mut recs: Vec<&[u8]> = batch.records().collect();
            recs.sort_unstable();
            for r in recs {
                out.emit(r);
            }
            Ok(())
        }),
    );
}

#[derive(Debug, Clone)]
pub struct TerasortConfig {
    pub sample: u64,
    pub job_prefix: String,
    pub limits: SegmentLimits,
    pub spes_per_node: usize,
}

impl Default for TerasortConfig {
    fn default() -> Self {
        Self {
            sample: DEFAULT_SAMPLE,
            job_prefix: "terasort".into(),
            limits: SegmentLimits::default(),
            spes_per_node: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TerasortReport {
    pub output: Stream,
    pub boundaries: Vec<[u8; KEY_LEN]>,
    pub sample: JobReport,
    pub partition: JobReport,
    pub sort: JobReport,
    pub elapsed: Duration,
}

/// Sort a stream of 100-byte records across `nodes`: sample keys, shuffle
/// records into one key range per node, then sort each range where it
/// landed. The output stream lists the sorted ranges in key order.
pub fn terasort(
    client: &ClientSession,
    stream: &Stream,
    nodes: &[NodeAddr],
    cfg: &TerasortConfig,
) -> Result<TerasortReport, BenchError> {
    let started = Instant::now();
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros()).unwrap_or(0);
    let tag = format!("{}-{:x}", cfg.job_prefix, stamp & 0xff_ffff_ffff);
    let base = |phase: &str, op: &str, out: OutputSpec| {
        let mut s = JobSpec::new(op, out).job_id(&format!("{tag}/{phase}")).nodes(nodes.to_vec());
        s.spes_per_node = cfg.spes_per_node;
        s
    };

    let sample_job = base("sample", "terasort.sample", OutputSpec::LocalWrite)
        .params(sample_params(cfg.sample, stream.total_records()))
        .limits(cfg.limits);
    let sample = run(client, stream, &sample_job)?;
    let fetched: Vec<Result<Vec<[u8; KEY_LEN]>, ClientError>> = std::thread::scope(|s| {
        let reads: Vec<_> = sample
            .output
            .files
            .iter()
            .map(|f| {
                s.spawn(move || {
                    let mut keys = Vec::new();
                    client.for_each_batch(&f.name, |b| {
                        keys.extend(b.records().filter_map(|k| <[u8; KEY_LEN]>::try_from(k).ok()));
                    })?;
                    Ok(keys)
                })
            })
            .collect();
        reads.into_iter().map(|h| h.join().expect("sample reader panicked")).collect()
    });
    let mut keys = Vec::new();
    for k in fetched {
        keys.extend(k?);
    }
    let boundaries = boundaries_from_sample(keys, nodes.len());

    let part_job = base("partition", "terasort.partition", OutputSpec::shuffle(BucketFn::Tag, nodes.to_vec())?)
        .params(encode_boundaries(&boundaries))
        .limits(cfg.limits);
    let partition = run(client, stream, &part_job)?;

    let largest = partition.output.files.iter().map(|f| f.meta.size).max().unwrap_or(1);
    let sort = if partition.output.is_empty() {
        partition.clone()
    } else {
        let sort_job = base("sort", "terasort.sort", OutputSpec::LocalWrite).limits(SegmentLimits::whole_files(largest));
        run(client, &partition.output, &sort_job)?
    };
    let output = if partition.output.is_empty() { Stream::default() } else { sort.output.clone() };
    Ok(TerasortReport { output, boundaries, sample, partition, sort, elapsed: started.elapsed() })
}
