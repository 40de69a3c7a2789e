//! The compute layer: split a stream of files into segments, run an operator
//! over every segment on processing elements close to the data, and route
//! the results.

pub mod job;
pub mod operator;
pub mod schedule;
pub mod spe;

use thiserror::Error;

use crate::node::{FileMeta, NodeError};
use crate::transport::NodeAddr;
use crate::wire::{WireError, WireReader, WireWriter};

pub use job::{run, JobReport, JobSpec};
pub use operator::{Emitter, Operator, OperatorRegistry};
pub use schedule::{ScheduleEvent, Scheduler, SegmentSite};
pub use spe::{shuffle_route, SegmentReport};

#[derive(Debug, Error)]
pub enum SphereError {
    #[error("stream has no files")]
    EmptyStream,
    #[error("segment limits must satisfy 0 < s_min <= s_max (got {0}, {1})")]
    BadLimits(u64, u64),
    #[error("need at least one processing element")]
    NoSpes,
    #[error("shuffle needs at least one destination")]
    NoDestinations,
    #[error("operator {0:?} is not registered")]
    UnknownOperator(String),
    #[error("job {job_id} failed; segments: {}", failed.join(", "))]
    JobFailed { job_id: String, failed: Vec<String> },
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("malformed payload: {0}")]
    Wire(#[from] WireError),
}

/// One file of a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamFile {
    pub name: String,
    pub meta: FileMeta,
    pub locations: Vec<NodeAddr>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stream {
    pub files: Vec<StreamFile>,
}

impl Stream {
    pub fn new(files: Vec<StreamFile>) -> Self {
        Self { files }
    }

    pub fn total_size(&self) -> u64 {
        self.files.iter().map(|f| f.meta.size).sum()
    }

    pub fn total_records(&self) -> u64 {
        self.files.iter().map(|f| f.meta.records).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|f| f.name.clone()).collect()
    }
}

/// A run of records within one file, plus the job's parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSegment {
    pub file: String,
    pub offset: u64,
    pub rows: u64,
    pub params: Vec<u8>,
}

impl DataSegment {
    pub fn label(&self) -> String {
        format!("{}@{}+{}", self.file, self.offset, self.rows)
    }

    pub fn write(&self, w: &mut WireWriter) {
        w.str(&self.file).u64(self.offset).u64(self.rows).bytes(&self.params);
    }

    pub fn read(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(Self { file: r.str()?.to_string(), offset: r.u64()?, rows: r.u64()?, params: r.bytes()?.to_vec() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLimits {
    s_min: u64,
    s_max: u64,
}

impl SegmentLimits {
    pub fn new(s_min: u64, s_max: u64) -> Result<Self, SphereError> {
        if s_min == 0 || s_min > s_max {
            return Err(SphereError::BadLimits(s_min, s_max));
        }
        Ok(Self { s_min, s_max })
    }

    /// Limits that never split a file below `largest` bytes.
    pub fn whole_files(largest: u64) -> Self {
        let s = largest.max(1);
        Self { s_min: s, s_max: u64::MAX }
    }

    pub fn s_min(&self) -> u64 {
        self.s_min
    }

    pub fn s_max(&self) -> u64 {
        self.s_max
    }

    /// Bytes per segment for a stream of `total` bytes over `n_spe` elements.
    pub fn target(&self, total: u64, n_spe: usize) -> u64 {
        total.div_ceil(n_spe.max(1) as u64).clamp(self.s_min, self.s_max)
    }
}

impl Default for SegmentLimits {
    fn default() -> Self {
        Self { s_min: 1 << 20, s_max: 64 << 20 }
    }
}

/// Records per segment for a file, from the byte target and the file's mean
/// record size, rounded up.
pub fn rows_for(meta: &FileMeta, target: u64) -> u64 {
    if meta.records == 0 {
        return 0;
    }
    if meta.size == 0 {
        return meta.records;
    }
    let rows = (target as u128 * meta.records as u128).div_ceil(meta.size as u128);
    rows.clamp(1, meta.records as u128) as u64
}

/// Cut every file of the stream into segments of about the target size.
/// Segments tile each file and never cross a file boundary.
pub fn segment_stream(
    stream: &Stream,
    n_spe: usize,
    limits: SegmentLimits,
    params: &[u8],
) -> Result<Vec<DataSegment>, SphereError> {
    if n_spe == 0 {
        return Err(SphereError::NoSpes);
    }
    if stream.is_empty() {
        return Err(SphereError::EmptyStream);
    }
    let target = limits.target(stream.total_size(), n_spe);
    let mut out = Vec::new();
    for f in &stream.files {
        let rows = rows_for(&f.meta, target);
        let mut off = 0;
        while off < f.meta.records {
            let n = rows.min(f.meta.records - off);
            out.push(DataSegment { file: f.name.clone(), offset: off, rows: n, params: params.to_vec() });
            off += n;
        }
    }
    Ok(out)
}

/// How a shuffle picks the bucket of an output record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketFn {
    /// The bucket the operator tagged the record with.
    Tag,
    /// The record's first byte (0 for an empty record).
    FirstByte,
}

impl BucketFn {
    pub fn bucket(self, record: &[u8], tag: Option<u64>) -> Option<u64> {
        match self {
            BucketFn::Tag => tag,
            BucketFn::FirstByte => Some(record.first().copied().unwrap_or(0) as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputSpec {
    /// Write each segment's output back on the node its input came from.
    ReturnToOrigin,
    /// Write each segment's output on the node that processed it.
    LocalWrite,
    /// Send each record to `destinations[bucket % len]`.
    Shuffle { bucket: BucketFn, destinations: Vec<NodeAddr> },
}

impl OutputSpec {
    pub fn shuffle(bucket: BucketFn, destinations: Vec<NodeAddr>) -> Result<Self, SphereError> {
        if destinations.is_empty() {
            return Err(SphereError::NoDestinations);
        }
        Ok(OutputSpec::Shuffle { bucket, destinations })
    }

    pub fn write(&self, w: &mut WireWriter) {
        match self {
            OutputSpec::ReturnToOrigin => {
                w.u8(0);
            }
            OutputSpec::LocalWrite => {
                w.u8(1);
            }
            OutputSpec::Shuffle { bucket, destinations } => {
                let d: Vec<&str> = destinations.iter().map(NodeAddr::as_str).collect();
                w.u8(2).u8(match bucket {
                    BucketFn::Tag => 0,
                    BucketFn::FirstByte => 1,
                });
                w.strs(&d);
            }
        }
    }

    pub fn read(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        match r.u8()? {
            0 => Ok(OutputSpec::ReturnToOrigin),
            1 => Ok(OutputSpec::LocalWrite),
            2 => {
                let bucket = match r.u8()? {
                    0 => BucketFn::Tag,
                    1 => BucketFn::FirstByte,
                    v => return Err(WireError::BadValue { field: "bucket", value: v as u64 }),
                };
                let destinations: Vec<NodeAddr> = r.strs()?.into_iter().map(NodeAddr::new).collect();
                if destinations.is_empty() {
                    return Err(WireError::BadValue { field: "destinations", value: 0 });
                }
                Ok(OutputSpec::Shuffle { bucket, destinations })
            }
            v => Err(WireError::BadValue { field: "output mode", value: v as u64 }),
        }
    }
}

/// Name of the output file of segment `ordinal` of a job.
pub fn segment_output_name(job_id: &str, ordinal: u64) -> String {
    format!("{job_id}/seg-{ordinal:05}.dat")
}

/// Name of the shuffle bucket file for destination slot `slot`.
pub fn bucket_output_name(job_id: &str, slot: usize) -> String {
    format!("{job_id}/bucket-{slot:05}.dat")
}
